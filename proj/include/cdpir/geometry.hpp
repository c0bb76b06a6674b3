#pragma once

// Scan geometries, image grids and the system operator.
//
// Every ray is traced with Siddon's exact interval-length method. Small
// operators keep the traced weights as a sparse matrix; large ones trace on the
// fly. Forward projection and backprojection read the same weights, so the pair
// is an exact adjoint up to floating-point summation order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cdpir/errors.hpp"

namespace cdpir {

struct ImageGrid {
  int nx = 128;
  int ny = 128;
  double pixel_size = 0.6875;  // mm

  std::size_t size() const { return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny); }
  double x_min() const { return -0.5 * nx * pixel_size; }
  double y_min() const { return -0.5 * ny * pixel_size; }
  double x_max() const { return 0.5 * nx * pixel_size; }
  double y_max() const { return 0.5 * ny * pixel_size; }
  double circumradius() const { return 0.5 * pixel_size * std::hypot(double(nx), double(ny)); }

  void validate() const {
    require(nx >= 1 && ny >= 1, "ImageGrid: pixel counts must be >= 1");
    require(pixel_size > 0.0 && std::isfinite(pixel_size), "ImageGrid: pixel_size must be > 0");
  }

  bool operator==(const ImageGrid&) const = default;
};

/// Row-major attenuation map; pixel (ix, iy) lives at values[iy * nx + ix] and
/// its center sits at x = x_min + (ix + 0.5) * pixel_size (same for y).
struct Image {
  ImageGrid grid;
  std::vector<double> values;

  Image() = default;
  explicit Image(ImageGrid g, double fill = 0.0) : grid(g), values(g.size(), fill) { g.validate(); }
  Image(ImageGrid g, std::vector<double> v) : grid(g), values(std::move(v)) {
    g.validate();
    require(values.size() == g.size(), "Image: values length must equal nx*ny");
  }

  double& at(int ix, int iy) { return values[std::size_t(iy) * grid.nx + ix]; }
  double at(int ix, int iy) const { return values[std::size_t(iy) * grid.nx + ix]; }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
};

enum class DetectorKind { FanFlat, FanCurved, Parallel };

inline std::string to_string(DetectorKind kind) {
  switch (kind) {
    case DetectorKind::FanFlat: return "fan_flat";
    case DetectorKind::FanCurved: return "fan_curved";
    case DetectorKind::Parallel: return "parallel";
  }
  return "unknown";
}

inline DetectorKind detector_kind_from_string(const std::string& s) {
  if (s == "fan_flat") return DetectorKind::FanFlat;
  if (s == "fan_curved") return DetectorKind::FanCurved;
  if (s == "parallel") return DetectorKind::Parallel;
  throw std::invalid_argument("unknown detector kind '" + s + "'");
}

/// Fan beam or parallel beam acquisition. For the curved detector the
/// det_spacing is the arc length between cell centers at distance sdd, so the
/// angular increment is det_spacing / sdd.
struct ScanGeometry {
  DetectorKind kind = DetectorKind::FanFlat;
  double sid = 156.4025;  // mm, fan only
  double sdd = 274.4;     // mm, fan only
  int n_det = 256;
  double det_spacing = 0.936;  // mm
  std::vector<double> angles;  // radians

  int n_views() const { return static_cast<int>(angles.size()); }
  std::size_t n_rays() const { return angles.size() * static_cast<std::size_t>(n_det); }
  bool is_fan() const { return kind != DetectorKind::Parallel; }

  /// Detector cell coordinate relative to the central ray (mm along the
  /// detector for flat/parallel, radians for curved).
  double cell_offset(int det) const {
    const double u = (det - 0.5 * (n_det - 1)) * det_spacing;
    return kind == DetectorKind::FanCurved ? u / sdd : u;
  }

  /// Radius of the circle fully covered by every view's ray fan.
  double fov_radius() const {
    const double half_span = 0.5 * n_det * det_spacing;
    switch (kind) {
      case DetectorKind::FanFlat: return sid * std::sin(std::atan(half_span / sdd));
      case DetectorKind::FanCurved: return sid * std::sin(std::min(half_span / sdd, 0.5 * std::numbers::pi));
      case DetectorKind::Parallel: return half_span;
    }
    return 0.0;
  }

  void validate() const {
    require(n_det >= 1, "ScanGeometry: n_det must be >= 1");
    require(det_spacing > 0.0, "ScanGeometry: det_spacing must be > 0");
    require(!angles.empty(), "ScanGeometry: at least one view angle required");
    if (is_fan()) require(sid > 0.0 && sid < sdd, "ScanGeometry: fan beam requires 0 < sid < sdd");
    for (std::size_t i = 1; i < angles.size(); ++i)
      require(angles[i] > angles[i - 1], "ScanGeometry: angles must be strictly increasing");
    require(angles.back() - angles.front() < 2.0 * std::numbers::pi,
            "ScanGeometry: angles must lie within one rotation");
  }

  bool operator==(const ScanGeometry&) const = default;
};

struct Sinogram {
  ScanGeometry geometry;
  std::vector<double> values;  // view-major: values[view * n_det + det]

  Sinogram() = default;
  explicit Sinogram(ScanGeometry g, double fill = 0.0) : geometry(std::move(g)) {
    values.assign(geometry.n_rays(), fill);
  }
  Sinogram(ScanGeometry g, std::vector<double> v) : geometry(std::move(g)), values(std::move(v)) {
    require(values.size() == geometry.n_rays(), "Sinogram: values length must equal n_views*n_det");
  }

  double& at(int view, int det) { return values[std::size_t(view) * geometry.n_det + det]; }
  double at(int view, int det) const { return values[std::size_t(view) * geometry.n_det + det]; }
};

/// n_views equally spaced angles in [0, full_rotation), starting at 0.
inline std::vector<double> uniform_angles(int n_views, double full_rotation = 2.0 * std::numbers::pi) {
  require(n_views >= 1, "uniform_angles: n_views must be >= 1");
  require(full_rotation > 0.0, "uniform_angles: rotation must be positive");
  std::vector<double> angles(static_cast<std::size_t>(n_views));
  for (int i = 0; i < n_views; ++i) angles[i] = full_rotation * i / n_views;
  return angles;
}

/// Indices floor(i * n_views / n_keep) for i in [0, n_keep).
inline std::vector<int> subsample_indices(int n_views, int n_keep) {
  require(n_keep >= 1 && n_keep <= n_views, "subsample_views: n_keep must be in [1, n_views]");
  std::vector<int> idx(static_cast<std::size_t>(n_keep));
  for (int i = 0; i < n_keep; ++i)
    idx[i] = static_cast<int>((static_cast<long long>(i) * n_views) / n_keep);
  return idx;
}

inline ScanGeometry subsample_views(const ScanGeometry& geometry, int n_keep) {
  ScanGeometry out = geometry;
  out.angles.clear();
  for (int i : subsample_indices(geometry.n_views(), n_keep)) out.angles.push_back(geometry.angles[i]);
  return out;
}

/// Ray as origin + s * direction with a unit direction. For fan beams the
/// origin is the source and only s >= 0 is traced.
struct Ray {
  double ox, oy;
  double dx, dy;
  bool half_line;
};

inline Ray ray_for(const ScanGeometry& g, int view, int det) {
  const double theta = g.angles[view];
  const double c = std::cos(theta), s = std::sin(theta);
  const double offset = g.cell_offset(det);
  switch (g.kind) {
    case DetectorKind::Parallel:
      // Rays travel along -(c, s); detector axis e_u = (-s, c).
      return Ray{-s * offset, c * offset, -c, -s, false};
    case DetectorKind::FanFlat: {
      const double px = -(g.sdd - g.sid) * c - s * offset;
      const double py = -(g.sdd - g.sid) * s + c * offset;
      const double sx = g.sid * c, sy = g.sid * s;
      const double len = std::hypot(px - sx, py - sy);
      return Ray{sx, sy, (px - sx) / len, (py - sy) / len, true};
    }
    case DetectorKind::FanCurved: {
      // Central direction -(c, s) rotated by the cell's fan angle.
      const double cg = std::cos(offset), sg = std::sin(offset);
      return Ray{g.sid * c, g.sid * s, -(c * cg - s * sg), -(s * cg + c * sg), true};
    }
  }
  return Ray{0, 0, 1, 0, false};
}

/// Siddon traversal: calls visit(pixel_index, intersection_length_mm) for every
/// pixel the ray crosses with a positive length, in order along the ray.
template <class Visit>
void trace_ray(const ImageGrid& grid, const Ray& ray, Visit&& visit) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  double s_enter = ray.half_line ? 0.0 : -inf;
  double s_exit = inf;

  auto clip = [&](double o, double d, double lo, double hi) {
    if (d == 0.0) {
      if (o < lo || o > hi) s_exit = -inf;
      return;
    }
    double a = (lo - o) / d, b = (hi - o) / d;
    if (a > b) std::swap(a, b);
    s_enter = std::max(s_enter, a);
    s_exit = std::min(s_exit, b);
  };
  clip(ray.ox, ray.dx, grid.x_min(), grid.x_max());
  clip(ray.oy, ray.dy, grid.y_min(), grid.y_max());
  if (!(s_exit > s_enter)) return;

  const double h = grid.pixel_size;
  const double x0 = grid.x_min(), y0 = grid.y_min();

  // Next crossing parameter with a vertical (x) or horizontal (y) grid line.
  auto first_plane = [&](double o, double d, double lo, int n, int& k, double& s_next) {
    if (d == 0.0) {
      s_next = inf;
      return;
    }
    const double p = (o + s_enter * d - lo) / h;
    k = d > 0.0 ? static_cast<int>(std::floor(p)) + 1 : static_cast<int>(std::ceil(p)) - 1;
    k = std::clamp(k, -1, n + 1);
    s_next = (lo + k * h - o) / d;
    while (s_next <= s_enter && k >= 0 && k <= n) {
      k += d > 0.0 ? 1 : -1;
      s_next = (lo + k * h - o) / d;
    }
    if (k < 0 || k > n) s_next = inf;
  };
  int kx = 0, ky = 0;
  double sx_next, sy_next;
  first_plane(ray.ox, ray.dx, x0, grid.nx, kx, sx_next);
  first_plane(ray.oy, ray.dy, y0, grid.ny, ky, sy_next);
  const int step_x = ray.dx > 0.0 ? 1 : -1;
  const int step_y = ray.dy > 0.0 ? 1 : -1;

  double s = s_enter;
  while (s < s_exit) {
    const double s_next = std::min({sx_next, sy_next, s_exit});
    const double len = s_next - s;
    if (len > 0.0) {
      const double mid = s + 0.5 * len;
      const int ix = std::clamp(static_cast<int>(std::floor((ray.ox + mid * ray.dx - x0) / h)), 0, grid.nx - 1);
      const int iy = std::clamp(static_cast<int>(std::floor((ray.oy + mid * ray.dy - y0) / h)), 0, grid.ny - 1);
      visit(static_cast<std::size_t>(iy) * grid.nx + ix, len);
    }
    if (sx_next <= s_next) {
      kx += step_x;
      sx_next = (kx < 0 || kx > grid.nx) ? inf : (x0 + kx * h - ray.ox) / ray.dx;
    }
    if (sy_next <= s_next) {
      ky += step_y;
      sy_next = (ky < 0 || ky > grid.ny) ? inf : (y0 + ky * h - ray.oy) / ray.dy;
    }
    s = s_next;
  }
}

/// Interleaved ordered-subset partition: view i belongs to subset i mod K.
struct ViewSubsets {
  std::vector<std::vector<int>> subsets;

  int count() const { return static_cast<int>(subsets.size()); }
};

inline ViewSubsets partition_subsets(int n_views, int k) {
  require(k >= 1 && k <= n_views, "partition_subsets: K must be in [1, n_views]");
  ViewSubsets out;
  out.subsets.resize(static_cast<std::size_t>(k));
  for (int v = 0; v < n_views; ++v) out.subsets[v % k].push_back(v);
  return out;
}

inline ViewSubsets partition_subsets(const ScanGeometry& geometry, int k) {
  return partition_subsets(geometry.n_views(), k);
}

struct RowColSums {
  std::vector<double> row;  // per ray: A * 1
  std::vector<double> col;  // per pixel: A^T * 1
};

/// The system operator A for one (geometry, grid) pair. Immutable after
/// construction; all methods are const and thread-compatible.
class Projector {
 public:
  Projector(ScanGeometry geometry, ImageGrid grid) : geometry_(std::move(geometry)), grid_(grid) {
    geometry_.validate();
    grid_.validate();
    const double r = grid_.circumradius();
    if (geometry_.is_fan() && !(r < geometry_.sid))
      throw std::invalid_argument("Projector: source trajectory intersects the image grid");
    if (r > geometry_.fov_radius() * (1.0 + 1e-12))
      throw std::invalid_argument("Projector: image grid (circumradius " + std::to_string(r) +
                                  " mm) exceeds the scan field of view (" +
                                  std::to_string(geometry_.fov_radius()) + " mm)");
    rays_.reserve(geometry_.n_rays());
    for (int v = 0; v < geometry_.n_views(); ++v)
      for (int d = 0; d < geometry_.n_det; ++d) rays_.push_back(ray_for(geometry_, v, d));
    if (double(geometry_.n_rays()) * (grid_.nx + grid_.ny) <= kMaxCachedEntries) build_matrix();
  }

  /// True when ray weights are held in a precomputed sparse matrix.
  bool cached() const { return !row_ptr_.empty(); }

  const ScanGeometry& geometry() const { return geometry_; }
  const ImageGrid& grid() const { return grid_; }
  int n_views() const { return geometry_.n_views(); }
  int n_det() const { return geometry_.n_det; }

  template <class Visit>
  void trace(int view, int det, Visit&& visit) const {
    const std::size_t ray = std::size_t(view) * geometry_.n_det + det;
    if (cached()) {
      for (std::size_t k = row_ptr_[ray]; k < row_ptr_[ray + 1]; ++k) visit(std::size_t(cols_[k]), weights_[k]);
      return;
    }
    trace_ray(grid_, rays_[ray], std::forward<Visit>(visit));
  }

  Sinogram project(const Image& image) const {
    require(image.grid == grid_, "project: image grid does not match the projector grid");
    Sinogram out(geometry_);
    std::vector<int> all(static_cast<std::size_t>(n_views()));
    for (int v = 0; v < n_views(); ++v) all[v] = v;
    project_views(image.values, all, out.values);
    return out;
  }

  Image backproject(const Sinogram& sinogram) const {
    require(sinogram.values.size() == geometry_.n_rays(), "backproject: sinogram does not match geometry");
    Image out(grid_);
    std::vector<int> all(static_cast<std::size_t>(n_views()));
    for (int v = 0; v < n_views(); ++v) all[v] = v;
    backproject_views(sinogram.values, all, out.values);
    return out;
  }

  /// Sub-operator forward projection: out[k * n_det + d] for the k-th listed view.
  void project_views(std::span<const double> x, std::span<const int> views, std::span<double> out) const {
    require(x.size() == grid_.size(), "project_views: image size mismatch");
    require(out.size() == views.size() * std::size_t(geometry_.n_det), "project_views: output size mismatch");
    for (std::size_t k = 0; k < views.size(); ++k) {
      for (int d = 0; d < geometry_.n_det; ++d) {
        double acc = 0.0;
        trace(views[k], d, [&](std::size_t p, double w) { acc += w * x[p]; });
        out[k * geometry_.n_det + d] = acc;
      }
    }
  }

  /// Sub-operator backprojection, accumulated into x.
  void backproject_views(std::span<const double> r, std::span<const int> views, std::span<double> x) const {
    require(x.size() == grid_.size(), "backproject_views: image size mismatch");
    require(r.size() == views.size() * std::size_t(geometry_.n_det), "backproject_views: input size mismatch");
    for (std::size_t k = 0; k < views.size(); ++k) {
      for (int d = 0; d < geometry_.n_det; ++d) {
        const double value = r[k * geometry_.n_det + d];
        if (value == 0.0) continue;
        trace(views[k], d, [&](std::size_t p, double w) { x[p] += w * value; });
      }
    }
  }

  /// Row sums (per listed ray) and column sums of the sub-operator restricted to views.
  RowColSums row_col_sums(std::span<const int> views) const {
    RowColSums sums;
    sums.row.assign(views.size() * std::size_t(geometry_.n_det), 0.0);
    sums.col.assign(grid_.size(), 0.0);
    for (std::size_t k = 0; k < views.size(); ++k) {
      for (int d = 0; d < geometry_.n_det; ++d) {
        double& row = sums.row[k * geometry_.n_det + d];
        trace(views[k], d, [&](std::size_t p, double w) {
          row += w;
          sums.col[p] += w;
        });
      }
    }
    return sums;
  }

  RowColSums row_col_sums() const {
    std::vector<int> all(static_cast<std::size_t>(n_views()));
    for (int v = 0; v < n_views(); ++v) all[v] = v;
    return row_col_sums(all);
  }

 private:
  static constexpr double kMaxCachedEntries = 8e6;

  void build_matrix() {
    std::vector<std::size_t> row_ptr{0};
    row_ptr.reserve(rays_.size() + 1);
    for (const Ray& ray : rays_) {
      trace_ray(grid_, ray, [&](std::size_t p, double w) {
        cols_.push_back(std::uint32_t(p));
        weights_.push_back(w);
      });
      row_ptr.push_back(cols_.size());
    }
    row_ptr_ = std::move(row_ptr);
  }

  ScanGeometry geometry_;
  ImageGrid grid_;
  std::vector<Ray> rays_;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::uint32_t> cols_;
  std::vector<double> weights_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "dot: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

}  // namespace cdpir

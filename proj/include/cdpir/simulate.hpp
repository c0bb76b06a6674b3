#pragma once

// Synthetic multi-domain phantoms, measurement simulation and dataset assembly.
//
// Domains share a body outline and differ in structure vocabulary, texture and
// edge sharpness:
//   0  piecewise-constant ellipses with smooth edges
//   1  ellipses with sharp edges and fine band-limited texture
//   2  mixed ellipses and rectangles, intermediate texture (held out)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cdpir/errors.hpp"
#include "cdpir/geometry.hpp"
#include "cdpir/json_io.hpp"
#include "cdpir/parallel.hpp"
#include "cdpir/random.hpp"
#include "cdpir/tensor_io.hpp"

namespace cdpir {

struct DomainSpec {
  int domain_id = 0;
  int min_structures = 3;
  int max_structures = 6;
  std::vector<double> palette{0.45, 0.6, 0.75, 0.9, 0.1};
  double body_intensity_lo = 0.25;
  double body_intensity_hi = 0.35;
  double texture_amplitude = 0.0;
  double texture_correlation = 1.5;  // px, Gaussian smoothing sigma of the texture field
  double edge_width = 1.5;           // px
  double rectangle_fraction = 0.0;   // share of structures drawn as rotated rectangles

  void validate() const {
    require(domain_id >= 0, "DomainSpec: domain_id must be >= 0");
    require(min_structures >= 1 && max_structures >= min_structures, "DomainSpec: invalid structure count range");
    require(!palette.empty(), "DomainSpec: palette must not be empty");
    require(texture_amplitude >= 0.0 && texture_correlation > 0.0 && edge_width >= 0.0,
            "DomainSpec: amplitudes and widths must be non-negative");
  }

  static DomainSpec preset(int id) {
    DomainSpec d;
    d.domain_id = id;
    switch (id) {
      case 0:
        break;
      case 1:
        d.min_structures = 4;
        d.max_structures = 8;
        d.palette = {0.35, 0.55, 0.7, 0.95, 0.05};
        d.texture_amplitude = 0.06;
        d.texture_correlation = 1.0;
        d.edge_width = 0.0;
        break;
      case 2:
        d.min_structures = 3;
        d.max_structures = 7;
        d.palette = {0.4, 0.5, 0.65, 0.85, 0.15};
        d.texture_amplitude = 0.03;
        d.texture_correlation = 2.0;
        d.edge_width = 0.7;
        d.rectangle_fraction = 0.5;
        break;
      default:
        throw std::invalid_argument("DomainSpec: no preset for domain " + std::to_string(id));
    }
    return d;
  }
};

namespace detail {

// Soft inside-indicator from an approximate signed distance in pixels.
inline double membership(double signed_dist_px, double edge_width) {
  if (edge_width < 1e-6) return signed_dist_px <= 0.0 ? 1.0 : 0.0;
  return 0.5 * std::erfc(signed_dist_px / edge_width);
}

struct Shape {
  double cx, cy;   // px
  double a, b;     // half-axes, px
  double angle;
  bool rectangle;
  double value;

  double signed_distance(double px, double py) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = c * (px - cx) + s * (py - cy);
    const double v = -s * (px - cx) + c * (py - cy);
    if (rectangle) {
      const double qx = std::abs(u) - a, qy = std::abs(v) - b;
      return std::hypot(std::max(qx, 0.0), std::max(qy, 0.0)) + std::min(std::max(qx, qy), 0.0);
    }
    const double r = std::hypot(u / a, v / b);
    if (r < 1e-12) return -std::min(a, b);
    const double grad = std::hypot(u / (a * a), v / (b * b)) / r;
    return (r - 1.0) / grad;
  }
};

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(std::size_t(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  return k;
}

// Zero-mean, unit-variance band-limited field: smoothed white noise.
inline std::vector<double> texture_field(int nx, int ny, double correlation, Engine& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> white(std::size_t(nx) * ny);
  for (double& v : white) v = normal(rng);
  const auto k = gaussian_kernel(correlation);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(white.size(), 0.0), out(white.size(), 0.0);
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * white[std::size_t(y) * nx + std::clamp(x + i, 0, nx - 1)];
      tmp[std::size_t(y) * nx + x] = acc;
    }
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp[std::size_t(std::clamp(y + i, 0, ny - 1)) * nx + x];
      out[std::size_t(y) * nx + x] = acc;
    }
  double mean = 0.0, var = 0.0;
  for (double v : out) mean += v;
  mean /= double(out.size());
  for (double v : out) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / double(out.size()));
  for (double& v : out) v = sd > 0.0 ? (v - mean) / sd : 0.0;
  return out;
}

}  // namespace detail

/// Deterministic phantom with values in [0, 1]. Shapes are laid out in
/// grid-relative units; edge widths and texture scales are in pixels.
inline Image gen_phantom(std::uint64_t seed, const DomainSpec& domain, const ImageGrid& grid) {
  domain.validate();
  grid.validate();
  Engine rng = make_engine(seed, 0xD0 + std::uint64_t(domain.domain_id));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const double hx = 0.5 * grid.nx, hy = 0.5 * grid.ny;
  std::vector<detail::Shape> shapes;
  // Body outline.
  const double ba = hx * uniform(0.78, 0.9), bb = hy * uniform(0.62, 0.8);
  detail::Shape body{hx + hx * uniform(-0.03, 0.03), hy + hy * uniform(-0.03, 0.03), ba, bb,
                     uniform(-0.15, 0.15), false, uniform(domain.body_intensity_lo, domain.body_intensity_hi)};
  shapes.push_back(body);

  const int count = domain.min_structures +
                    static_cast<int>(unit(rng) * (domain.max_structures - domain.min_structures + 1) * (1.0 - 1e-12));
  for (int i = 0; i < count; ++i) {
    const double rho = std::sqrt(unit(rng)) * 0.55, phi = uniform(0.0, 2.0 * std::numbers::pi);
    detail::Shape s;
    s.cx = body.cx + rho * ba * std::cos(phi);
    s.cy = body.cy + rho * bb * std::sin(phi);
    s.a = hx * uniform(0.05, 0.28);
    s.b = hy * uniform(0.05, 0.28);
    s.angle = uniform(0.0, std::numbers::pi);
    s.rectangle = unit(rng) < domain.rectangle_fraction;
    s.value = domain.palette[static_cast<std::size_t>(unit(rng) * domain.palette.size()) % domain.palette.size()];
    // Keep structures inside the body outline.
    const double extent = std::max(s.a, s.b) * (s.rectangle ? std::numbers::sqrt2 : 1.0);
    const double limit = 0.92 * std::min(ba, bb) - rho * std::max(ba, bb);
    if (extent > limit) {
      const double scale = std::max(limit, 1.0) / extent;
      s.a = std::max(1.0, s.a * scale);
      s.b = std::max(1.0, s.b * scale);
    }
    shapes.push_back(s);
  }

  Image img(grid, 0.0);
  std::vector<double> body_mask(grid.size(), 0.0);
  for (int iy = 0; iy < grid.ny; ++iy)
    for (int ix = 0; ix < grid.nx; ++ix) {
      const double px = ix + 0.5, py = iy + 0.5;
      double v = 0.0;
      for (std::size_t k = 0; k < shapes.size(); ++k) {
        const double m = detail::membership(shapes[k].signed_distance(px, py), domain.edge_width);
        if (k == 0) body_mask[std::size_t(iy) * grid.nx + ix] = m;
        v = v * (1.0 - m) + shapes[k].value * m;
      }
      img.at(ix, iy) = v;
    }

  if (domain.texture_amplitude > 0.0) {
    const auto tex = detail::texture_field(grid.nx, grid.ny, domain.texture_correlation, rng);
    for (std::size_t p = 0; p < img.values.size(); ++p)
      img.values[p] += domain.texture_amplitude * tex[p] * body_mask[p];
  }
  for (double& v : img.values) v = std::clamp(v, 0.0, 1.0);
  return img;
}

enum class NoiseKind { None, Poisson, Gaussian, PoissonGaussian };

inline std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::None: return "none";
    case NoiseKind::Poisson: return "poisson";
    case NoiseKind::Gaussian: return "gaussian";
    case NoiseKind::PoissonGaussian: return "poisson_gaussian";
  }
  return "unknown";
}

inline NoiseKind noise_kind_from_string(const std::string& s) {
  if (s == "none") return NoiseKind::None;
  if (s == "poisson") return NoiseKind::Poisson;
  if (s == "gaussian") return NoiseKind::Gaussian;
  if (s == "poisson_gaussian") return NoiseKind::PoissonGaussian;
  throw UsageError("unknown noise kind '" + s + "'");
}

/// Measurement noise. Counts follow Poisson(I0 * exp(-unit_attenuation * y));
/// unit_attenuation converts phantom units to 1/mm so that line integrals of
/// a [0, 1] phantom stay within a physical transmission range.
struct NoiseModel {
  NoiseKind kind = NoiseKind::None;
  double i0 = 1e5;
  double sigma_e = 0.0;  // post-log, in sinogram units
  double unit_attenuation = 0.02;

  bool poisson() const { return kind == NoiseKind::Poisson || kind == NoiseKind::PoissonGaussian; }
  bool gaussian() const { return kind == NoiseKind::Gaussian || kind == NoiseKind::PoissonGaussian; }

  void validate() const {
    if (poisson()) require(i0 > 0.0 && unit_attenuation > 0.0, "NoiseModel: I0 and unit_attenuation must be > 0");
    require(sigma_e >= 0.0, "NoiseModel: sigma_e must be >= 0");
  }
};

inline Json to_json(const NoiseModel& n) {
  return Json{{"kind", to_string(n.kind)}, {"i0", n.i0}, {"sigma_e", n.sigma_e}, {"unit_attenuation", n.unit_attenuation}};
}

inline NoiseModel noise_from_json(const Json& j) {
  check_keys(j, {"kind", "i0", "sigma_e", "unit_attenuation"}, "noise");
  NoiseModel n;
  if (j.contains("kind")) n.kind = noise_kind_from_string(j.at("kind").get<std::string>());
  read_opt(j, "i0", n.i0);
  read_opt(j, "sigma_e", n.sigma_e);
  read_opt(j, "unit_attenuation", n.unit_attenuation);
  n.validate();
  return n;
}

/// Adds measurement noise to clean line integrals (deterministic given seed).
inline Sinogram add_noise(Sinogram clean, const NoiseModel& noise, std::uint64_t seed) {
  noise.validate();
  if (noise.kind == NoiseKind::None) return clean;
  Engine rng = make_engine(seed, 0x4E01);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& y : clean.values) {
    if (noise.poisson()) {
      const double mean = noise.i0 * std::exp(-noise.unit_attenuation * y);
      std::poisson_distribution<long long> poisson(mean);
      const double counts = static_cast<double>(std::max<long long>(1, poisson(rng)));
      y = -std::log(counts / noise.i0) / noise.unit_attenuation;
    }
    if (noise.gaussian()) y += noise.sigma_e * normal(rng);
  }
  return clean;
}

inline Sinogram simulate_sinogram(const Image& image, const Projector& projector, const NoiseModel& noise,
                                  std::uint64_t seed) {
  return add_noise(projector.project(image), noise, seed);
}

struct DatasetEntry {
  std::string phantom;   // relative to the manifest directory
  std::string sinogram;  // relative to the manifest directory
  int domain_id = 0;
  std::uint64_t seed = 0;
  std::string split;  // "train" | "test"

  bool operator==(const DatasetEntry&) const = default;
};

struct DatasetManifest {
  ImageGrid grid;
  ScanGeometry geometry;  // geometry of the stored (sparse-view) sinograms
  NoiseModel noise;
  std::vector<DatasetEntry> entries;

  std::vector<DatasetEntry> split(const std::string& which) const {
    std::vector<DatasetEntry> out;
    for (const auto& e : entries)
      if (e.split == which) out.push_back(e);
    return out;
  }
};

inline Json to_json(const DatasetManifest& m) {
  Json entries = Json::array();
  std::size_t n_train = 0, n_test = 0;
  for (const auto& e : m.entries) {
    entries.push_back(Json{{"phantom", e.phantom}, {"sinogram", e.sinogram}, {"domain_id", e.domain_id},
                           {"seed", e.seed}, {"split", e.split}});
    (e.split == "train" ? n_train : n_test)++;
  }
  return Json{{"format", "cdpir-dataset"},
              {"grid", to_json(m.grid)},
              {"geometry", to_json(m.geometry)},
              {"noise", to_json(m.noise)},
              {"split", Json{{"train", n_train}, {"test", n_test}}},
              {"entries", entries}};
}

inline DatasetManifest manifest_from_json(const Json& j) {
  check_keys(j, {"format", "grid", "geometry", "noise", "split", "entries"}, "manifest");
  if (j.value("format", std::string()) != "cdpir-dataset") throw DataError("manifest: missing or wrong format tag");
  DatasetManifest m;
  m.grid = grid_from_json(j.at("grid"));
  m.geometry = scan_geometry_from_json(j.at("geometry"));
  m.noise = noise_from_json(j.at("noise"));
  for (const auto& e : j.at("entries")) {
    check_keys(e, {"phantom", "sinogram", "domain_id", "seed", "split"}, "manifest entry");
    m.entries.push_back(DatasetEntry{e.at("phantom").get<std::string>(), e.at("sinogram").get<std::string>(),
                                     e.at("domain_id").get<int>(), e.at("seed").get<std::uint64_t>(),
                                     e.at("split").get<std::string>()});
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  detail::write_file(path, to_json(m).dump(2) + "\n");
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  try {
    return manifest_from_json(Json::parse(detail::read_file(path)));
  } catch (const Json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

struct DatasetConfig {
  ImageGrid grid;
  ScanGeometry geometry;  // acquisition geometry of the written sinograms
  NoiseModel noise;
  std::vector<int> domains{0, 1};
  int n_train = 200;  // per domain
  int n_test = 10;    // per domain
  std::optional<int> ood_domain;
  int n_test_ood = 10;
  std::uint64_t seed = 1;
  bool write_sinograms = true;
};

/// Writes phantom/sinogram pairs and manifest.json under out_dir. The result is
/// a pure function of the config: entry seeds are config.seed + running index.
inline DatasetManifest build_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir) {
  config.noise.validate();
  DatasetManifest manifest{config.grid, config.geometry, config.noise, {}};
  std::uint64_t counter = 0;
  auto add = [&](const std::string& split, int domain, int index) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_d%d_%04d.ten", split.c_str(), domain, index);
    manifest.entries.push_back(DatasetEntry{std::string("phantoms/") + name,
                                            config.write_sinograms ? std::string("sinograms/") + name : "",
                                            domain, config.seed + counter++, split});
  };
  for (int d : config.domains) {
    require(!config.ood_domain || d != *config.ood_domain, "build_dataset: OOD domain must not be a training domain");
    for (int i = 0; i < config.n_train; ++i) add("train", d, i);
  }
  for (int d : config.domains)
    for (int i = 0; i < config.n_test; ++i) add("test", d, i);
  if (config.ood_domain)
    for (int i = 0; i < config.n_test_ood; ++i) add("test", *config.ood_domain, i);

  std::optional<Projector> projector;
  if (config.write_sinograms) projector.emplace(config.geometry, config.grid);
  std::filesystem::create_directories(out_dir / "phantoms");
  if (config.write_sinograms) std::filesystem::create_directories(out_dir / "sinograms");

  parallel_for(static_cast<int>(manifest.entries.size()), [&](int i) {
    const auto& e = manifest.entries[i];
    const Image phantom = gen_phantom(e.seed, DomainSpec::preset(e.domain_id), config.grid);
    write_tensor(out_dir / e.phantom, to_tensor(phantom));
    if (projector) {
      const Sinogram sino = simulate_sinogram(phantom, *projector, config.noise, mix_seed(e.seed, 0x51));
      write_tensor(out_dir / e.sinogram, to_tensor(sino));
    }
  });
  write_manifest(out_dir / "manifest.json", manifest);
  return manifest;
}

}  // namespace cdpir

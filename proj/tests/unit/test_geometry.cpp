#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "cdpir/geometry.hpp"
#include "cdpir/random.hpp"

using namespace cdpir;

namespace {

constexpr double kPi = std::numbers::pi;

ScanGeometry make_geometry(DetectorKind kind, int n_views, int n_det, double spacing) {
  ScanGeometry g;
  g.kind = kind;
  g.n_det = n_det;
  g.det_spacing = spacing;
  g.angles = uniform_angles(n_views);
  return g;
}

// Length of the line o + s d (s in [lo, hi]) inside the box [x0,x1]x[y0,y1].
double clip_length(const Ray& r, double x0, double x1, double y0, double y1) {
  double lo = r.half_line ? 0.0 : -1e30, hi = 1e30;
  auto slab = [&](double o, double d, double a, double b) {
    if (d == 0.0) {
      if (o < a || o > b) hi = lo - 1;
      return;
    }
    double s0 = (a - o) / d, s1 = (b - o) / d;
    if (s0 > s1) std::swap(s0, s1);
    lo = std::max(lo, s0);
    hi = std::min(hi, s1);
  };
  slab(r.ox, r.dx, x0, x1);
  slab(r.oy, r.dy, y0, y1);
  const double norm = std::hypot(r.dx, r.dy);
  return hi > lo ? (hi - lo) * norm : 0.0;
}

// Per-pixel intersection lengths by clipping the ray against every pixel box.
std::vector<double> brute_force_row(const ImageGrid& grid, const Ray& r) {
  std::vector<double> w(grid.size(), 0.0);
  for (int iy = 0; iy < grid.ny; ++iy)
    for (int ix = 0; ix < grid.nx; ++ix) {
      const double x0 = grid.x_min() + ix * grid.pixel_size, y0 = grid.y_min() + iy * grid.pixel_size;
      w[std::size_t(iy) * grid.nx + ix] = clip_length(r, x0, x0 + grid.pixel_size, y0, y0 + grid.pixel_size);
    }
  return w;
}

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  Engine rng = make_engine(seed, 3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST(UniformAngles, FourViews) {
  const auto a = uniform_angles(4);
  ASSERT_EQ(a.size(), 4u);
  EXPECT_DOUBLE_EQ(a[1], kPi / 2);
  EXPECT_DOUBLE_EQ(a[2], kPi);
  EXPECT_DOUBLE_EQ(a[3], 3 * kPi / 2);
}

TEST(UniformAngles, SingleViewAndSpacing) {
  EXPECT_EQ(uniform_angles(1), std::vector<double>{0.0});
  const auto a = uniform_angles(984);
  EXPECT_NEAR(a[1] - a[0], 2 * kPi / 984, 1e-15);
  EXPECT_THROW(uniform_angles(0), std::invalid_argument);
}

TEST(SubsampleViews, IndexFormula) {
  EXPECT_EQ(subsample_indices(8, 2), (std::vector<int>{0, 4}));
  const auto idx = subsample_indices(984, 55);
  EXPECT_EQ(idx.size(), 55u);
  EXPECT_EQ(idx[0], 0);
  for (int i = 0; i < 55; ++i) EXPECT_EQ(idx[i], (i * 984) / 55);
  EXPECT_THROW(subsample_indices(8, 0), std::invalid_argument);
  EXPECT_THROW(subsample_indices(8, 9), std::invalid_argument);
}

TEST(SubsampleViews, IdentityWhenKeepingAll) {
  const auto g = make_geometry(DetectorKind::FanFlat, 246, 256, 0.936);
  EXPECT_EQ(subsample_views(g, 246), g);
}

TEST(PartitionSubsets, Interleaved) {
  const auto s = partition_subsets(6, 2);
  EXPECT_EQ(s.subsets[0], (std::vector<int>{0, 2, 4}));
  EXPECT_EQ(s.subsets[1], (std::vector<int>{1, 3, 5}));
  EXPECT_EQ(partition_subsets(7, 1).subsets[0].size(), 7u);
  for (const auto& sub : partition_subsets(55, 5).subsets) EXPECT_EQ(sub.size(), 11u);
  EXPECT_THROW(partition_subsets(5, 6), std::invalid_argument);
  EXPECT_THROW(partition_subsets(5, 0), std::invalid_argument);
}

TEST(PartitionSubsets, CoverAllViewsOnceWithBalancedSizes) {
  for (int n : {1, 7, 55, 246})
    for (int k = 1; k <= std::min(n, 9); ++k) {
      const auto s = partition_subsets(n, k);
      std::multiset<int> seen;
      std::size_t lo = n, hi = 0;
      for (int j = 0; j < k; ++j) {
        for (int v : s.subsets[j]) {
          seen.insert(v);
          EXPECT_EQ(v % k, j);
        }
        lo = std::min(lo, s.subsets[j].size());
        hi = std::max(hi, s.subsets[j].size());
      }
      EXPECT_EQ(int(seen.size()), n);
      for (int v = 0; v < n; ++v) EXPECT_EQ(seen.count(v), 1u);
      EXPECT_LE(hi - lo, 1u);
    }
}

TEST(Projector, RejectsGridOutsideFieldOfView) {
  const auto g = make_geometry(DetectorKind::FanFlat, 8, 16, 0.5);
  EXPECT_THROW(Projector(g, ImageGrid{128, 128, 0.6875}), std::invalid_argument);
}

TEST(Projector, RejectsSourceInsideGrid) {
  auto g = make_geometry(DetectorKind::FanFlat, 8, 256, 0.936);
  g.sid = 10.0;
  g.sdd = 20.0;
  EXPECT_THROW(Projector(g, ImageGrid{128, 128, 0.6875}), std::invalid_argument);
}

TEST(Projector, ZeroImageAndZeroSinogram) {
  const Projector a(make_geometry(DetectorKind::FanFlat, 10, 64, 3.0), ImageGrid{32, 32, 2.0});
  for (double v : a.project(Image(a.grid())).values) EXPECT_EQ(v, 0.0);
  for (double v : a.backproject(Sinogram(a.geometry())).values) EXPECT_EQ(v, 0.0);
}

TEST(Projector, SinglePixelFullCrossingEqualsPixelSize) {
  // Parallel ray at angle 0 travels along -x at height u.
  const ImageGrid grid{5, 5, 1.3};
  auto g = make_geometry(DetectorKind::Parallel, 1, 9, 1.3);
  const Projector a(g, grid);
  Image img(grid);
  img.at(1, 2) = 1.0;
  const auto sino = a.project(img);
  EXPECT_NEAR(sino.at(0, 4), 1.3, 1e-12);
  EXPECT_EQ(sino.at(0, 3), 0.0);
  EXPECT_EQ(sino.at(0, 5), 0.0);
}

TEST(Projector, TraversalMatchesPerPixelClipping) {
  const ImageGrid grid{9, 7, 1.1};
  for (auto kind : {DetectorKind::FanFlat, DetectorKind::FanCurved, DetectorKind::Parallel}) {
    const double spacing = kind == DetectorKind::Parallel ? 0.6 : 1.2;
    const Projector a(make_geometry(kind, 13, 24, spacing), grid);
    for (int v = 0; v < a.n_views(); v += 3)
      for (int d = 0; d < a.n_det(); d += 5) {
        std::vector<double> traced(grid.size(), 0.0);
        a.trace(v, d, [&](std::size_t p, double w) { traced[p] += w; });
        const auto expected = brute_force_row(grid, ray_for(a.geometry(), v, d));
        for (std::size_t p = 0; p < grid.size(); ++p) EXPECT_NEAR(traced[p], expected[p], 1e-9);
      }
  }
}

TEST(Projector, OneHotBackprojectionIsTheRay) {
  const ImageGrid grid{16, 16, 1.0};
  const Projector a(make_geometry(DetectorKind::FanFlat, 6, 48, 1.0), grid);
  Sinogram s(a.geometry());
  s.at(2, 17) = 1.0;
  const auto img = a.backproject(s);
  const auto expected = brute_force_row(grid, ray_for(a.geometry(), 2, 17));
  for (std::size_t p = 0; p < grid.size(); ++p) EXPECT_NEAR(img.values[p], expected[p], 1e-9);
}

TEST(Projector, DiskChordThroughCenter) {
  // Fine pixelation of a unit disk of radius 20 mm; the central parallel ray has chord 2r.
  const double r = 20.0, h = 0.1;
  const int n = 500;
  const ImageGrid grid{n, n, h};
  Image disk(grid);
  for (int iy = 0; iy < n; ++iy)
    for (int ix = 0; ix < n; ++ix) {
      const double x = grid.x_min() + (ix + 0.5) * h, y = grid.y_min() + (iy + 0.5) * h;
      disk.at(ix, iy) = std::hypot(x, y) <= r ? 1.0 : 0.0;
    }
  ScanGeometry g = make_geometry(DetectorKind::Parallel, 1, 71, 1.0);
  const Projector a(g, grid);
  const auto sino = a.project(disk);
  EXPECT_NEAR(sino.at(0, 35), 2 * r, 0.01 * 2 * r);
}

TEST(Projector, RowAndColumnSumsMatchDefinitions) {
  const ImageGrid grid{20, 20, 1.0};
  const Projector a(make_geometry(DetectorKind::FanCurved, 9, 64, 1.0), grid);
  const auto sums = a.row_col_sums();
  const auto ones = a.project(Image(grid, 1.0));
  const auto back = a.backproject(Sinogram(a.geometry(), 1.0));
  for (std::size_t i = 0; i < ones.values.size(); ++i) EXPECT_NEAR(sums.row[i], ones.values[i], 1e-10);
  for (std::size_t p = 0; p < back.values.size(); ++p) EXPECT_NEAR(sums.col[p], back.values[p], 1e-10);
}

TEST(Projector, CentralRayRowSumIsGridExtent) {
  const ImageGrid grid{32, 32, 1.5};
  const Projector a(make_geometry(DetectorKind::FanFlat, 4, 65, 2.0), grid);
  const auto sums = a.row_col_sums();
  // Cell 32 of 65 is the central cell: the ray passes through the isocenter along a grid axis.
  EXPECT_NEAR(sums.row[32], 32 * 1.5, 1e-9);
}

TEST(Projector, Linearity) {
  const ImageGrid grid{24, 24, 1.0};
  const Projector a(make_geometry(DetectorKind::FanFlat, 11, 64, 1.2), grid);
  const auto x1 = random_vector(grid.size(), 1), x2 = random_vector(grid.size(), 2);
  std::vector<double> mix(grid.size());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 2.5 * x1[i] - 0.75 * x2[i];
  const auto p1 = a.project(Image(grid, x1)), p2 = a.project(Image(grid, x2)), pm = a.project(Image(grid, mix));
  for (std::size_t i = 0; i < pm.values.size(); ++i) {
    const double expected = 2.5 * p1.values[i] - 0.75 * p2.values[i];
    EXPECT_NEAR(pm.values[i], expected, 1e-10 * std::max(1.0, std::abs(expected)));
  }
}

TEST(Projector, AdjointAllGeometries) {
  const ImageGrid grid{40, 40, 1.0};
  for (auto kind : {DetectorKind::FanFlat, DetectorKind::FanCurved, DetectorKind::Parallel}) {
    const double spacing = kind == DetectorKind::Parallel ? 0.8 : 1.4;
    const Projector a(make_geometry(kind, 23, 80, spacing), grid);
    for (int trial = 0; trial < 20; ++trial) {
      const Image x(grid, random_vector(grid.size(), 100 + trial));
      const Sinogram y(a.geometry(), random_vector(a.geometry().n_rays(), 200 + trial));
      const auto ax = a.project(x);
      const auto aty = a.backproject(y);
      const double lhs = dot(ax.values, y.values), rhs = dot(x.values, aty.values);
      const double scale = std::sqrt(squared_norm(ax.values) * squared_norm(y.values));
      EXPECT_LE(std::abs(lhs - rhs) / scale, 1e-6) << to_string(kind);
    }
  }
}

TEST(Projector, CachedAndTracedOperatorsAgree) {
  const ImageGrid grid{128, 128, 0.6875};
  ScanGeometry g = make_geometry(DetectorKind::FanFlat, 246, 256, 0.936);
  const Projector full(g, grid);
  const Projector sparse(subsample_views(g, 55), grid);
  EXPECT_FALSE(full.cached());
  EXPECT_TRUE(sparse.cached());
  const Image x(grid, random_vector(grid.size(), 5));
  const auto a = full.project(x);
  const auto b = sparse.project(x);
  const auto idx = subsample_indices(246, 55);
  for (int k = 0; k < 55; ++k)
    for (int d = 0; d < 256; ++d) EXPECT_DOUBLE_EQ(b.at(k, d), a.at(idx[k], d));
}

TEST(Projector, ParallelRotationConsistencyForRadialObject) {
  const ImageGrid grid{128, 128, 0.5};
  Image blob(grid);
  for (int iy = 0; iy < grid.ny; ++iy)
    for (int ix = 0; ix < grid.nx; ++ix) {
      const double x = grid.x_min() + (ix + 0.5) * grid.pixel_size;
      const double y = grid.y_min() + (iy + 0.5) * grid.pixel_size;
      blob.at(ix, iy) = std::exp(-(x * x + y * y) / (2 * 5.0 * 5.0));
    }
  const Projector a(make_geometry(DetectorKind::Parallel, 16, 200, 0.5), grid);
  const auto sino = a.project(blob);
  double peak = 0.0;
  for (double v : sino.values) peak = std::max(peak, v);
  for (int v = 1; v < a.n_views(); ++v)
    for (int d = 0; d < a.n_det(); ++d) EXPECT_NEAR(sino.at(v, d), sino.at(0, d), 1e-3 * peak);
}

TEST(Projector, GridMismatchThrows) {
  const Projector a(make_geometry(DetectorKind::FanFlat, 4, 64, 3.0), ImageGrid{32, 32, 2.0});
  EXPECT_THROW(a.project(Image(ImageGrid{16, 16, 2.0})), std::invalid_argument);
  EXPECT_THROW(a.backproject(Sinogram(make_geometry(DetectorKind::FanFlat, 3, 64, 3.0))), std::invalid_argument);
}

TEST(ScanGeometry, Validation) {
  auto g = make_geometry(DetectorKind::FanFlat, 4, 64, 1.0);
  g.sdd = g.sid;
  EXPECT_THROW(g.validate(), std::invalid_argument);
  g = make_geometry(DetectorKind::FanFlat, 4, 64, 1.0);
  g.angles = {0.0, 1.0, 0.5};
  EXPECT_THROW(g.validate(), std::invalid_argument);
  g.angles = {};
  EXPECT_THROW(g.validate(), std::invalid_argument);
  g = make_geometry(DetectorKind::FanFlat, 4, 0, 1.0);
  EXPECT_THROW(g.validate(), std::invalid_argument);
}

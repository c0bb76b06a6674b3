#pragma once

// SART / OS-SART, smoothed isotropic TV, and ASD-POCS with the adaptive
// convex fusion of the SART and TV images (iTV).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdpir/errors.hpp"
#include "cdpir/geometry.hpp"
#include "cdpir/json_io.hpp"

namespace cdpir {

struct AsdPocsConfig {
  int P = 10;
  int Q = 1;
  int K = 5;
  double w = 0.8;
  double tv_eps = 1e-6;
  double tv_step_scale = 0.2;
  int init_iters = 30;
  bool nonneg = true;
  std::optional<double> delta_n;

  void validate(int n_views) const {
    require(P >= 0, "AsdPocsConfig: P must be >= 0");
    require(Q >= 0, "AsdPocsConfig: Q must be >= 0");
    require(K >= 1 && K <= n_views, "AsdPocsConfig: K must lie in [1, n_views]");
    require(w > 0.0 && w < 1.0, "AsdPocsConfig: w must lie in (0, 1)");
    require(tv_eps > 0.0 && tv_step_scale >= 0.0 && init_iters >= 0, "AsdPocsConfig: invalid TV or init settings");
  }

  AsdPocsConfig with_iterations(int p) const {
    AsdPocsConfig c = *this;
    c.P = p;
    return c;
  }
};

inline Json to_json(const AsdPocsConfig& c) {
  Json j{{"P", c.P},   {"Q", c.Q}, {"K", c.K}, {"w", c.w}, {"tv_eps", c.tv_eps}, {"tv_step_scale", c.tv_step_scale},
         {"init_iters", c.init_iters}, {"nonneg", c.nonneg}};
  j["delta_n"] = c.delta_n ? Json(*c.delta_n) : Json(nullptr);
  return j;
}

inline AsdPocsConfig asd_pocs_config_from_json(const Json& j, AsdPocsConfig c = {}) {
  check_keys(j, {"P", "Q", "K", "w", "tv_eps", "tv_step_scale", "init_iters", "nonneg", "delta_n"}, "asd_pocs");
  read_opt(j, "P", c.P);
  read_opt(j, "Q", c.Q);
  read_opt(j, "K", c.K);
  read_opt(j, "w", c.w);
  read_opt(j, "tv_eps", c.tv_eps);
  read_opt(j, "tv_step_scale", c.tv_step_scale);
  read_opt(j, "init_iters", c.init_iters);
  read_opt(j, "nonneg", c.nonneg);
  if (auto it = j.find("delta_n"); it != j.end()) {
    if (it->is_null())
      c.delta_n.reset();
    else
      c.delta_n = it->get<double>();
  }
  return c;
}

struct ItvState {
  double lambda_tv = 1.0;
  double eps_prev = 0.0;
  double eps_sart = 0.0;
};

/// Precomputed per-subset row and column sums of the sub-operators.
class SartSystem {
 public:
  SartSystem(const Projector& projector, ViewSubsets subsets) : projector_(&projector), subsets_(std::move(subsets)) {
    for (const auto& views : subsets_.subsets) {
      require(!views.empty(), "SartSystem: empty subset");
      for (int v : views) require(v >= 0 && v < projector.n_views(), "SartSystem: view index out of range");
      sums_.push_back(projector.row_col_sums(views));
      const auto& c = sums_.back().col;
      if (std::all_of(c.begin(), c.end(), [](double v) { return v == 0.0; }))
        throw NumericalError("SartSystem: subset operator is identically zero");
    }
  }
  SartSystem(const Projector& projector, int k) : SartSystem(projector, partition_subsets(projector.n_views(), k)) {}

  const Projector& projector() const { return *projector_; }
  const ViewSubsets& subsets() const { return subsets_; }
  int count() const { return int(subsets_.subsets.size()); }
  const RowColSums& sums(int subset) const { return sums_[std::size_t(subset)]; }

 private:
  const Projector* projector_;
  ViewSubsets subsets_;
  std::vector<RowColSums> sums_;
};

/// x <- x + C^-1 A_s^T R^-1 (y_s - A_s x) for one subset, with relaxation 1
/// and zero row/column sums masked.
inline void sart_sweep(std::vector<double>& x, std::span<const double> y, const SartSystem& system, int subset,
                       bool nonneg = false) {
  const Projector& a = system.projector();
  require(subset >= 0 && subset < system.count(), "sart_sweep: subset index out of range");
  require(y.size() == a.geometry().n_rays(), "sart_sweep: sinogram does not match geometry");
  const auto& views = system.subsets().subsets[std::size_t(subset)];
  const auto& sums = system.sums(subset);
  const int n_det = a.n_det();
  std::vector<double> r(views.size() * std::size_t(n_det));
  a.project_views(x, views, r);
  for (std::size_t k = 0; k < views.size(); ++k)
    for (int d = 0; d < n_det; ++d) {
      const std::size_t i = k * n_det + d;
      const double row = sums.row[i];
      r[i] = row > 0.0 ? (y[std::size_t(views[k]) * n_det + d] - r[i]) / row : 0.0;
    }
  std::vector<double> update(x.size(), 0.0);
  a.backproject_views(r, views, update);
  for (std::size_t p = 0; p < x.size(); ++p) {
    if (sums.col[p] > 0.0) x[p] += update[p] / sums.col[p];
    if (nonneg && x[p] < 0.0) x[p] = 0.0;
  }
}

/// One ordered-subset pass over subsets 0..K-1.
inline std::vector<double> os_sart_pass(std::vector<double> x, std::span<const double> y, const SartSystem& system,
                                        bool nonneg = false) {
  for (int s = 0; s < system.count(); ++s) sart_sweep(x, y, system, s, nonneg);
  return x;
}

/// Plain OS-SART for `passes` passes from x_init.
inline Image os_sart(const Sinogram& y, const Projector& projector, int k, int passes, const Image& x_init,
                     bool nonneg = true) {
  require(passes >= 0, "os_sart: passes must be >= 0");
  require(x_init.grid == projector.grid(), "os_sart: initial image does not match the grid");
  const SartSystem system(projector, k);
  std::vector<double> x = x_init.values;
  for (int p = 0; p < passes; ++p) x = os_sart_pass(std::move(x), y.values, system, nonneg);
  return Image(projector.grid(), std::move(x));
}

namespace detail {

// Forward differences with a replicated last row/column.
inline void forward_diffs(std::span<const double> x, int nx, int ny, int ix, int iy, double& dh, double& dv) {
  const double c = x[std::size_t(iy) * nx + ix];
  dh = ix + 1 < nx ? x[std::size_t(iy) * nx + ix + 1] - c : 0.0;
  dv = iy + 1 < ny ? x[std::size_t(iy + 1) * nx + ix] - c : 0.0;
}

}  // namespace detail

/// Smoothed isotropic TV: sum of sqrt(dh^2 + dv^2 + eps^2).
inline double tv_norm(std::span<const double> x, int nx, int ny, double eps) {
  require(x.size() == std::size_t(nx) * std::size_t(ny), "tv_norm: size mismatch");
  double total = 0.0;
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) {
      double dh, dv;
      detail::forward_diffs(x, nx, ny, ix, iy, dh, dv);
      total += std::sqrt(dh * dh + dv * dv + eps * eps);
    }
  return total;
}

inline double tv_norm(const Image& x, double eps) { return tv_norm(x.values, x.grid.nx, x.grid.ny, eps); }

inline std::vector<double> tv_gradient(std::span<const double> x, int nx, int ny, double eps) {
  require(x.size() == std::size_t(nx) * std::size_t(ny), "tv_gradient: size mismatch");
  std::vector<double> g(x.size(), 0.0);
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) {
      double dh, dv;
      detail::forward_diffs(x, nx, ny, ix, iy, dh, dv);
      const double m = std::sqrt(dh * dh + dv * dv + eps * eps);
      const std::size_t c = std::size_t(iy) * nx + ix;
      g[c] -= (dh + dv) / m;
      if (ix + 1 < nx) g[c + 1] += dh / m;
      if (iy + 1 < ny) g[c + nx] += dv / m;
    }
  return g;
}

inline constexpr int kTvMaxHalvings = 30;

/// Q normalized gradient steps of length `step`. A step that would raise the
/// TV norm is halved until it does not, and the shorter step is kept for the
/// remaining iterations; descent stops if no decrease is found.
inline std::vector<double> tv_descent(std::vector<double> x, int nx, int ny, int q, double step, double eps) {
  require(q >= 0 && step >= 0.0, "tv_descent: Q and step must be >= 0");
  double current = q > 0 ? tv_norm(x, nx, ny, eps) : 0.0;
  std::vector<double> trial(x.size());
  for (int i = 0; i < q && step > 0.0; ++i) {
    const auto g = tv_gradient(x, nx, ny, eps);
    const double norm = std::sqrt(squared_norm(g));
    if (!(norm > 0.0)) break;
    bool accepted = false;
    for (int h = 0; h <= kTvMaxHalvings; ++h, step *= 0.5) {
      for (std::size_t k = 0; k < x.size(); ++k) trial[k] = x[k] - step * g[k] / norm;
      const double value = tv_norm(trial, nx, ny, eps);
      if (value < current) {
        current = value;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    x.swap(trial);
  }
  return x;
}

inline constexpr double kLambdaFloor = 1e-4;

struct LambdaSolution {
  double lambda = 1.0;
  bool interior_root = false;  // residual(lambda) == tau was solved exactly
};

/// Solves ||r + lambda d||^2 = tau on (0, 1] given rr = ||r||^2, rd = <r, d>
/// and dd = ||d||^2. Takes the smallest root in (0, 1]. Without a root: when
/// the residual stays below tau the full TV step (lambda = 1) is taken,
/// otherwise the residual is minimized over [kLambdaFloor, 1].
inline LambdaSolution solve_lambda_quadratic(double rr, double rd, double dd, double tau) {
  if (!(dd > 0.0)) return {1.0, false};
  const double c = rr - tau;
  const double disc = rd * rd - dd * c;
  if (disc >= 0.0) {
    const double sq = std::sqrt(disc);
    // Stable pair of roots of dd l^2 + 2 rd l + c.
    const double qv = -(rd + std::copysign(sq, rd));
    double r1 = qv / dd;
    double r2 = qv != 0.0 ? c / qv : r1;
    if (r1 > r2) std::swap(r1, r2);
    for (double root : {r1, r2})
      if (root > 0.0 && root <= 1.0) return {root, true};
  }
  const auto residual = [&](double l) { return rr + 2.0 * l * rd + l * l * dd; };
  if (residual(1.0) < tau) return {1.0, false};
  return {std::clamp(-rd / dd, kLambdaFloor, 1.0), false};
}

inline double fused_residual(double rr, double rd, double dd, double lambda) {
  return rr + 2.0 * lambda * rd + lambda * lambda * dd;
}

/// Residual-vector form: r = A X_SART - y, d = A (X_TV - X_SART).
inline LambdaSolution solve_lambda_tv(std::span<const double> r, std::span<const double> d, double tau) {
  return solve_lambda_quadratic(squared_norm(r), dot(r, d), squared_norm(d), tau);
}

inline double itv_target(double eps_sart, double eps_prev, double w) { return (1.0 - w) * eps_sart + w * eps_prev; }

/// Image-level form.
inline LambdaSolution solve_lambda_tv(const Image& x_sart, const Image& x_tv, const Sinogram& y,
                                      const Projector& projector, double eps_prev, double w) {
  const auto r_sino = projector.project(x_sart);
  std::vector<double> r(r_sino.values.size()), diff(x_sart.values.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = r_sino.values[i] - y.values[i];
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = x_tv.values[i] - x_sart.values[i];
  const auto d = projector.project(Image(x_sart.grid, std::move(diff)));
  return solve_lambda_tv(r, d.values, itv_target(squared_norm(r), eps_prev, w));
}

struct ItvIteration {
  int p = 0;
  double eps_sart = 0.0;
  double eps_prev = 0.0;
  double tau = 0.0;
  double lambda_tv = 0.0;
  bool interior_root = false;
  double tv_norm = 0.0;           // of the fused image
  double tv_norm_sart = 0.0;      // of X_SART
  double residual_fused = 0.0;    // ||A x(lambda) - y||^2 before the clamp
  double residual = 0.0;          // after the clamp
};

struct AsdPocsResult {
  Image image;
  ItvState state;
  std::vector<ItvIteration> iterations;
};

inline void write_itv_csv(const std::vector<ItvIteration>& its, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out.precision(17);
  out << "p,eps_sart,eps_prev,tau,lambda_tv,interior_root,tv_norm,residual_fused,residual\n";
  for (const auto& it : its)
    out << it.p << ',' << it.eps_sart << ',' << it.eps_prev << ',' << it.tau << ',' << it.lambda_tv << ','
        << it.interior_root << ',' << it.tv_norm << ',' << it.residual_fused << ',' << it.residual << '\n';
}

/// Observer called after each outer iteration with X_SART, X_TV and the fused
/// image after the clamp.
using ItvObserver = std::function<void(const ItvIteration&, std::span<const double> x_sart,
                                       std::span<const double> x_tv, std::span<const double> x)>;

/// ASD-POCS with iTV fusion for config.P outer iterations from x_init.
inline AsdPocsResult asd_pocs_itv(const Sinogram& y, const Projector& projector, const AsdPocsConfig& config,
                                  const Image& x_init, const std::optional<std::filesystem::path>& log_path = {},
                                  const ItvObserver& observer = {}) {
  config.validate(projector.n_views());
  require(x_init.grid == projector.grid(), "asd_pocs_itv: initial image does not match the grid");
  require(y.values.size() == projector.geometry().n_rays(), "asd_pocs_itv: sinogram does not match geometry");
  const int nx = projector.grid().nx, ny = projector.grid().ny;
  const SartSystem system(projector, config.K);

  AsdPocsResult result{x_init, {}, {}};
  std::vector<double>& x = result.image.values;
  auto residual_of = [&](std::span<const double> img) {
    auto ax = projector.project(Image(projector.grid(), std::vector<double>(img.begin(), img.end())));
    for (std::size_t i = 0; i < ax.values.size(); ++i) ax.values[i] -= y.values[i];
    return ax.values;
  };
  double eps_prev = squared_norm(residual_of(x));
  result.state.eps_prev = eps_prev;

  for (int p = 1; p <= config.P; ++p) {
    const auto x_sart = os_sart_pass(x, y.values, system, config.nonneg);
    const auto r = residual_of(x_sart);
    const double eps_sart = squared_norm(r);
    if (!std::isfinite(eps_sart))
      throw NumericalError("asd_pocs_itv: non-finite residual at outer iteration " + std::to_string(p));
    double change = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) change += (x_sart[i] - x[i]) * (x_sart[i] - x[i]);
    const double step = config.tv_step_scale * std::sqrt(change);
    const auto x_tv = tv_descent(x_sart, nx, ny, config.Q, step, config.tv_eps);

    std::vector<double> diff(x.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = x_tv[i] - x_sart[i];
    const auto d = projector.project(Image(projector.grid(), diff)).values;
    const double rr = eps_sart, rd = dot(r, d), dd = squared_norm(d);
    const double tau = itv_target(eps_sart, eps_prev, config.w);
    const auto sol = solve_lambda_quadratic(rr, rd, dd, tau);

    bool clamped = false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = x_sart[i] + sol.lambda * diff[i];
      if (config.nonneg && x[i] < 0.0) {
        x[i] = 0.0;
        clamped = true;
      }
    }
    if (!std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); }))
      throw NumericalError("asd_pocs_itv: non-finite image at outer iteration " + std::to_string(p));

    ItvIteration it;
    it.p = p;
    it.eps_sart = eps_sart;
    it.eps_prev = eps_prev;
    it.tau = tau;
    it.lambda_tv = sol.lambda;
    it.interior_root = sol.interior_root;
    it.residual_fused = fused_residual(rr, rd, dd, sol.lambda);
    it.residual = clamped ? squared_norm(residual_of(x)) : it.residual_fused;
    it.tv_norm = tv_norm(x, nx, ny, config.tv_eps);
    it.tv_norm_sart = tv_norm(x_sart, nx, ny, config.tv_eps);
    result.iterations.push_back(it);
    if (observer) observer(it, x_sart, x_tv, x);

    result.state = {sol.lambda, it.residual, eps_sart};
    eps_prev = it.residual;
    if (config.delta_n && eps_prev <= *config.delta_n) break;
  }
  if (log_path) write_itv_csv(result.iterations, *log_path);
  return result;
}

}  // namespace cdpir

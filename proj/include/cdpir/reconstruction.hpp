#pragma once

// The CDPIR alternating reconstruction and the classical baselines, with a
// common report format.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cdpir/errors.hpp"
#include "cdpir/geometry.hpp"
#include "cdpir/interpolant.hpp"
#include "cdpir/json_io.hpp"
#include "cdpir/metrics.hpp"
#include "cdpir/model.hpp"
#include "cdpir/random.hpp"
#include "cdpir/solver.hpp"
#include "cdpir/training.hpp"

namespace cdpir {

struct CdpirConfig {
  int n_steps = 1000;
  double mu = 1.0;
  int label = kNullLabel;
  int dc_cadence = 1;
  AsdPocsConfig dc_config{};
  AsdPocsConfig init_config{};
  bool renoise = true;
  InterpolantSchedule schedule{};
  std::uint64_t seed = 0;
  // With mu = 1 the unconditional pass does not change the guided velocity.
  bool skip_unconditional_at_unit_mu = true;

  void validate() const {
    require(n_steps >= 1, "CdpirConfig: n_steps must be >= 1");
    require(dc_cadence >= 1, "CdpirConfig: dc_cadence must be >= 1");
    GuidanceConfig{mu, label}.validate();
  }

  int dc_calls() const { return n_steps / dc_cadence + (n_steps % dc_cadence != 0 ? 1 : 0); }

  /// ASD-POCS outer iterations spent by one reconstruction.
  int sweep_budget() const { return init_config.init_iters + dc_calls() * dc_config.P; }
};

inline Json to_json(const CdpirConfig& c) {
  return Json{{"n_steps", c.n_steps},
              {"mu", c.mu},
              {"label", c.label == kNullLabel ? Json("null") : Json(c.label)},
              {"dc_cadence", c.dc_cadence},
              {"dc_config", to_json(c.dc_config)},
              {"init_config", to_json(c.init_config)},
              {"renoise", c.renoise},
              {"schedule", to_json(c.schedule)},
              {"seed", c.seed},
              {"skip_unconditional_at_unit_mu", c.skip_unconditional_at_unit_mu}};
}

inline int label_from_json(const Json& j) {
  if (j.is_null() || (j.is_string() && j.get<std::string>() == "null")) return kNullLabel;
  if (j.is_string()) return std::stoi(j.get<std::string>());
  return j.get<int>();
}

inline CdpirConfig cdpir_config_from_json(const Json& j) {
  check_keys(j,
             {"n_steps", "mu", "label", "dc_cadence", "dc_config", "init_config", "renoise", "schedule", "seed",
              "skip_unconditional_at_unit_mu"},
             "cdpir");
  CdpirConfig c;
  read_opt(j, "n_steps", c.n_steps);
  read_opt(j, "mu", c.mu);
  if (j.contains("label")) c.label = label_from_json(j.at("label"));
  read_opt(j, "dc_cadence", c.dc_cadence);
  if (j.contains("dc_config")) c.dc_config = asd_pocs_config_from_json(j.at("dc_config"));
  if (j.contains("init_config")) c.init_config = asd_pocs_config_from_json(j.at("init_config"));
  read_opt(j, "renoise", c.renoise);
  if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"));
  read_opt(j, "seed", c.seed);
  read_opt(j, "skip_unconditional_at_unit_mu", c.skip_unconditional_at_unit_mu);
  c.validate();
  return c;
}

struct StepDiagnostic {
  int step = 0;
  double t = 0.0;
  double residual = 0.0;  // ||A x - y|| of the step's image-domain estimate
  std::optional<double> psnr;
  bool data_consistency = false;
  double lambda_tv = 0.0;
};

struct ReconstructionReport {
  std::string method;
  Image image;
  std::vector<StepDiagnostic> steps;
  std::map<std::string, double> timings;  // seconds per phase
  Json config;
  std::optional<Image> dc_warm_start;  // input of the final data-consistency pass
};

inline Json to_json(const ReconstructionReport& r) {
  Json steps = Json::array();
  for (const auto& s : r.steps) {
    Json j{{"step", s.step}, {"t", s.t}, {"residual", s.residual}, {"data_consistency", s.data_consistency},
           {"lambda_tv", s.lambda_tv}};
    j["psnr"] = s.psnr ? Json(format_metric(*s.psnr)) : Json(nullptr);
    steps.push_back(j);
  }
  return Json{{"method", r.method}, {"grid", to_json(r.image.grid)}, {"timings", r.timings}, {"config", r.config},
              {"steps", steps}};
}

namespace detail {

class PhaseTimer {
 public:
  explicit PhaseTimer(std::map<std::string, double>& sink) : sink_(sink) {}
  template <class Fn>
  auto run(const std::string& phase, Fn&& fn) {
    const auto start = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      sink_[phase] += seconds_since(start);
    } else {
      auto out = fn();
      sink_[phase] += seconds_since(start);
      return out;
    }
  }

 private:
  static double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  std::map<std::string, double>& sink_;
};

inline double data_residual(const Projector& projector, const Image& x, const Sinogram& y) {
  const auto ax = projector.project(x);
  double acc = 0.0;
  for (std::size_t i = 0; i < ax.values.size(); ++i) acc += (ax.values[i] - y.values[i]) * (ax.values[i] - y.values[i]);
  return std::sqrt(acc);
}

inline std::optional<double> psnr_against(const Image& x, const std::optional<Image>& truth) {
  if (!truth) return std::nullopt;
  return psnr(x, *truth, default_data_range(truth->values));
}

}  // namespace detail

/// Initialization image shared by CDPIR and the ASD-POCS baseline.
inline AsdPocsResult cdpir_initialization(const Sinogram& y, const Projector& projector, const AsdPocsConfig& init) {
  return asd_pocs_itv(y, projector, init.with_iterations(init.init_iters), Image(projector.grid()));
}

inline ReconstructionReport cdpir_reconstruct(const Sinogram& y, const Projector& projector,
                                              const VelocityNet<float>& model, const CdpirConfig& config,
                                              const std::optional<Image>& ground_truth = std::nullopt) {
  config.validate();
  const ImageGrid& grid = projector.grid();
  const ModelConfig& mc = model.config();
  if (grid.nx != mc.image_size || grid.ny != mc.image_size)
    throw DataError("cdpir: model image_size " + std::to_string(mc.image_size) + " does not match the " +
                    std::to_string(grid.nx) + "x" + std::to_string(grid.ny) + " grid");
  model.check_label(config.label);
  if (y.values.size() != projector.geometry().n_rays()) throw DataError("cdpir: sinogram does not match geometry");
  if (ground_truth && ground_truth->grid != grid) throw DataError("cdpir: ground truth does not match the grid");

  ReconstructionReport report;
  report.method = "cdpir";
  report.config = to_json(config);
  detail::PhaseTimer timer(report.timings);
  const auto total_start = std::chrono::steady_clock::now();
  Engine rng = make_engine(config.seed, 0xC0F);
  std::normal_distribution<double> normal(0.0, 1.0);
  const InterpolantSchedule& schedule = config.schedule;
  const std::size_t n = grid.size();

  auto to_model = [&](const std::vector<double>& img) {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = (img[i] - mc.data_offset) * mc.data_scale;
    return out;
  };
  auto to_image = [&](const std::vector<double>& x) {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] / mc.data_scale + mc.data_offset;
    return Image(grid, std::move(out));
  };
  auto forward = [&](const std::vector<double>& x, double t, int label) {
    const std::vector<float> xf(x.begin(), x.end());
    const auto v = timer.run("model", [&] { return model.forward(xf, t, label); });
    return std::vector<double>(v.begin(), v.end());
  };
  auto guided_velocity = [&](const std::vector<double>& x, double t) {
    const bool cond_only = config.label == kNullLabel || (config.mu == 1.0 && config.skip_unconditional_at_unit_mu);
    if (cond_only) return forward(x, t, config.label);
    if (config.mu == 0.0) return forward(x, t, kNullLabel);
    return cfg_velocity<double>(forward(x, t, config.label), forward(x, t, kNullLabel), config.mu);
  };
  auto check_finite = [&](const std::vector<double>& x, int step) {
    for (double v : x)
      if (!std::isfinite(v)) throw NumericalError("cdpir: non-finite value at step " + std::to_string(step));
  };

  const Image x_init = timer.run("init", [&] { return cdpir_initialization(y, projector, config.init_config).image; });

  const double dt = 1.0 / config.n_steps;
  std::vector<double> x = to_model(x_init.values);
  {
    const auto c = schedule(1.0);
    for (auto& v : x) v = c.alpha * v + c.sigma * normal(rng);
  }

  Image x_c = x_init;
  for (int i = 0; i < config.n_steps; ++i) {
    const double t = 1.0 - i * dt;
    const bool last = i + 1 == config.n_steps;
    const double t_next = last ? 0.0 : 1.0 - (i + 1) * dt;
    const auto v = guided_velocity(x, t);
    std::vector<double> r;
    if (last) {
      r = euler_step<double>(x, dt, v);
    } else {
      const auto s = velocity_to_score<double>(v, x, t, schedule);
      std::vector<double> z(n);
      for (auto& zi : z) zi = normal(rng);
      r = em_step<double>(x, t, dt, v, s, z, schedule);
    }
    check_finite(r, i);

    StepDiagnostic diag;
    diag.step = i;
    diag.t = t;
    if ((i + 1) % config.dc_cadence == 0 || last) {
      const auto x0_hat = t_next > 0.0 ? estimate_x0<double>(r, guided_velocity(r, t_next), t_next, schedule) : r;
      check_finite(x0_hat, i);
      const Image warm = to_image(x0_hat);
      const auto dc = timer.run("dc", [&] { return asd_pocs_itv(y, projector, config.dc_config, warm); });
      if (last) report.dc_warm_start = warm;
      x_c = dc.image;
      diag.data_consistency = true;
      diag.lambda_tv = dc.state.lambda_tv;
      diag.residual = std::sqrt(dc.state.eps_prev);
      diag.psnr = detail::psnr_against(x_c, ground_truth);
      if (!last) {
        x = to_model(x_c.values);
        if (config.renoise) {
          const auto c = schedule(t_next);
          for (auto& xv : x) xv = c.alpha * xv + c.sigma * normal(rng);
        }
      }
    } else {
      const Image estimate = to_image(r);
      diag.residual = detail::data_residual(projector, estimate, y);
      diag.psnr = detail::psnr_against(estimate, ground_truth);
      x = std::move(r);
    }
    report.steps.push_back(diag);
  }
  report.image = x_c;
  report.timings["total"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - total_start).count();
  return report;
}

enum class BaselineMethod { OsSart, AsdPocs };

inline std::string to_string(BaselineMethod m) { return m == BaselineMethod::OsSart ? "ossart" : "asdpocs"; }

struct BaselineConfig {
  BaselineMethod method = BaselineMethod::AsdPocs;
  int iterations = 30;  // ASD-POCS outer iterations or OS-SART passes
  AsdPocsConfig solver{};

  void validate(int n_views) const {
    require(iterations >= 0, "BaselineConfig: iterations must be >= 0");
    solver.validate(n_views);
  }
};

/// OS-SART or ASD-POCS-iTV from zero, one diagnostic per outer iteration.
inline ReconstructionReport reconstruct_baselines(const Sinogram& y, const Projector& projector,
                                                  const BaselineConfig& config,
                                                  const std::optional<Image>& ground_truth = std::nullopt) {
  config.validate(projector.n_views());
  if (y.values.size() != projector.geometry().n_rays()) throw DataError("baseline: sinogram does not match geometry");
  ReconstructionReport report;
  report.method = to_string(config.method);
  report.config = Json{{"method", report.method}, {"iterations", config.iterations}, {"solver", to_json(config.solver)}};
  const auto start = std::chrono::steady_clock::now();
  if (config.method == BaselineMethod::AsdPocs) {
    auto observe = [&](const ItvIteration& it, std::span<const double>, std::span<const double>,
                       std::span<const double> x) {
      StepDiagnostic d;
      d.step = it.p - 1;
      d.residual = std::sqrt(it.residual);
      d.data_consistency = true;
      d.lambda_tv = it.lambda_tv;
      if (ground_truth) d.psnr = detail::psnr_against(Image(projector.grid(), {x.begin(), x.end()}), ground_truth);
      report.steps.push_back(d);
    };
    report.image = asd_pocs_itv(y, projector, config.solver.with_iterations(config.iterations),
                                Image(projector.grid()), std::nullopt, observe)
                       .image;
  } else {
    const SartSystem system(projector, config.solver.K);
    std::vector<double> x(projector.grid().size(), 0.0);
    for (int p = 0; p < config.iterations; ++p) {
      x = os_sart_pass(std::move(x), y.values, system, config.solver.nonneg);
      const Image img(projector.grid(), x);
      StepDiagnostic d;
      d.step = p;
      d.residual = detail::data_residual(projector, img, y);
      d.psnr = detail::psnr_against(img, ground_truth);
      report.steps.push_back(d);
    }
    report.image = Image(projector.grid(), std::move(x));
  }
  report.timings["total"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace cdpir

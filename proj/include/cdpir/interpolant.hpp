#pragma once

// Stochastic interpolant x_t = alpha(t) x0 + sigma(t) eps with t = 0 at the
// data end and t = 1 at the noise end, plus the velocity/score algebra and the
// reverse-time integrators used for sampling.
//
// Reverse-time convention: every step takes a positive dt and moves t -> t - dt.
// The forward-time SDE with the interpolant's marginals is
//   dx = (v + omega/2 s) dt + sqrt(omega) dW,
// so a reverse Euler-Maruyama step is
//   x <- x - dt (v - omega/2 s) + sqrt(omega dt) z.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cdpir/errors.hpp"
#include "cdpir/random.hpp"

namespace cdpir {

enum class ScheduleKind { Linear, GVP, VP };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Linear: return "linear";
    case ScheduleKind::GVP: return "gvp";
    case ScheduleKind::VP: return "vp";
  }
  return "unknown";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "gvp") return ScheduleKind::GVP;
  if (s == "vp") return ScheduleKind::VP;
  throw UsageError("unknown schedule '" + s + "'");
}

struct ScheduleValues {
  double alpha, sigma, alpha_dot, sigma_dot, omega;

  /// alpha_dot * sigma - alpha * sigma_dot; strictly negative on (0, 1).
  double denominator() const { return alpha_dot * sigma - alpha * sigma_dot; }
};

struct InterpolantSchedule {
  ScheduleKind kind = ScheduleKind::GVP;
  double beta_min = 0.1;  // VP only
  double beta_max = 20.0;

  ScheduleValues operator()(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("schedule: t must lie in [0, 1]");
    ScheduleValues v{};
    switch (kind) {
      case ScheduleKind::Linear:
        v = {1.0 - t, t, -1.0, 1.0, 0.0};
        break;
      case ScheduleKind::GVP: {
        const double h = 0.5 * std::numbers::pi;
        // Exact endpoint values keep alpha(1) = 0 and sigma(0) = 0 bit-exact.
        const double c = t == 1.0 ? 0.0 : std::cos(h * t);
        const double s = t == 1.0 ? 1.0 : std::sin(h * t);
        v = {c, s, -h * s, h * c, 0.0};
        break;
      }
      case ScheduleKind::VP: {
        const double integral = beta_min * t + 0.5 * (beta_max - beta_min) * t * t;
        const double beta = beta_min + (beta_max - beta_min) * t;
        const double a = std::exp(-0.5 * integral);
        const double s = std::sqrt(-std::expm1(-integral));
        const double a_dot = -0.5 * beta * a;
        const double s_dot = s > 0.0 ? 0.5 * beta * a * a / s : std::numeric_limits<double>::infinity();
        v = {a, s, a_dot, s_dot, 0.0};
        break;
      }
    }
    v.omega = v.sigma;
    return v;
  }
};

inline ScheduleValues schedule_eval(const InterpolantSchedule& schedule, double t) { return schedule(t); }

namespace detail {

template <class T>
void check_same(std::span<const T> a, std::span<const T> b, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace detail

template <class T>
std::vector<T> interpolate(std::span<const T> x0, std::span<const T> eps, double t, const InterpolantSchedule& schedule) {
  detail::check_same(x0, eps, "interpolate");
  const auto c = schedule(t);
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(c.alpha * x0[i] + c.sigma * eps[i]);
  return out;
}

/// Time derivative of the interpolant path: alpha_dot x0 + sigma_dot eps.
template <class T>
std::vector<T> velocity_target(std::span<const T> x0, std::span<const T> eps, double t,
                               const InterpolantSchedule& schedule) {
  detail::check_same(x0, eps, "velocity_target");
  const auto c = schedule(t);
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(c.alpha_dot * x0[i] + c.sigma_dot * eps[i]);
  return out;
}

/// Score from velocity: s = (alpha v - alpha_dot x) / (sigma (alpha_dot sigma - alpha sigma_dot)).
/// For an exact conditional pair (x_t, v_target) this returns -eps / sigma.
template <class T>
std::vector<T> velocity_to_score(std::span<const T> v, std::span<const T> x, double t,
                                 const InterpolantSchedule& schedule) {
  detail::check_same(v, x, "velocity_to_score");
  const auto c = schedule(t);
  const double denom = c.sigma * c.denominator();
  if (c.sigma <= 0.0 || !std::isfinite(denom) || std::abs(denom) < 1e-300)
    throw NumericalError("velocity_to_score: singular at t = " + std::to_string(t) + " (sigma = 0)");
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T((c.alpha * v[i] - c.alpha_dot * x[i]) / denom);
  return out;
}

/// Alternative split form s = alpha v / sigma - alpha_dot x / (alpha_dot sigma - alpha sigma_dot).
/// Kept only so tests can show it disagrees with the Gaussian score; not used
/// for sampling.
template <class T>
std::vector<T> velocity_to_score_split_form(std::span<const T> v, std::span<const T> x, double t,
                                            const InterpolantSchedule& schedule) {
  detail::check_same(v, x, "velocity_to_score_split_form");
  const auto c = schedule(t);
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(c.alpha * v[i] / c.sigma - c.alpha_dot * x[i] / c.denominator());
  return out;
}

/// Estimated noise eps_hat = (alpha v - alpha_dot x) / (alpha sigma_dot - alpha_dot sigma).
template <class T>
std::vector<T> estimate_eps(std::span<const T> x, std::span<const T> v, double t, const InterpolantSchedule& schedule) {
  detail::check_same(v, x, "estimate_eps");
  const auto c = schedule(t);
  const double denom = -c.denominator();
  if (!(std::abs(denom) > 0.0)) throw NumericalError("estimate_eps: vanishing denominator");
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T((c.alpha * v[i] - c.alpha_dot * x[i]) / denom);
  return out;
}

/// Clean-image estimate x0_hat = (x - sigma eps_hat) / alpha.
template <class T>
std::vector<T> estimate_x0(std::span<const T> x, std::span<const T> v, double t, const InterpolantSchedule& schedule) {
  detail::check_same(v, x, "estimate_x0");
  const auto c = schedule(t);
  if (!(c.alpha > 0.0)) throw NumericalError("estimate_x0: alpha(t) = 0 at t = " + std::to_string(t));
  if (c.sigma == 0.0) return std::vector<T>(x.begin(), x.end());
  const auto eps = estimate_eps(x, v, t, schedule);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T((x[i] - c.sigma * eps[i]) / c.alpha);
  return out;
}

struct GuidanceConfig {
  double mu = 1.0;
  int label = -1;  // -1 is the null token

  void validate() const { require(std::isfinite(mu) && mu >= 0.0, "GuidanceConfig: mu must be finite and >= 0"); }
};

/// Classifier-free guidance: v_uncond + mu (v_cond - v_uncond). mu = 1 and
/// mu = 0 return the corresponding branch bit-exactly.
template <class T>
std::vector<T> cfg_velocity(std::span<const T> v_cond, std::span<const T> v_uncond, double mu) {
  detail::check_same(v_cond, v_uncond, "cfg_velocity");
  if (mu == 1.0) return std::vector<T>(v_cond.begin(), v_cond.end());
  if (mu == 0.0) return std::vector<T>(v_uncond.begin(), v_uncond.end());
  std::vector<T> out(v_cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(v_uncond[i] + mu * (v_cond[i] - v_uncond[i]));
  return out;
}

/// Reverse Euler-Maruyama step with caller-supplied standard normal draws z.
/// omega is evaluated at the step's start time.
template <class T>
std::vector<T> em_step(std::span<const T> x, double t, double dt, std::span<const T> v, std::span<const T> s,
                       std::span<const T> z, const InterpolantSchedule& schedule) {
  detail::check_same(x, v, "em_step");
  detail::check_same(x, s, "em_step");
  detail::check_same(x, z, "em_step");
  require(dt > 0.0, "em_step: dt must be > 0");
  const double omega = schedule(t).omega;
  const double noise = std::sqrt(omega * dt);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(x[i] - dt * (v[i] - 0.5 * omega * s[i]) + noise * z[i]);
  return out;
}

template <class T>
std::vector<T> em_step(std::span<const T> x, double t, double dt, std::span<const T> v, std::span<const T> s,
                       const InterpolantSchedule& schedule, Engine& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> z(x.size());
  for (auto& zi : z) zi = T(normal(rng));
  return em_step<T>(x, t, dt, v, s, z, schedule);
}

/// Deterministic Euler step of dx = v dt in reverse time.
template <class T>
std::vector<T> euler_step(std::span<const T> x, double dt, std::span<const T> v) {
  detail::check_same(x, v, "euler_step");
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(x[i] - dt * v[i]);
  return out;
}

template <class T>
using VelocityField = std::function<std::vector<T>(std::span<const T>, double)>;

/// Heun (two-stage) step of the probability-flow ODE in reverse time.
template <class T>
std::vector<T> ode_step(std::span<const T> x, double t, double dt, const VelocityField<T>& field) {
  require(dt >= 0.0, "ode_step: dt must be >= 0");
  if (dt == 0.0) return std::vector<T>(x.begin(), x.end());
  const auto v1 = field(x, t);
  const auto pred = euler_step<T>(x, dt, v1);
  const auto v2 = field(pred, std::max(0.0, t - dt));
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(x[i] - 0.5 * dt * (v1[i] + v2[i]));
  return out;
}

enum class SamplingMode { SDE, ODE };

struct SamplerConfig {
  int n_steps = 1000;
  double t_start = 1.0;
  double t_end = 0.0;
  SamplingMode mode = SamplingMode::SDE;
  std::uint64_t seed = 0;

  void validate() const {
    require(n_steps >= 1, "SamplerConfig: n_steps must be >= 1");
    require(t_end >= 0.0 && t_end < t_start && t_start <= 1.0, "SamplerConfig: need 0 <= t_end < t_start <= 1");
  }
};

/// Integrates from t_start to t_end on a uniform grid. Every step but the last
/// is Euler-Maruyama (SDE) or Heun (ODE); the last step is a plain Euler step
/// so nothing is evaluated at t_end, where sigma may vanish.
template <class T>
std::vector<T> sample(const VelocityField<T>& field, std::vector<T> x, const SamplerConfig& config,
                      const InterpolantSchedule& schedule) {
  config.validate();
  Engine rng = make_engine(config.seed, 0x5A);
  const double dt = (config.t_start - config.t_end) / config.n_steps;
  for (int i = 0; i < config.n_steps; ++i) {
    const double t = config.t_start - i * dt;
    if (i + 1 == config.n_steps) {
      x = euler_step<T>(x, dt, field(x, t));
    } else if (config.mode == SamplingMode::ODE) {
      x = ode_step<T>(x, t, dt, field);
    } else {
      const auto v = field(x, t);
      const auto s = velocity_to_score<T>(v, x, t, schedule);
      x = em_step<T>(x, t, dt, v, s, schedule, rng);
    }
  }
  return x;
}

}  // namespace cdpir

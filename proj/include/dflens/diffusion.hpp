#pragma once

// Noise schedules, forward noising, DDPM/DDIM reverse steps and the
// uniform / exponential inference time-step planners.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dflens/error.hpp"
#include "dflens/tensor.hpp"

namespace dflens {

enum class ScheduleKind { linear, cosine };

inline ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw Error(concat("unknown schedule kind '", name, "' (expected linear or cosine)"));
}

inline std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "cosine"; }

/// Per-step tables. alpha_bar[t] is the cumulative product of (1 - beta[s])
/// for s <= t; sigma[t] is the DDPM posterior standard deviation.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  void check_step(int t, const char* op) const {
    if (t < 0 || t >= T) throw Error(concat(op, ": time-step ", t, " outside [0, ", T - 1, "]"));
  }
  // alpha_bar with the convention alpha_bar(-1) = 1 (the clean endpoint)
  double alpha_bar_at(int t) const { return t < 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(t)); }
};

inline constexpr double kLinearBetaStart = 1e-4;
inline constexpr double kLinearBetaEnd = 0.02;

inline NoiseSchedule make_schedule(ScheduleKind kind, int T) {
  if (T < 2) throw Error(concat("make_schedule: T must be >= 2, got ", T));
  NoiseSchedule s;
  s.kind = kind;
  s.T = T;
  const auto n = static_cast<std::size_t>(T);
  s.beta.resize(n);
  if (kind == ScheduleKind::linear) {
    for (std::size_t t = 0; t < n; ++t) {
      s.beta[t] = kLinearBetaStart + (kLinearBetaEnd - kLinearBetaStart) * static_cast<double>(t) / static_cast<double>(T - 1);
    }
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    const double f0 = f(0.0);
    double prev = 1.0;
    for (std::size_t t = 0; t < n; ++t) {
      const double ab = f(static_cast<double>(t + 1)) / f0;
      s.beta[t] = std::clamp(1.0 - ab / prev, 1e-8, 0.999);
      prev = ab;
    }
  }
  s.alpha_bar.resize(n);
  double prod = 1.0;
  for (std::size_t t = 0; t < n; ++t) {
    prod *= 1.0 - s.beta[t];
    s.alpha_bar[t] = prod;
  }
  s.sigma.resize(n);
  s.sigma[0] = 0.0;
  for (std::size_t t = 1; t < n; ++t) {
    s.sigma[t] = std::sqrt((1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t]);
  }
  return s;
}

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(concat(op, ": shape mismatch ", shape_string(a.shape()), " vs ", shape_string(b.shape())));
  }
}
}  // namespace detail

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  detail::require_same_shape(x0, eps, "q_sample");
  s.check_step(t, "q_sample");
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<double> out(x0.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return Tensor(x0.shape(), std::move(out));
}

/// Ancestral DDPM step from t to t-1.
inline Tensor ddpm_step(const Tensor& x_t, int t, const Tensor& eps_hat, const Tensor& z, const NoiseSchedule& s) {
  detail::require_same_shape(x_t, eps_hat, "ddpm_step");
  detail::require_same_shape(x_t, z, "ddpm_step");
  s.check_step(t, "ddpm_step");
  const auto ti = static_cast<std::size_t>(t);
  const double beta = s.beta[ti];
  const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
  const double eps_coef = beta / std::sqrt(1.0 - s.alpha_bar[ti]);
  const double sigma = s.sigma[ti];
  std::vector<double> out(x_t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = inv_sqrt_alpha * (x_t[i] - eps_coef * eps_hat[i]) + sigma * z[i];
  }
  return Tensor(x_t.shape(), std::move(out));
}

/// x0 estimate implied by a noise prediction at step t.
inline Tensor predict_x0(const Tensor& x_t, int t, const Tensor& eps_hat, const NoiseSchedule& s) {
  detail::require_same_shape(x_t, eps_hat, "predict_x0");
  s.check_step(t, "predict_x0");
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const double sq = std::sqrt(ab), sq1 = std::sqrt(1.0 - ab);
  std::vector<double> out(x_t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - sq1 * eps_hat[i]) / sq;
  return Tensor(x_t.shape(), std::move(out));
}

/// DDIM step from t to t_prev (t_prev = -1 lands on the clean estimate).
inline Tensor ddim_step(const Tensor& x_t, int t, int t_prev, const Tensor& eps_hat, double sigma_t, const Tensor& z,
                        const NoiseSchedule& s) {
  detail::require_same_shape(x_t, eps_hat, "ddim_step");
  detail::require_same_shape(x_t, z, "ddim_step");
  s.check_step(t, "ddim_step");
  if (t_prev >= t || t_prev < -1) throw Error(concat("ddim_step: t_prev ", t_prev, " must satisfy -1 <= t_prev < t=", t));
  if (sigma_t < 0.0) throw Error("ddim_step: sigma_t must be non-negative");
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const double ab_prev = s.alpha_bar_at(t_prev);
  const double dir_var = 1.0 - ab_prev - sigma_t * sigma_t;
  if (dir_var < 0.0) {
    throw Error(concat("ddim_step: 1 - alpha_bar(t_prev) - sigma_t^2 = ", dir_var, " is negative"));
  }
  const double sq = std::sqrt(ab), sq1 = std::sqrt(1.0 - ab);
  const double sq_prev = std::sqrt(ab_prev), dir = std::sqrt(dir_var);
  std::vector<double> out(x_t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0_hat = (x_t[i] - sq1 * eps_hat[i]) / sq;
    out[i] = sq_prev * x0_hat + dir * eps_hat[i] + sigma_t * z[i];
  }
  return Tensor(x_t.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Time-step plans

enum class PlanMode { uniform, exp_early, exp_latter };

inline std::string to_string(PlanMode mode) {
  switch (mode) {
    case PlanMode::uniform: return "uniform";
    case PlanMode::exp_early: return "exp_early";
    case PlanMode::exp_latter: return "exp_latter";
  }
  return "?";
}

inline PlanMode parse_plan_mode(std::string_view name) {
  if (name == "uniform") return PlanMode::uniform;
  if (name == "exp_early" || name == "early") return PlanMode::exp_early;
  if (name == "exp_latter" || name == "latter") return PlanMode::exp_latter;
  throw Error(concat("unknown plan mode '", name, "' (expected uniform, exp_early or exp_latter)"));
}

struct TimestepPlan {
  std::vector<int> steps;  // strictly decreasing, within [0, T-1]
  PlanMode mode = PlanMode::uniform;
  int T = 0;
  int gamma = 0;
  int l = 0;

  std::size_t size() const { return steps.size(); }
};

inline nlohmann::json plan_to_json(const TimestepPlan& plan) { return nlohmann::json(plan.steps); }

/// l steps spaced floor(T / l) apart, starting at T - 1.
inline TimestepPlan uniform_timesteps(int T, int l) {
  if (l < 1 || l > T) throw Error(concat("uniform_timesteps: need 1 <= l <= T, got l=", l, ", T=", T));
  TimestepPlan plan{{}, PlanMode::uniform, T, 0, l};
  const int spacing = T / l;
  for (int i = 0; i < l; ++i) plan.steps.push_back(T - 1 - i * spacing);
  return plan;
}

/// delta such that delta^(l + gamma) = T.
inline double exponential_base(int T, int l, int gamma) {
  return std::exp(std::log(static_cast<double>(T)) / static_cast<double>(l + gamma));
}

/// Unrounded p_t = T - delta^(t + gamma) for t = 0..l.
inline std::vector<double> exponential_points(int T, int l, int gamma) {
  if (l < 1 || gamma < 0) throw Error(concat("exponential_points: need l >= 1 and gamma >= 0, got l=", l, ", gamma=", gamma));
  const double delta = exponential_base(T, l, gamma);
  std::vector<double> p;
  for (int t = 0; t <= l; ++t) p.push_back(static_cast<double>(T) - std::pow(delta, t + gamma));
  return p;
}

/// Exponentially spaced plan. Early mode rounds p_t, latter mode rounds
/// |T - p_t| = delta^(t+gamma). Values are clamped to [0, T-1], collisions
/// are dropped, T-1 is prepended when missing and the plan is capped at l
/// entries by discarding the lowest time-steps.
inline TimestepPlan exponential_timesteps(int T, int l, int gamma, PlanMode mode) {
  if (mode == PlanMode::uniform) throw Error("exponential_timesteps: mode must be exp_early or exp_latter");
  if (T < 2) throw Error(concat("exponential_timesteps: T must be >= 2, got ", T));
  const auto points = exponential_points(T, l, gamma);
  std::vector<int> steps;
  for (double p : points) {
    const double v = mode == PlanMode::exp_early ? p : std::abs(static_cast<double>(T) - p);
    steps.push_back(std::clamp(static_cast<int>(std::lround(v)), 0, T - 1));
  }
  steps.push_back(T - 1);
  std::sort(steps.begin(), steps.end(), std::greater<>{});
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
  if (steps.size() > static_cast<std::size_t>(l)) steps.resize(static_cast<std::size_t>(l));
  return TimestepPlan{std::move(steps), mode, T, gamma, l};
}

inline TimestepPlan make_plan(PlanMode mode, int T, int l, int gamma) {
  return mode == PlanMode::uniform ? uniform_timesteps(T, l) : exponential_timesteps(T, l, gamma, mode);
}

}  // namespace dflens

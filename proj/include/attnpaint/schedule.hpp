/*
 * Copyright 2026 The attnpaint Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "attnpaint/tensor.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnpaint {

/// How the per-step variances beta_1..beta_T are chosen.
struct BetaSpec {
  enum class Kind { Linear, Explicit };
  Kind kind = Kind::Linear;
  double start = 0.0, end = 0.0;
  std::vector<double> values;

  static BetaSpec linear(double start, double end) { return {Kind::Linear, start, end, {}}; }
  static BetaSpec explicit_values(std::vector<double> v) { return {Kind::Explicit, 0, 0, std::move(v)}; }
  /// Linear 1e-4 .. 0.02 rescaled from a 1000-step grid to T steps.
  static BetaSpec rescaled_default(int steps) {
    const double k = 1000.0 / steps;
    return linear(1e-4 * k, 0.02 * k);
  }
};

class ScheduleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// beta_t, cumulative alpha_t (with alpha_0 = 1) and the DDIM sigma_t table.
/// Immutable after construction.
class NoiseSchedule {
 public:
  NoiseSchedule(int steps, const BetaSpec& spec, double eta) : eta_(eta) {
    if (steps < 1) throw ScheduleError("schedule: step count must be >= 1");
    if (!(eta >= 0.0 && eta <= 1.0)) throw ScheduleError("schedule: eta must lie in [0, 1]");
    beta_.assign(steps + 1, 0.0);
    if (spec.kind == BetaSpec::Kind::Linear) {
      for (int t = 1; t <= steps; ++t)
        beta_[t] = steps == 1 ? spec.start : spec.start + (spec.end - spec.start) * (t - 1) / (steps - 1);
    } else {
      if (static_cast<int>(spec.values.size()) != steps)
        throw ScheduleError("schedule: explicit beta list has " + std::to_string(spec.values.size()) +
                            " entries, expected " + std::to_string(steps));
      for (int t = 1; t <= steps; ++t) beta_[t] = spec.values[t - 1];
    }
    alpha_bar_.assign(steps + 1, 1.0);
    sigma_.assign(steps + 1, 0.0);
    for (int t = 1; t <= steps; ++t) {
      if (!(beta_[t] > 0.0 && beta_[t] < 1.0))
        throw ScheduleError("schedule: beta_" + std::to_string(t) + " = " + std::to_string(beta_[t]) +
                            " outside (0, 1)");
      alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - beta_[t]);
    }
    for (int t = 1; t <= steps; ++t) {
      const double a = alpha_bar_[t], ap = alpha_bar_[t - 1];
      sigma_[t] = eta * std::sqrt((1.0 - ap) / (1.0 - a)) * std::sqrt(1.0 - a / ap);
      if (sigma_[t] > std::sqrt(1.0 - ap) + 1e-15)
        throw ScheduleError("schedule: sigma_" + std::to_string(t) + " exceeds sqrt(1 - alpha_{t-1})");
    }
  }

  int steps() const { return static_cast<int>(beta_.size()) - 1; }
  double eta() const { return eta_; }
  double beta(int t) const { return beta_.at(check(t, 1)); }
  /// Cumulative product; alpha_bar(0) == 1.
  double alpha_bar(int t) const { return alpha_bar_.at(check(t, 0)); }
  double sigma(int t) const { return sigma_.at(check(t, 1)); }

 private:
  int check(int t, int lo) const {
    if (t < lo || t > steps())
      throw ScheduleError("schedule: timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                          std::to_string(steps()) + "]");
    return t;
  }

  double eta_;
  std::vector<double> beta_, alpha_bar_, sigma_;
};

/// Everything one reverse step needs.
template <typename S>
struct StepInput {
  Tensor<S> x_t;
  int t = 1;
  Tensor<S> eps;                  // noise prediction at (x_t, t)
  std::optional<Tensor<S>> grad;  // gradient of the guidance objective wrt x_t
  std::optional<double> scale;    // vanilla guidance strength s
};

/// Free-form diagnostic messages produced while stepping.
using Diagnostics = std::vector<std::string>;

namespace detail {

template <typename S>
void check_same(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

}  // namespace detail

/// x_t = sqrt(alpha_t) x_0 + sqrt(1 - alpha_t) noise.  t = 0 returns x_0.
template <typename S>
Tensor<S> forward_diffuse(const Tensor<S>& x0, int t, const Tensor<S>& noise, const NoiseSchedule& sched) {
  detail::check_same("forward_diffuse", x0, noise);
  const double a = sched.alpha_bar(t);
  return Tensor<S>(x0.shape(), S(std::sqrt(a)) * x0.array() + S(std::sqrt(1.0 - a)) * noise.array());
}

/// Clean-sample estimate (x_t - sqrt(1 - alpha_t) eps) / sqrt(alpha_t).
template <typename S>
Tensor<S> predict_x0(const Tensor<S>& x_t, const Tensor<S>& eps, int t, const NoiseSchedule& sched) {
  detail::check_same("predict_x0", x_t, eps);
  const double a = sched.alpha_bar(t);
  return Tensor<S>(x_t.shape(), (x_t.array() - S(std::sqrt(1.0 - a)) * eps.array()) / S(std::sqrt(a)));
}

/// Re-noises a clean estimate to step t-1 along the DDIM family:
/// sqrt(alpha_{t-1}) x0 + sqrt(1 - alpha_{t-1} - sigma^2) eps + sigma term.
template <typename S>
Tensor<S> ddim_from_x0(const Tensor<S>& x0, const Tensor<S>& eps, int t, double sigma, const Tensor<S>* term,
                       const NoiseSchedule& sched) {
  detail::check_same("ddim_from_x0", x0, eps);
  const double ap = sched.alpha_bar(t - 1);
  const double radicand = 1.0 - ap - sigma * sigma;
  if (radicand < 0.0) {
    if (radicand < -1e-12)
      throw ScheduleError("ddim step: negative radicand at t=" + std::to_string(t) + " (alpha_t=" +
                          std::to_string(sched.alpha_bar(t)) + ", alpha_{t-1}=" + std::to_string(ap) +
                          ", sigma_t=" + std::to_string(sigma) + ")");
  }
  const S c_dir = S(std::sqrt(std::max(0.0, radicand)));
  typename Tensor<S>::Array y = S(std::sqrt(ap)) * x0.array() + c_dir * eps.array();
  if (term != nullptr && sigma != 0.0) {
    detail::check_same("ddim_from_x0", x0, *term);
    y += S(sigma) * term->array();
  }
  return Tensor<S>(x0.shape(), std::move(y));
}

/// General sigma-parametrised DDIM update with an explicit stochastic term.
/// `sigma` defaults to the schedule's sigma_t.
template <typename S>
Tensor<S> ddim_step_general(const StepInput<S>& in, const Tensor<S>& stochastic_term, const NoiseSchedule& sched,
                            std::optional<double> sigma = std::nullopt) {
  detail::check_same("ddim_step_general", in.x_t, in.eps);
  const double noise_scale = sigma.value_or(sched.sigma(in.t));
  return ddim_from_x0(predict_x0(in.x_t, in.eps, in.t, sched), in.eps, in.t, noise_scale, &stochastic_term, sched);
}

/// sigma_t = 0 member of the family.
template <typename S>
Tensor<S> ddim_step_deterministic(const StepInput<S>& in, const NoiseSchedule& sched) {
  detail::check_same("ddim_step_deterministic", in.x_t, in.eps);
  return ddim_from_x0<S>(predict_x0(in.x_t, in.eps, in.t, sched), in.eps, in.t, 0.0, nullptr, sched);
}

/// Factor on the gradient that vanilla guidance subtracts from the
/// deterministic update at step t.
inline double guidance_xi(int t, double scale, const NoiseSchedule& sched) {
  const double a = sched.alpha_bar(t), ap = sched.alpha_bar(t - 1);
  return std::sqrt(1.0 - a) * scale * (std::sqrt(1.0 - a) * std::sqrt(ap) / std::sqrt(a) - std::sqrt(1.0 - ap));
}

/// Noise prediction shifted along the guidance gradient, scaled by the
/// noise level of step t and the guidance scale.
template <typename S>
Tensor<S> guided_eps(const StepInput<S>& in, const NoiseSchedule& sched) {
  if (!in.grad) throw ScheduleError("vanilla guidance: gradient missing");
  if (!in.scale) throw ScheduleError("vanilla guidance: scale missing");
  if (*in.scale < 0.0) throw ScheduleError("vanilla guidance: scale must be >= 0");
  detail::check_same("vanilla guidance", in.eps, *in.grad);
  const double k = std::sqrt(1.0 - sched.alpha_bar(in.t)) * *in.scale;
  return Tensor<S>(in.eps.shape(), in.eps.array() + S(k) * in.grad->array());
}

/// Vanilla post-hoc guidance: the deterministic step with the shifted noise
/// prediction substituted in.
template <typename S>
Tensor<S> vanilla_guided_step(const StepInput<S>& in, const NoiseSchedule& sched) {
  StepInput<S> shifted = in;
  shifted.eps = guided_eps(in, sched);
  return ddim_step_deterministic(shifted, sched);
}

/// The same update written as the deterministic step minus a scaled gradient.
template <typename S>
Tensor<S> vanilla_guided_step_explicit(const StepInput<S>& in, const NoiseSchedule& sched) {
  if (!in.grad) throw ScheduleError("vanilla guidance: gradient missing");
  if (!in.scale) throw ScheduleError("vanilla guidance: scale missing");
  const Tensor<S> base = ddim_step_deterministic(in, sched);
  const double xi = guidance_xi(in.t, *in.scale, sched);
  return Tensor<S>(base.shape(), base.array() - S(xi) * in.grad->array());
}

/// Population standard deviation of every entry.
template <typename S>
double population_std(const Tensor<S>& x) {
  const auto v = x.array().template cast<double>();
  const double m = v.mean();
  return std::sqrt((v - m).square().mean());
}

/// grad / std(grad), oriented so that adding it lowers the objective.
/// Returns nullopt when the gradient has (numerically) no spread.
template <typename S>
std::optional<Tensor<S>> rasg_term(const Tensor<S>& grad) {
  const double sd = population_std(grad);
  if (!(sd >= 1e-12) || !std::isfinite(sd)) return std::nullopt;
  return Tensor<S>(grad.shape(), grad.array() * S(-1.0 / sd));
}

/// Reweighted guidance: the standardised gradient stands in for the Gaussian
/// term of the general DDIM update. A flat gradient degrades to a zero term.
template <typename S>
Tensor<S> rasg_step(const StepInput<S>& in, const NoiseSchedule& sched, Diagnostics* diag = nullptr) {
  if (!in.grad) throw ScheduleError("rasg: gradient missing");
  detail::check_same("rasg", in.eps, *in.grad);
  auto term = rasg_term(*in.grad);
  if (!term) {
    if (diag) diag->push_back("rasg: t=" + std::to_string(in.t) + " gradient std below 1e-12, guidance skipped");
    return ddim_step_general(in, Tensor<S>::zeros(in.x_t.shape()), sched);
  }
  return ddim_step_general(in, *term, sched);
}

}  // namespace attnpaint

#include "doctest.h"

#include "attnpaint/schedule.hpp"

#include <cmath>
#include <random>

using namespace attnpaint;
using T = Tensor<double>;

namespace {

T randn(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0, scale);
  Eigen::ArrayXd v(numel(s));
  for (auto& x : v) x = n(rng);
  return T(std::move(s), v);
}

double rel_diff(const T& a, const T& b) {
  double den = std::max(a.array().abs().maxCoeff(), b.array().abs().maxCoeff());
  return (a.array() - b.array()).abs().maxCoeff() / std::max(den, 1e-300);
}

// alpha_1 = 0.75, alpha_2 = 0.5
NoiseSchedule two_step(double eta = 0.0) {
  return NoiseSchedule(2, BetaSpec::explicit_values({0.25, 1.0 / 3.0}), eta);
}

}  // namespace

TEST_CASE("schedule tables") {
  NoiseSchedule s(50, BetaSpec::rescaled_default(50), 0.1);
  CHECK(s.alpha_bar(0) == 1.0);
  for (int t = 1; t <= 50; ++t) {
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    CHECK(s.sigma(t) >= 0.0);
    CHECK(s.sigma(t) <= std::sqrt(1.0 - s.alpha_bar(t - 1)));
  }
  CHECK(s.alpha_bar(50) > 0.0);
  CHECK(s.beta(1) == doctest::Approx(0.002));
  CHECK(s.beta(50) == doctest::Approx(0.4));
}

TEST_CASE("eta zero gives zero sigmas and sigma_1 is always zero") {
  NoiseSchedule s0(20, BetaSpec::linear(0.01, 0.2), 0.0);
  for (int t = 1; t <= 20; ++t) CHECK(s0.sigma(t) == 0.0);
  NoiseSchedule s1(20, BetaSpec::linear(0.01, 0.2), 1.0);
  CHECK(s1.sigma(1) == 0.0);
}

TEST_CASE("sigma_5 for T=10, linear 0.01..0.2, eta=0.1") {
  // hand evaluation of eta*sqrt((1-a4)/(1-a5))*sqrt(1-a5/a4)
  NoiseSchedule s(10, BetaSpec::linear(0.01, 0.2), 0.1);
  CHECK(s.sigma(5) == doctest::Approx(0.025050902203721619).epsilon(1e-14));
}

TEST_CASE("schedule construction errors") {
  CHECK_THROWS_AS(NoiseSchedule(0, BetaSpec::linear(0.1, 0.2), 0.1), ScheduleError);
  CHECK_THROWS_AS(NoiseSchedule(3, BetaSpec::explicit_values({0.1, 1.0, 0.2}), 0.1), ScheduleError);
  CHECK_THROWS_AS(NoiseSchedule(3, BetaSpec::explicit_values({0.1, 0.2}), 0.1), ScheduleError);
  CHECK_THROWS_AS(NoiseSchedule(3, BetaSpec::linear(0.1, 0.2), 1.5), ScheduleError);
}

TEST_CASE("forward diffusion closed form") {
  std::mt19937_64 rng(1);
  NoiseSchedule s(10, BetaSpec::linear(0.01, 0.2), 0.0);
  T x0 = randn({2, 3}, rng);
  CHECK(same_values(forward_diffuse(x0, 0, randn({2, 3}, rng), s), x0));
  T xt = forward_diffuse(x0, 4, T::zeros({2, 3}), s);
  CHECK(rel_diff(xt, T({2, 3}, x0.array() * std::sqrt(s.alpha_bar(4)))) < 1e-15);
  CHECK_THROWS_AS(forward_diffuse(x0, 11, x0, s), ScheduleError);
  CHECK_THROWS_AS(forward_diffuse(x0, 1, T::zeros({3}), s), ShapeError);

  // alpha_1 = 0.36 gives sqrt(1 - 0.36) = 0.8
  NoiseSchedule s36(1, BetaSpec::explicit_values({0.64}), 0.0);
  T y = forward_diffuse(T::zeros({4}), 1, T::constant({4}, 1.0), s36);
  for (Index i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("general step with sigma 0 equals the deterministic step") {
  std::mt19937_64 rng(2);
  NoiseSchedule s(50, BetaSpec::rescaled_default(50), 0.1);
  std::uniform_int_distribution<int> tdist(1, 50);
  for (int k = 0; k < 100; ++k) {
    StepInput<double> in{randn({3, 4, 4}, rng), tdist(rng), randn({3, 4, 4}, rng), {}, {}};
    T det = ddim_step_deterministic(in, s);
    T gen = ddim_step_general(in, randn({3, 4, 4}, rng), s, 0.0);
    CHECK(rel_diff(det, gen) <= 1e-12);
  }
}

TEST_CASE("zero noise prediction reduces to a rescaling and telescopes over the chain") {
  std::mt19937_64 rng(3);
  NoiseSchedule s(50, BetaSpec::rescaled_default(50), 0.0);
  T xT = randn({16}, rng);
  T x = xT;
  for (int t = 50; t >= 1; --t) {
    StepInput<double> in{x, t, T::zeros({16}), {}, {}};
    T next = ddim_step_deterministic(in, s);
    CHECK(rel_diff(next, T({16}, x.array() * std::sqrt(s.alpha_bar(t - 1) / s.alpha_bar(t)))) <= 1e-12);
    x = next;
  }
  CHECK(rel_diff(x, T({16}, xT.array() / std::sqrt(s.alpha_bar(50)))) <= 1e-10);
}

TEST_CASE("hand-evaluated deterministic step") {
  NoiseSchedule s = two_step();
  StepInput<double> in{T::of({1}, {1.0}), 2, T::of({1}, {0.2}), {}, {}};
  CHECK(ddim_step_deterministic(in, s)[0] == doctest::Approx(1.1515397906347011).epsilon(1e-12));
}

TEST_CASE("the stochastic term enters linearly with weight sigma") {
  std::mt19937_64 rng(4);
  NoiseSchedule s(50, BetaSpec::rescaled_default(50), 0.7);
  StepInput<double> in{randn({8}, rng), 30, randn({8}, rng), {}, {}};
  T z = randn({8}, rng);
  T with = ddim_step_general(in, z, s);
  T without = ddim_step_general(in, T::zeros({8}), s);
  CHECK(rel_diff(T({8}, with.array() - without.array()), T({8}, s.sigma(30) * z.array())) < 1e-12);
}

TEST_CASE("negative radicand is reported") {
  NoiseSchedule s = two_step();
  StepInput<double> in{T::of({1}, {1.0}), 2, T::of({1}, {0.2}), {}, {}};
  CHECK_THROWS_AS(ddim_step_general(in, T::zeros({1}), s, 0.9), ScheduleError);
}

TEST_CASE("vanilla guidance: both algebraic forms agree and xi matches hand value") {
  std::mt19937_64 rng(5);
  NoiseSchedule s(50, BetaSpec::rescaled_default(50), 0.1);
  std::uniform_int_distribution<int> tdist(1, 50);
  std::uniform_real_distribution<double> sdist(0.0, 50.0);
  for (int k = 0; k < 100; ++k) {
    StepInput<double> in{randn({2, 5}, rng), tdist(rng), randn({2, 5}, rng), randn({2, 5}, rng), sdist(rng)};
    CHECK(rel_diff(vanilla_guided_step(in, s), vanilla_guided_step_explicit(in, s)) <= 1e-12);
  }

  NoiseSchedule hs = two_step();
  CHECK(guidance_xi(2, 1.0, hs) == doctest::Approx(0.25881904510252085).epsilon(1e-12));
  StepInput<double> in{randn({6}, rng), 2, randn({6}, rng), randn({6}, rng), 1.0};
  T diff(in.x_t.shape(), ddim_step_deterministic(in, hs).array() - vanilla_guided_step(in, hs).array());
  CHECK(rel_diff(diff, T({6}, 0.25881904510252085 * in.grad->array())) < 1e-10);
}

TEST_CASE("vanilla guidance degenerate cases and errors") {
  std::mt19937_64 rng(6);
  NoiseSchedule s(50, BetaSpec::rescaled_default(50), 0.1);
  StepInput<double> in{randn({5}, rng), 20, randn({5}, rng), randn({5}, rng), 0.0};
  CHECK(same_values(vanilla_guided_step(in, s), ddim_step_deterministic(in, s)));
  in.scale = 3.0;
  in.grad = T::zeros({5});
  CHECK(same_values(vanilla_guided_step(in, s), ddim_step_deterministic(in, s)));
  in.grad.reset();
  CHECK_THROWS_AS(vanilla_guided_step(in, s), ScheduleError);
}

TEST_CASE("rasg standardisation and scale invariance") {
  std::mt19937_64 rng(7);
  NoiseSchedule s(50, BetaSpec::rescaled_default(50), 0.1);
  T g = randn({3, 16, 16}, rng, 0.037);
  auto term = rasg_term(g);
  REQUIRE(term.has_value());
  CHECK(std::abs(population_std(*term) - 1.0) <= 1e-6);

  for (double c : {1e-6, 0.5, 3.0, 1e5}) {
    StepInput<double> a{randn({3, 16, 16}, rng), 25, randn({3, 16, 16}, rng), g, {}};
    StepInput<double> b = a;
    b.grad = T(g.shape(), g.array() * c);
    CHECK(rel_diff(rasg_step(a, s), rasg_step(b, s)) <= 1e-12);
  }
}

TEST_CASE("rasg with sigma zero is the deterministic step") {
  std::mt19937_64 rng(8);
  NoiseSchedule s(50, BetaSpec::rescaled_default(50), 0.0);
  StepInput<double> in{randn({20}, rng), 40, randn({20}, rng), randn({20}, rng), {}};
  CHECK(same_values(rasg_step(in, s), ddim_step_deterministic(in, s)));
}

TEST_CASE("rasg falls back to a zero term for a flat gradient") {
  std::mt19937_64 rng(9);
  NoiseSchedule s(50, BetaSpec::rescaled_default(50), 0.1);
  StepInput<double> in{randn({20}, rng), 40, randn({20}, rng), T::constant({20}, 2.0), {}};
  Diagnostics diag;
  T out = rasg_step(in, s, &diag);
  CHECK(diag.size() == 1);
  CHECK(same_values(out, ddim_step_general(in, T::zeros({20}), s)));
}

TEST_CASE("rasg moves the sample against the gradient") {
  std::mt19937_64 rng(10);
  NoiseSchedule s(50, BetaSpec::rescaled_default(50), 0.1);
  StepInput<double> in{randn({50}, rng), 30, randn({50}, rng), randn({50}, rng), {}};
  T guided = rasg_step(in, s);
  T plain = ddim_step_general(in, T::zeros({50}), s);
  CHECK(((guided.array() - plain.array()) * in.grad->array()).sum() < 0.0);
}

TEST_CASE("DDIM family preserves the marginal of Gaussian data under a perfect denoiser") {
  // Data x0 ~ N(mu, v0); the exact posterior noise mean is linear in x_t.
  const double mu = 0.3, v0 = 0.25;
  const int n = 10000;
  NoiseSchedule base(50, BetaSpec::rescaled_default(50), 0.0);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd(0, 1);
  for (double eta : {0.1, 0.5}) {
    NoiseSchedule s(50, BetaSpec::rescaled_default(50), eta);
    for (int t : {2, 10, 25, 40, 50}) {
      const double a = s.alpha_bar(t), vt = a * v0 + 1 - a;
      Eigen::ArrayXd xt(n), z(n);
      for (int i = 0; i < n; ++i) {
        xt[i] = std::sqrt(a) * mu + std::sqrt(vt) * nd(rng);
        z[i] = nd(rng);
      }
      Eigen::ArrayXd eps = std::sqrt(1 - a) / vt * (xt - std::sqrt(a) * mu);
      StepInput<double> in{T({n}, xt), t, T({n}, eps), {}, {}};
      Eigen::ArrayXd det = ddim_step_deterministic(in, base).array();
      Eigen::ArrayXd sto = ddim_step_general(in, T({n}, z), s).array();
      auto mean = [](const Eigen::ArrayXd& v) { return v.mean(); };
      auto var = [&](const Eigen::ArrayXd& v) { return (v - v.mean()).square().sum() / (v.size() - 1); };
      const double se_mean = std::sqrt(var(sto) / n);
      const double se_var = var(sto) * std::sqrt(2.0 / (n - 1));
      CAPTURE(eta);
      CAPTURE(t);
      CHECK(std::abs(mean(det) - mean(sto)) <= 3 * se_mean);
      CHECK(std::abs(var(det) - var(sto)) <= 3 * se_var);
    }
  }
}

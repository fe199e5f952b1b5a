#include "doctest.h"

#include "attnpaint/upscaler.hpp"

#include <random>

using namespace attnpaint;
using T = Tensor<double>;

namespace {

Image random_image(std::mt19937_64& rng, Index C, Index H, Index W) {
  std::uniform_real_distribution<double> u(0, 1);
  Eigen::ArrayXd v(C * H * W);
  for (auto& x : v) x = u(rng);
  return Image({C, H, W}, v);
}

Mask box(Index size, Index lo, Index hi) {
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(size * size);
  for (Index y = lo; y < hi; ++y)
    for (Index x = lo; x < hi; ++x) v[y * size + x] = 1;
  return Mask({size, size}, v);
}

UpscalerConfig tiny_config() {
  UpscalerConfig c;
  c.channels = {8, 16};
  c.groups = 4;
  c.time_features = 16;
  c.time_dim = 32;
  c.total_steps = 25;
  return c;
}

ParameterSet<double> live(const UpscalerConfig& cfg, std::uint64_t seed) {
  ParameterSet<double> p = init_upscaler(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.3);
  for (const char* name : {"out.w", "out.b"}) {
    Eigen::ArrayXd v = p[name].array();
    for (auto& x : v) x = n(rng);
    p.set(name, T(p[name].shape(), v));
  }
  return p;
}

bool outside_equal(const Image& a, const Image& b, const Mask& m) {
  const Index HW = m.size();
  for (Index c = 0; c < a.dim(0); ++c)
    for (Index p = 0; p < HW; ++p)
      if (m[p] == 0 && a[c * HW + p] != b[c * HW + p]) return false;
  return true;
}

}  // namespace

TEST_CASE("step blend selects per pixel") {
  std::mt19937_64 rng(1);
  const T pred(Shape{1, 3, 4, 4}, random_image(rng, 3, 4, 4).array());
  const T known(Shape{1, 3, 4, 4}, random_image(rng, 3, 4, 4).array());
  CHECK((upscale_step_blend(pred, known, T::constant({4, 4}, 1.0)).array() == pred.array()).all());
  CHECK((upscale_step_blend(pred, known, T::zeros({4, 4})).array() == known.array()).all());

  Eigen::ArrayXd cv(16);
  for (Index i = 0; i < 16; ++i) cv[i] = ((i / 4) + (i % 4)) % 2;
  const T checker({4, 4}, cv);
  const T out = upscale_step_blend(pred, known, checker);
  for (Index c = 0; c < 3; ++c)
    for (Index p = 0; p < 16; ++p) CHECK(out[c * 16 + p] == (cv[p] != 0 ? pred[c * 16 + p] : known[c * 16 + p]));
  CHECK((upscale_step_blend(out, known, checker).array() == out.array()).all());
  CHECK((upscale_step_blend(pred, known, checker.with_shape({1, 1, 4, 4})).array() == out.array()).all());

  CHECK_THROWS_AS(upscale_step_blend(pred, T::zeros({1, 3, 4, 5}), checker), ShapeError);
  CHECK_THROWS_AS(upscale_step_blend(pred, known, T::zeros({3, 3})), ShapeError);
}

TEST_CASE("nearest upsampling repeats pixels") {
  const Image low = Image::of({1, 2, 2}, {0.1, 0.2, 0.3, 0.4});
  const Image up = upsample_nearest(low, 4);
  CHECK(up.shape() == Shape{1, 8, 8});
  CHECK(up[0] == 0.1);
  CHECK(up[3] == 0.1);
  CHECK(up[4] == 0.2);
  CHECK(up[4 * 8] == 0.3);
  CHECK(up[63] == 0.4);
  CHECK((downscale(up, 4).array() - low.array()).abs().maxCoeff() < 1e-15);
}

TEST_CASE("an exact noise predictor reproduces the known image") {
  std::mt19937_64 rng(2);
  const Image high = random_image(rng, 3, 16, 16);
  const Mask mask = box(16, 4, 10);
  const NoiseSchedule sched(25, BetaSpec::rescaled_default(25), 0.0);
  const T x0(Shape{1, 3, 16, 16}, high.array() * 2 - 1);
  NoisePredictor<double> oracle = [&](const T& x, int t) {
    const double a = sched.alpha_bar(t);
    return T(x.shape(), (x.array() - std::sqrt(a) * x0.array()) / std::sqrt(1 - a));
  };
  UpscaleOptions opt;
  opt.poisson = false;
  const UpscaleResult res = upscale_chain<double>(high, mask, oracle, sched, opt);
  CHECK((res.generated.array() - high.array()).abs().maxCoeff() <= 1e-10);
  CHECK(res.latent_std.size() == 25);
}

TEST_CASE("upscaling keeps the known region and is deterministic") {
  std::mt19937_64 rng(3);
  const UpscalerConfig cfg = tiny_config();
  const Upscaler<double> model(cfg, live(cfg, 4));
  const NoiseSchedule sched(25, BetaSpec::rescaled_default(25), 0.0);
  const Image high = random_image(rng, 3, 16, 16);
  const Image low = downscale(high, 4);
  const Mask mask = box(16, 5, 11);
  for (bool poisson : {false, true}) {
    UpscaleOptions opt;
    opt.seed = 9;
    opt.poisson = poisson;
    const UpscaleResult a = run_upscale(high, low, mask, model, sched, opt);
    const UpscaleResult b = run_upscale(high, low, mask, model, sched, opt);
    CHECK(outside_equal(a.image, high, mask));
    CHECK((a.image.array() == b.image.array()).all());
    CHECK(!(a.image.array() == high.array()).all());
  }
}

TEST_CASE("nothing to inpaint returns the image") {
  std::mt19937_64 rng(5);
  const UpscalerConfig cfg = tiny_config();
  const Upscaler<double> model(cfg, live(cfg, 6));
  const NoiseSchedule sched(25, BetaSpec::rescaled_default(25), 0.0);
  const Image high = random_image(rng, 3, 16, 16);
  const UpscaleResult res = run_upscale(high, downscale(high, 4), Mask::zeros({16, 16}), model, sched);
  CHECK((res.image.array() == high.array()).all());
}

TEST_CASE("upscaling rejects other ratios and mismatched grids") {
  std::mt19937_64 rng(7);
  const UpscalerConfig cfg = tiny_config();
  const Upscaler<double> model(cfg, live(cfg, 8));
  const NoiseSchedule sched(25, BetaSpec::rescaled_default(25), 0.0);
  const Image high = random_image(rng, 3, 16, 16);
  CHECK_THROWS_AS(run_upscale(high, downscale(high, 2), box(16, 2, 5), model, sched), std::invalid_argument);
  CHECK_THROWS_AS(run_upscale(high, random_image(rng, 3, 4, 3), box(16, 2, 5), model, sched), std::invalid_argument);
  CHECK_THROWS(run_upscale(high, downscale(high, 4), box(16, 2, 5), model,
                           NoiseSchedule(30, BetaSpec::rescaled_default(30), 0.0)));
  CHECK_THROWS(run_upscale(high, downscale(high, 4), box(8, 2, 5), model, sched));
}

TEST_CASE("upscaler configuration round-trips") {
  const UpscalerConfig cfg = tiny_config();
  const ParameterSet<double> p = init_upscaler(cfg, 1);
  const UpscalerConfig back = UpscalerConfig::load(p);
  CHECK(back.channels == cfg.channels);
  CHECK(back.groups == cfg.groups);
  CHECK(back.total_steps == 25);
  CHECK_THROWS(UpscalerConfig::load(ParameterSet<double>{}));
  UpscalerConfig wrong = cfg;
  wrong.image_channels = 1;
  CHECK_THROWS_AS(Upscaler<double>(wrong, p), ShapeError);
}

TEST_CASE("upscaler training batches and loss") {
  const UpscalerConfig cfg = tiny_config();
  UpscaleTrainConfig tc;
  tc.batch = 4;
  tc.crop = 16;
  tc.high_size = 32;
  tc.pool = 3;
  const NoiseSchedule sched(25, BetaSpec::rescaled_default(25), 0.0);
  const UpscalePool pool = make_upscale_pool(1, tc.pool, tc.high_size);
  REQUIRE(pool.low.front().shape() == Shape{3, 8, 8});
  std::mt19937_64 rng(2);
  const UpscaleBatch b = make_upscale_batch(rng, pool, tc, sched);
  CHECK(b.x0.shape() == Shape{4, 3, 16, 16});
  // the condition is the area-downscaled crop, repeated
  const Tensor<double> hi = b.x0.cast<double>(), co = b.condition.cast<double>();
  Image crop(Shape{3, 16, 16}, (hi.array().segment(0, 768) + 1) * 0.5);
  Image cond(Shape{3, 16, 16}, (co.array().segment(0, 768) + 1) * 0.5);
  CHECK((downscale(crop, 4).array() - downscale(cond, 4).array()).abs().maxCoeff() < 1e-6);

  const double loss = upscaler_loss(cfg, init_upscaler(cfg, 1).cast<float>(), b, sched, nullptr);
  CHECK(loss == doctest::Approx(b.noise.array().square().mean()).epsilon(1e-6));

  tc.steps = 3;
  const ParameterSet<double> a = train_upscaler(cfg, tc, sched);
  const ParameterSet<double> c = train_upscaler(cfg, tc, sched);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK((a.values()[i].array() == c.values()[i].array()).all());
  CHECK(UpscalerConfig::load(a).channels == cfg.channels);
}

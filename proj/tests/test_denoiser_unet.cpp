#include "doctest.h"
#include "gradcheck.hpp"
#include "tiny_model.hpp"

#include "attnpaint/train.hpp"

#include <cmath>
#include <random>

using namespace attnpaint;
using attnpaint::testing::T;

namespace {

// Output head drawn at random; the input head keeps its zeroed conditioning
// weights.
ParameterSet<double> live_output(const DenoiserConfig& cfg, std::uint64_t seed) {
  ParameterSet<double> p = init_denoiser(cfg, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> n(0.0, 0.3);
  for (const char* name : {"out.w", "out.b"}) {
    Eigen::ArrayXd v = p[name].array();
    for (auto& x : v) x = n(rng);
    p.set(name, T(p[name].shape(), v));
  }
  return p;
}

double max_abs_diff(const T& a, const T& b) { return (a.array() - b.array()).abs().maxCoeff(); }

}  // namespace

TEST_CASE("prompts are laid out as start, words, end, padding") {
  const PromptTokens p = make_prompt("red circle", 8);
  CHECK(p.ids == std::vector<int>{vocab::kStart, vocab::id("red"), vocab::id("circle"), vocab::kEnd, vocab::kPad,
                                  vocab::kPad, vocab::kPad, vocab::kPad});
  CHECK(p.indices.positions == std::vector<Index>{1, 2, 3});
  CHECK(p.indices.length == 8);

  const PromptTokens empty = make_prompt(std::vector<int>{}, 8);
  CHECK(empty.indices.positions == std::vector<Index>{1});
  CHECK(vocab::detokenize(p.ids) == "red circle");

  CHECK_THROWS(make_prompt("a small red circle on the plain background", 8));
  CHECK_THROWS(make_prompt("red unicorn", 8));
  CHECK_THROWS(make_prompt(std::vector<int>{vocab::kEnd}, 8));
}

TEST_CASE("prompt encodings differ by content and are batch independent") {
  const DenoiserConfig cfg = attnpaint::testing::tiny_config();
  const ParameterSet<double> p = init_denoiser(cfg, 2);
  const T both = encode_prompts(p, {make_prompt("red circle", 8), make_prompt("blue square", 8)});
  const T one = encode_prompts(p, {make_prompt("blue square", 8)});
  CHECK(both.shape() == Shape{2, 8, cfg.text_dim});
  const Index per = 8 * cfg.text_dim;
  CHECK(max_abs_diff(T({per}, both.array().segment(per, per)), one.with_shape({per})) == 0.0);
  // the start token sees nothing of the prompt, so it is shared
  CHECK(both.array().segment(0, cfg.text_dim).isApprox(both.array().segment(per, cfg.text_dim)));
  CHECK(!both.array().segment(cfg.text_dim, cfg.text_dim).isApprox(both.array().segment(per + cfg.text_dim, cfg.text_dim)));
}

TEST_CASE("zero-initialised output head predicts zero noise") {
  using namespace attnpaint::testing;
  const DenoiserConfig cfg = tiny_config();
  const Denoiser<double> model(cfg, init_denoiser(cfg, 3));
  TinyBatch b = tiny_batch(model, 1, 2, 8, {"red circle"});
  const auto out = model.predict_noise(b.in, PaintaSettings{true}, true);
  CHECK(out.eps.shape() == b.in.x_t.shape());
  CHECK(out.eps.array().abs().maxCoeff() == 0.0);
}

TEST_CASE("conditioning inputs start disconnected") {
  using namespace attnpaint::testing;
  const DenoiserConfig cfg = tiny_config();
  const Denoiser<double> model(cfg, live_output(cfg, 4));
  TinyBatch b = tiny_batch(model, 2, 2, 8, {"red circle"});
  const T base = model.predict_noise(b.in).eps;
  CHECK(base.array().abs().maxCoeff() > 0);
  DenoiserInputs<double> other = b.in;
  other.masked_image = T::constant(b.in.x_t.shape(), 0.7);
  other.mask = T::zeros(b.in.mask.shape());
  CHECK(max_abs_diff(model.predict_noise(other).eps, base) == 0.0);
}

TEST_CASE("records cover the attention layers with stochastic cross-attention") {
  using namespace attnpaint::testing;
  const DenoiserConfig cfg = tiny_config();
  const Denoiser<double> model(cfg, randomised(cfg, 5));
  TinyBatch b = tiny_batch(model, 3, 2, 8, {"red circle", "square"});
  // rescaling only at the 2x2 level
  PaintaSettings painta{true};
  painta.levels = {2};
  const auto out = model.predict_noise(b.in, painta, true);
  REQUIRE(out.records.size() == 4);
  const std::vector<Index> sizes{4, 2, 2, 4};  // encoder 1, 2 then decoder 2, 1
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& r = out.records[i];
    CHECK(r.layer == static_cast<int>(i));
    CHECK(r.height == sizes[i]);
    const Index hw = r.height * r.width;
    CHECK(r.cross_probs.shape() == Shape{2, hw, 8});
    CHECK(r.self_scores.shape() == Shape{2, hw, hw});
    const T rows = sum(r.cross_probs, 2);
    CHECK((rows.array() - 1).abs().maxCoeff() < 1e-12);
    CHECK(r.alignment.has_value() == (r.height == 2));
  }
  CHECK(model.predict_noise(b.in, PaintaSettings{true}, false).records.empty());
}

TEST_CASE("unit alignment reproduces plain attention bit for bit") {
  using namespace attnpaint::testing;
  const DenoiserConfig cfg = tiny_config();
  const Denoiser<double> model(cfg, randomised(cfg, 6));
  TinyBatch b = tiny_batch(model, 4, 2, 8, {"red circle", "blue square"});
  PaintaSettings unit{true};
  unit.force_unit_alignment = true;
  const T plain = model.predict_noise(b.in, PaintaSettings{false}).eps;
  CHECK(max_abs_diff(model.predict_noise(b.in, unit).eps, plain) == 0.0);
  CHECK(max_abs_diff(model.predict_noise(b.in, PaintaSettings{true}).eps, plain) > 0.0);
}

TEST_CASE("noise prediction is deterministic and per-sample") {
  using namespace attnpaint::testing;
  const DenoiserConfig cfg = tiny_config();
  const Denoiser<double> model(cfg, randomised(cfg, 7));
  TinyBatch b = tiny_batch(model, 5, 3, 8, {"red circle", "blue square", "triangle"});
  const T first = model.predict_noise(b.in, PaintaSettings{true}).eps;
  CHECK(max_abs_diff(model.predict_noise(b.in, PaintaSettings{true}).eps, first) == 0.0);

  DenoiserInputs<double> one;
  one.x_t = slice(b.in.x_t, 0, 1, 1);
  one.masked_image = slice(b.in.masked_image, 0, 1, 1);
  one.mask = slice(b.in.mask, 0, 1, 1);
  one.prompt = slice(b.in.prompt, 0, 1, 1);
  one.t = {b.in.t[1]};
  one.indices = {b.in.indices[1]};
  const T single = model.predict_noise(one, PaintaSettings{true}).eps;
  CHECK(max_abs_diff(single, slice(first, 0, 1, 1)) < 1e-12);
}

TEST_CASE("noise prediction gradient matches finite differences") {
  using namespace attnpaint::testing;
  const DenoiserConfig cfg = tiny_config();
  const Denoiser<double> model(cfg, randomised(cfg, 8));
  TinyBatch b = tiny_batch(model, 6, 1, 8, {"green triangle"});
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::ArrayXd wv(b.in.x_t.size());
  for (auto& x : wv) x = n(rng);
  const T weights(b.in.x_t.shape(), wv);
  auto value = [&](const std::vector<T>& leaves) {
    DenoiserInputs<double> in = b.in;
    in.x_t = leaves[0];
    return sum(model.predict_noise(in).eps * weights).item();
  };
  Tape<double> tape;
  DenoiserInputs<double> taped = b.in;
  taped.x_t = tape.leaf(b.in.x_t);
  const Gradients<double> g = tape.backward(sum(model.predict_noise(taped).eps * weights));
  const auto fd = finite_difference(value, {b.in.x_t}, 1e-5);
  CHECK(max_rel_error(g.of(taped.x_t).array(), fd[0], 1e-6) <= 1e-4);
}

TEST_CASE("configuration round-trips through the weight set") {
  DenoiserConfig cfg = attnpaint::testing::tiny_config();
  cfg.total_steps = 40;
  const ParameterSet<double> p = init_denoiser(cfg, 1);
  const DenoiserConfig back = DenoiserConfig::load(p);
  CHECK(back.channels == cfg.channels);
  CHECK(back.attention_levels == cfg.attention_levels);
  CHECK(back.groups == cfg.groups);
  CHECK(back.text_dim == cfg.text_dim);
  CHECK(back.total_steps == 40);
  CHECK_THROWS(DenoiserConfig::load(ParameterSet<double>{}));

  DenoiserConfig wrong = cfg;
  wrong.image_channels = 1;
  CHECK_THROWS_AS(Denoiser<double>(wrong, p), ShapeError);
}

TEST_CASE("default denoiser size") {
  const ParameterSet<double> p = init_denoiser(DenoiserConfig{}, 1);
  long n = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.names()[i].rfind("meta.", 0) != 0) n += p.values()[i].size();
  CHECK(n > 900000);
  CHECK(n < 1100000);
}

TEST_CASE("initial training loss is the noise variance") {
  const DenoiserConfig cfg = attnpaint::testing::tiny_config();
  TrainConfig tc;
  tc.batch = 8;
  tc.image_size = 16;
  const NoiseSchedule sched(50, BetaSpec::rescaled_default(50), 0.1);
  std::mt19937_64 rng(1);
  const DenoiserBatch b = make_denoiser_batch(rng, tc, cfg, sched);
  const double loss = denoiser_loss(cfg, init_denoiser(cfg, 1).cast<float>(), b, sched, nullptr);
  CHECK(loss == doctest::Approx(b.noise.array().square().mean()).epsilon(1e-6));
  CHECK(loss == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("seeded training runs are identical") {
  const DenoiserConfig cfg = attnpaint::testing::tiny_config();
  TrainConfig tc;
  tc.steps = 3;
  tc.batch = 2;
  tc.image_size = 16;
  tc.warmup = 1;
  const NoiseSchedule sched(50, BetaSpec::rescaled_default(50), 0.1);
  const ParameterSet<double> a = train_denoiser(cfg, tc, sched);
  const ParameterSet<double> b = train_denoiser(cfg, tc, sched);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(a.values()[i], b.values()[i]) == 0.0);
  CHECK(max_abs_diff(a["out.w"], init_denoiser(cfg, tc.seed)["out.w"]) > 0.0);
  CHECK(DenoiserConfig::load(a).channels == cfg.channels);
}

TEST_CASE("a single example can be memorised") {
  const DenoiserConfig cfg = attnpaint::testing::tiny_config();
  TrainConfig tc;
  tc.batch = 1;
  tc.image_size = 8;
  const NoiseSchedule sched(50, BetaSpec::rescaled_default(50), 0.1);
  std::mt19937_64 rng(4);
  DenoiserBatch b;
  b.x0 = Tensor<float>::constant({1, 3, 8, 8}, 0.2f);
  std::normal_distribution<float> n(0.f, 1.f);
  Eigen::ArrayXf x0(192), z(192);
  for (auto& v : x0) v = std::tanh(n(rng));
  for (auto& v : z) v = n(rng);
  b.x0 = Tensor<float>({1, 3, 8, 8}, x0);
  b.noise = Tensor<float>({1, 3, 8, 8}, z);
  b.mask = Tensor<float>::zeros({1, 1, 8, 8});
  b.t = {25};
  b.prompts = {make_prompt("red circle", cfg.prompt_length)};

  ParameterSet<float> trainable;
  const ParameterSet<double> init = init_denoiser(cfg, 2);
  for (std::size_t i = 0; i < init.size(); ++i)
    if (init.names()[i].rfind("meta.", 0) != 0) trainable.add(init.names()[i], init.values()[i].cast<float>());
  Adam<float> opt({3e-3, 0.9, 0.999, 1e-8, 0.0, 0.0});
  double loss = 1;
  int it = 0;
  for (; it < 2000 && loss >= 1e-3; ++it) {
    std::vector<Eigen::ArrayXf> grads;
    loss = denoiser_loss(cfg, trainable, b, sched, &grads);
    opt.step(trainable, grads);
  }
  MESSAGE("memorised in " << it << " steps, loss " << loss);
  CHECK(loss < 1e-3);
}

#include "doctest.h"
#include "poisson_oracle.hpp"
#include "tiny_model.hpp"

#include "attnpaint/inpaint.hpp"

#include <random>

using namespace attnpaint;

namespace {

Image random_image(std::mt19937_64& rng, Index C, Index H, Index W, bool quantised = false) {
  std::uniform_real_distribution<double> u(0, 1);
  Eigen::ArrayXd v(C * H * W);
  for (auto& x : v) x = quantised ? std::round(u(rng) * 255) / 256 : u(rng);
  return Image({C, H, W}, v);
}

Mask blob_mask(Index H, Index W) {
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(H * W);
  for (Index y = 3; y < H - 4; ++y)
    for (Index x = 2 + y % 3; x < W - 3; ++x) v[y * W + x] = 1;
  v[0] = 1;  // a masked pixel on the image corner
  v[1] = 1;
  return Mask({H, W}, v);
}

InpaintTask tiny_task(std::mt19937_64& rng, Index size, const std::string& prompt, std::uint64_t seed) {
  InpaintTask task;
  task.image = random_image(rng, 3, size, size);
  task.mask = attnpaint::testing::square_mask(size, 2, 6);
  task.prompt = vocab::tokenize(prompt);
  task.seed = seed;
  return task;
}

bool known_region_equal(const Image& a, const Image& b, const Mask& mask) {
  const Index HW = mask.size();
  for (Index c = 0; c < a.dim(0); ++c)
    for (Index p = 0; p < HW; ++p)
      if (mask[p] == 0 && a[c * HW + p] != b[c * HW + p]) return false;
  return true;
}

struct TinySetup {
  DenoiserConfig cfg;
  Denoiser<double> model;
  SamplerConfig sampler;
  NoiseSchedule sched;
};

TinySetup tiny_setup(int steps = 25) {
  DenoiserConfig cfg = attnpaint::testing::tiny_config();
  cfg.total_steps = steps;
  SamplerConfig s;
  s.steps = steps;
  s.painta_levels = {1, 2};
  return {cfg, Denoiser<double>(cfg, attnpaint::testing::randomised(cfg, 21)), s, s.schedule()};
}

}  // namespace

TEST_CASE("poisson blend of identical images is the target") {
  std::mt19937_64 rng(1);
  const Image img = random_image(rng, 3, 12, 10);
  PoissonReport rep;
  const Image out = poisson_blend(img, img, blob_mask(12, 10), &rep);
  CHECK((out.array() == img.array()).all());
  CHECK(rep.residual == 0.0);
}

TEST_CASE("poisson blend removes a constant offset") {
  std::mt19937_64 rng(2);
  const Image target = random_image(rng, 3, 12, 12, true);
  const Image source(target.shape(), target.array() + 0.25);
  const Image out = poisson_blend(source, target, blob_mask(12, 12));
  CHECK((out.array() == target.array()).all());
}

TEST_CASE("poisson blend matches a dense direct solve") {
  std::mt19937_64 rng(3);
  const Image source = random_image(rng, 3, 16, 16), target = random_image(rng, 3, 16, 16);
  const Mask mask = blob_mask(16, 16);
  PoissonReport rep;
  const Image out = poisson_blend(source, target, mask, &rep);
  const Image oracle = testing::dense_blend(source, target, mask);
  CHECK((out.array() - oracle.array()).abs().maxCoeff() <= 1e-6);
  CHECK(rep.residual <= 1e-8);
  CHECK(poisson_residual(out, source, mask) <= 1e-8);
  CHECK(known_region_equal(out, target, mask));
}

TEST_CASE("poisson blend edge cases") {
  std::mt19937_64 rng(4);
  const Image a = random_image(rng, 3, 6, 6), b = random_image(rng, 3, 6, 6);
  const Image same = poisson_blend(a, b, Mask::zeros({6, 6}));
  CHECK((same.array() == b.array()).all());
  CHECK_THROWS_AS(poisson_blend(a, b, Mask::constant({6, 6}, 1.0)), PoissonError);
  CHECK_THROWS_AS(poisson_blend(a, random_image(rng, 3, 6, 5), Mask::zeros({6, 6})), ShapeError);
  CHECK_THROWS_AS(poisson_blend(a, b, Mask::zeros({5, 6})), ShapeError);
  CHECK_THROWS_AS(poisson_blend(a, b, blob_mask(6, 6), nullptr, 1e-8, 1), PoissonError);
}

TEST_CASE("composite copies known pixels bit for bit") {
  std::mt19937_64 rng(5);
  const Image gen = random_image(rng, 3, 8, 8), orig = random_image(rng, 3, 8, 8);
  const Mask m = attnpaint::testing::square_mask(8, 2, 5);
  const Image out = composite(gen, orig, m);
  for (Index c = 0; c < 3; ++c)
    for (Index p = 0; p < 64; ++p) CHECK(out[c * 64 + p] == (m[p] != 0 ? gen[c * 64 + p] : orig[c * 64 + p]));
}

TEST_CASE("task validation") {
  std::mt19937_64 rng(6);
  InpaintTask task = tiny_task(rng, 8, "red circle", 1);
  CHECK_NOTHROW(validate_task(task));
  InpaintTask empty = task;
  empty.mask = Mask::zeros({8, 8});
  CHECK_THROWS(validate_task(empty));
  InpaintTask full = task;
  full.mask = Mask::constant({8, 8}, 1.0);
  CHECK_THROWS(validate_task(full));
  InpaintTask wrong = task;
  wrong.mask = Mask::zeros({8, 7});
  CHECK_THROWS(validate_task(wrong));
  InpaintTask soft = task;
  soft.mask = Mask::constant({8, 8}, 0.5);
  CHECK_THROWS(validate_task(soft));
}

TEST_CASE("sampler configuration") {
  SamplerConfig s;
  CHECK_NOTHROW(s.validate());
  CHECK(s.painta_active(50));
  CHECK(s.painta_active(26));
  CHECK(!s.painta_active(25));
  s.painta = false;
  CHECK(!s.painta_active(50));
  s.eta = 1.5;
  CHECK_THROWS(s.validate());
  s.eta = 0.1;
  s.painta_fraction = -0.1;
  CHECK_THROWS(s.validate());
  CHECK(parse_guidance("rasg") == GuidanceKind::Rasg);
  CHECK(guidance_name(parse_guidance("vanilla")) == "vanilla");
  CHECK_THROWS(parse_guidance("strong"));
}

TEST_CASE("every feature combination preserves the known region") {
  TinySetup s = tiny_setup();
  std::mt19937_64 rng(7);
  const std::vector<InpaintTask> tasks{tiny_task(rng, 8, "red circle", 1), tiny_task(rng, 8, "blue square", 2)};
  for (GuidanceKind g : {GuidanceKind::None, GuidanceKind::Rasg, GuidanceKind::Vanilla})
    for (bool painta : {false, true})
      for (bool blend : {false, true}) {
        CAPTURE(guidance_name(g));
        CAPTURE(painta);
        CAPTURE(blend);
        SamplerConfig c = s.sampler;
        c.guidance = g;
        c.painta = painta;
        c.blend_known = blend;
        const auto res = run_inpaint(tasks, s.model, s.sched, c);
        REQUIRE(res.size() == 2);
        for (std::size_t i = 0; i < 2; ++i) {
          CHECK(res[i].image.shape() == tasks[i].image.shape());
          CHECK(known_region_equal(res[i].image, tasks[i].image, tasks[i].mask));
          CHECK(res[i].image.array().allFinite());
          CHECK(res[i].diagnostics.latent_std.size() == 25);
          CHECK(res[i].diagnostics.objective.size() == (g == GuidanceKind::None ? 0u : 25u));
        }
      }
}

TEST_CASE("inpainting is deterministic per seed") {
  TinySetup s = tiny_setup();
  std::mt19937_64 rng(8);
  const InpaintTask task = tiny_task(rng, 8, "green triangle", 5);
  const auto a = run_inpaint(task, s.model, s.sched, s.sampler);
  const auto b = run_inpaint(task, s.model, s.sched, s.sampler);
  CHECK((a.image.array() == b.image.array()).all());
  CHECK(a.diagnostics.objective == b.diagnostics.objective);
  InpaintTask other = task;
  other.seed = 6;
  CHECK(!(run_inpaint(other, s.model, s.sched, s.sampler).image.array() == a.image.array()).all());
}

TEST_CASE("guidance applies only to the leading share of steps") {
  TinySetup s = tiny_setup();
  std::mt19937_64 rng(12);
  const InpaintTask task = tiny_task(rng, 8, "blue circle", 4);
  SamplerConfig none = s.sampler;
  none.guidance = GuidanceKind::None;
  SamplerConfig off = s.sampler;
  off.guidance_fraction = 0.0;
  const auto plain = run_inpaint(task, s.model, s.sched, none);
  const auto zero = run_inpaint(task, s.model, s.sched, off);
  CHECK((plain.image.array() == zero.image.array()).all());
  CHECK(zero.diagnostics.objective.empty());

  SamplerConfig half = s.sampler;
  half.guidance_fraction = 0.4;
  const auto part = run_inpaint(task, s.model, s.sched, half);
  CHECK(part.diagnostics.objective.size() == 10);
  CHECK(part.diagnostics.latent_std.size() == 25);
  CHECK(part.diagnostics.latent_std != plain.diagnostics.latent_std);

  half.guidance_fraction = 1.5;
  CHECK_THROWS(half.validate());
}

TEST_CASE("ungated deterministic run is plain deterministic inpainting") {
  TinySetup s = tiny_setup();
  SamplerConfig c = s.sampler;
  c.eta = 0;
  c.guidance = GuidanceKind::None;
  c.painta = false;
  c.blend_known = false;
  const NoiseSchedule sched = c.schedule();
  std::mt19937_64 rng(9);
  const InpaintTask task = tiny_task(rng, 8, "red square", 3);
  const auto res = run_inpaint(task, s.model, sched, c);

  // reference chain written directly against the denoiser and the step
  std::mt19937_64 noise(task.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::ArrayXd x(192);
  for (auto& v : x) v = nd(noise);
  DenoiserInputs<double> in;
  Eigen::ArrayXd known = task.image.array() * 2 - 1, masked = known;
  for (Index c3 = 0; c3 < 3; ++c3)
    for (Index p = 0; p < 64; ++p)
      if (task.mask[p] != 0) masked[c3 * 64 + p] = 0;
  in.masked_image = Tensor<double>({1, 3, 8, 8}, masked);
  in.mask = task.mask.with_shape({1, 1, 8, 8});
  const PromptTokens prompt = make_prompt(task.prompt, 8);
  in.prompt = s.model.encode_prompts({prompt});
  in.indices = {prompt.indices};
  Tensor<double> xt({1, 3, 8, 8}, x);
  for (int t = 25; t >= 1; --t) {
    in.x_t = xt;
    in.t = {t};
    const auto eps = s.model.predict_noise(in).eps;
    xt = ddim_step_deterministic(StepInput<double>{xt, t, eps, {}, {}}, sched);
  }
  Eigen::ArrayXd expect = ((xt.array() + 1) * 0.5).cwiseMax(0.0).cwiseMin(1.0);
  CHECK((res.generated.array() - expect).abs().maxCoeff() < 1e-12);
}

TEST_CASE("batched inpainting equals one task at a time") {
  TinySetup s = tiny_setup();
  std::mt19937_64 rng(10);
  const std::vector<InpaintTask> tasks{tiny_task(rng, 8, "red circle", 1), tiny_task(rng, 8, "blue square", 2),
                                       tiny_task(rng, 8, "triangle", 3)};
  const auto batch = run_inpaint(tasks, s.model, s.sched, s.sampler);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto one = run_inpaint(tasks[i], s.model, s.sched, s.sampler);
    CHECK((one.image.array() - batch[i].image.array()).abs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("attention records are kept per step on request") {
  TinySetup s = tiny_setup();
  SamplerConfig c = s.sampler;
  c.record_attention = true;
  c.guidance = GuidanceKind::None;
  std::mt19937_64 rng(11);
  const auto res = run_inpaint(tiny_task(rng, 8, "red circle", 1), s.model, s.sched, c);
  REQUIRE(res.diagnostics.records.size() == 25);
  CHECK(res.diagnostics.records[0].size() == 4);
  CHECK(res.diagnostics.records[0][0].step == 25);
  CHECK(res.diagnostics.records[0][1].alignment.has_value());
  CHECK(!res.diagnostics.records[24][1].alignment.has_value());  // rescaling off in the second half
}

TEST_CASE("poisson option keeps the known region") {
  TinySetup s = tiny_setup();
  SamplerConfig c = s.sampler;
  c.poisson = true;
  std::mt19937_64 rng(12);
  const InpaintTask task = tiny_task(rng, 8, "red circle", 1);
  const auto res = run_inpaint(task, s.model, s.sched, c);
  CHECK(known_region_equal(res.image, task.image, task.mask));
  CHECK(poisson_residual(res.image, res.generated, task.mask) <= 1e-8);
}

TEST_CASE("mismatched schedules are rejected") {
  TinySetup s = tiny_setup();
  std::mt19937_64 rng(13);
  const InpaintTask task = tiny_task(rng, 8, "red circle", 1);
  SamplerConfig c = s.sampler;
  c.steps = 30;
  CHECK_THROWS(run_inpaint(task, s.model, c.schedule(), c));
  CHECK_THROWS(run_inpaint(task, s.model, c.schedule(), s.sampler));
  CHECK_THROWS(run_inpaint(std::vector<InpaintTask>{}, s.model, s.sched, s.sampler));
}

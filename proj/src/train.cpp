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

#include "attnpaint/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace attnpaint {

namespace {

constexpr double kPi = 3.14159265358979323846;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool coin(std::mt19937_64& rng, double p) { return std::bernoulli_distribution(p)(rng); }

std::size_t pick(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

int absent_label(std::mt19937_64& rng, const Scene& scene) {
  std::vector<int> free;
  for (int c = 0; c < kShapeClasses; ++c) {
    bool seen = false;
    for (const auto& s : scene.shapes) seen |= s.label() == c;
    if (!seen) free.push_back(c);
  }
  return free[pick(rng, free.size())];
}

std::vector<int> side_prompt(std::mt19937_64& rng, const TrainingMix& mix, const Scene& scene) {
  const double u = uniform(rng, 0, 1);
  if (u < mix.absent_prompt) return class_words(absent_label(rng, scene));
  if (u < mix.absent_prompt + mix.caption_prompt && !scene.shapes.empty()) return scene_caption(rng, scene);
  return {};
}

}  // namespace

std::vector<int> scene_caption(std::mt19937_64& rng, const Scene& scene) {
  if (scene.shapes.empty()) return {};
  std::vector<std::size_t> order(scene.shapes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n = std::min<std::size_t>(order.size(), coin(rng, 0.5) ? 1 : 2);
  std::vector<int> words;
  for (std::size_t k = 0; k < n; ++k) {
    if (k) words.push_back(vocab::id("and"));
    for (int w : class_words(scene.shapes[order[k]].label())) words.push_back(w);
  }
  return words;
}

TrainingExample make_training_example(std::mt19937_64& rng, const TrainingMix& mix, Index size) {
  TrainingExample ex;
  const double total = mix.full + mix.object + mix.background + mix.partial;
  for (;;) {
    Scene scene = random_scene(rng);
    const double u = uniform(rng, 0, total);
    if (u < mix.full) {
      ex.image = render(scene, size);
      ex.mask = Mask::constant({size, size}, 1.0);
      ex.words = scene_caption(rng, scene);
      ex.kind = "full";
    } else if (u < mix.full + mix.object) {
      if (scene.shapes.empty()) continue;
      const auto& s = scene.shapes[pick(rng, scene.shapes.size())];
      const Mask inst = instance_mask(s, size);
      if (mask_count(inst) == 0) continue;
      ex.image = render(scene, size);
      ex.mask = coin(rng, 0.5) ? convex_hull(inst) : box_mask(size, dilate(bounding_box(inst), 1, size));
      ex.words = class_words(s.label());
      ex.kind = "object";
    } else if (u < mix.full + mix.object + mix.background) {
      InpaintTask task;
      if (!make_neglect_task(rng, scene, size, coin(rng, 0.5), task)) continue;
      ex.image = task.image;
      ex.mask = task.mask;
      // the planned object is not drawn; its label is one of the absent ones
      const double v = uniform(rng, 0, 1);
      if (v < mix.absent_prompt)
        ex.words = task.prompt;
      else if (v < mix.absent_prompt + mix.caption_prompt)
        ex.words = scene_caption(rng, scene);
      ex.kind = "background";
    } else {
      if (scene.shapes.empty()) continue;
      const auto& s = scene.shapes[pick(rng, scene.shapes.size())];
      const Box bb = bounding_box(instance_mask(s, size));
      if (bb.empty()) continue;
      const double ang = uniform(rng, 0, 2 * kPi);
      const double reach = uniform(rng, 0.5, 0.9) * bb.width();
      const double bx = (bb.x0 + bb.x1) / 2.0 + reach * std::cos(ang), by = (bb.y0 + bb.y1) / 2.0 + reach * std::sin(ang);
      const Index w = bb.width() + 2, h = bb.height() + 2;
      Box box{static_cast<Index>(std::lround(bx - w / 2.0)), static_cast<Index>(std::lround(by - h / 2.0)), 0, 0};
      box.x0 = std::clamp<Index>(box.x0, 0, size - w);
      box.y0 = std::clamp<Index>(box.y0, 0, size - h);
      box.x1 = box.x0 + w;
      box.y1 = box.y0 + h;
      ex.image = render(scene, size);
      ex.mask = box_mask(size, box);
      ex.words = side_prompt(rng, mix, scene);
      ex.kind = "partial";
    }
    if (coin(rng, mix.drop_prompt)) ex.words.clear();
    return ex;
  }
}

double lr_multiplier(long step, const TrainConfig& cfg) {
  if (step < cfg.warmup) return (step + 1.0) / cfg.warmup;
  const double span = std::max<long>(1, cfg.steps - cfg.warmup);
  const double p = std::min(1.0, (step - cfg.warmup) / span);
  return cfg.final_lr_fraction + (1 - cfg.final_lr_fraction) * 0.5 * (1 + std::cos(kPi * p));
}

Tensor<float> to_model_space(const std::vector<Image>& images) {
  const Index N = static_cast<Index>(images.size());
  const Shape s = images.front().shape();
  Eigen::ArrayXf v(N * numel(s));
  for (Index n = 0; n < N; ++n) {
    if (images[n].shape() != s) throw ShapeError("to_model_space", images[n].shape(), s);
    v.segment(n * numel(s), numel(s)) = (images[n].array() * 2.0 - 1.0).cast<float>();
  }
  Shape out{N};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor<float>(out, v);
}

Image from_model_space(const Tensor<double>& batch, Index index) {
  const Index per = batch.size() / batch.dim(0);
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  return Image(s, (batch.array().segment(index * per, per) + 1.0) * 0.5);
}

DenoiserBatch make_denoiser_batch(std::mt19937_64& rng, const TrainConfig& cfg, const DenoiserConfig& model,
                                  const NoiseSchedule& sched) {
  DenoiserBatch b;
  std::vector<Image> images, masks;
  std::uniform_int_distribution<int> step(1, sched.steps());
  for (Index i = 0; i < cfg.batch; ++i) {
    TrainingExample ex = make_training_example(rng, cfg.mix, cfg.image_size);
    images.push_back(ex.image);
    masks.push_back(ex.mask.with_shape({1, cfg.image_size, cfg.image_size}));
    b.prompts.push_back(make_prompt(ex.words, model.prompt_length));
    b.t.push_back(step(rng));
  }
  b.x0 = to_model_space(images);
  Eigen::ArrayXf m(cfg.batch * cfg.image_size * cfg.image_size);
  for (Index i = 0; i < cfg.batch; ++i) m.segment(i * masks[i].size(), masks[i].size()) = masks[i].array().cast<float>();
  b.mask = Tensor<float>(Shape{cfg.batch, 1, cfg.image_size, cfg.image_size}, m);
  std::normal_distribution<float> nd(0.f, 1.f);
  Eigen::ArrayXf z(b.x0.size());
  for (auto& v : z) v = nd(rng);
  b.noise = Tensor<float>(b.x0.shape(), z);
  return b;
}

double denoiser_loss(const DenoiserConfig& model, const ParameterSet<float>& params, const DenoiserBatch& b,
                     const NoiseSchedule& sched, std::vector<Eigen::ArrayXf>* grads) {
  const Index N = b.x0.dim(0), per = b.x0.size() / N;
  Eigen::ArrayXf xt(b.x0.size());
  for (Index n = 0; n < N; ++n) {
    const double a = sched.alpha_bar(b.t[n]);
    xt.segment(n * per, per) =
        float(std::sqrt(a)) * b.x0.array().segment(n * per, per) + float(std::sqrt(1 - a)) * b.noise.array().segment(n * per, per);
  }
  const Index C = b.x0.dim(1), HW = per / C;
  Eigen::ArrayXf masked = b.x0.array();
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      masked.segment((n * C + c) * HW, HW) *= 1.f - b.mask.array().segment(n * HW, HW);

  auto run = [&](const ParameterSet<float>& p) {
    Denoiser<float> net(model, p);
    DenoiserInputs<float> in{Tensor<float>(b.x0.shape(), xt), b.t, Tensor<float>(b.x0.shape(), masked), b.mask,
                             net.encode_prompts(b.prompts), {}};
    Tensor<float> diff = net.predict_noise(in).eps - b.noise;
    return mean(diff * diff);
  };
  if (grads == nullptr) return run(params).item();
  Tape<float> tape;
  ParameterSet<float> leaves = params.on_tape(tape);
  Tensor<float> loss = run(leaves);
  Gradients<float> g = tape.backward(loss);
  grads->clear();
  for (const auto& v : leaves.values()) grads->push_back(g.of(v).array());
  return loss.item();
}

ParameterSet<double> train_denoiser(const DenoiserConfig& model, const TrainConfig& cfg, const NoiseSchedule& sched,
                                    const ProgressFn& progress, const std::optional<ParameterSet<double>>& init) {
  ParameterSet<double> master = init ? *init : init_denoiser(model, cfg.seed);
  // meta tensors are configuration, not weights
  ParameterSet<float> trainable, meta;
  for (std::size_t i = 0; i < master.size(); ++i) {
    const auto& name = master.names()[i];
    (name.rfind("meta.", 0) == 0 ? meta : trainable).add(name, master.values()[i].cast<float>());
  }
  Adam<float> opt(cfg.adam);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto start = std::chrono::steady_clock::now();
  double window = 0, last_norm = 0;
  int window_n = 0;
  auto snapshot = [&] {
    ParameterSet<double> out;
    for (std::size_t i = 0; i < meta.size(); ++i) out.add(meta.names()[i], meta.values()[i].cast<double>());
    for (std::size_t i = 0; i < trainable.size(); ++i) out.add(trainable.names()[i], trainable.values()[i].cast<double>());
    return out;
  };
  for (long step = 0; step < cfg.steps; ++step) {
    DenoiserBatch batch = make_denoiser_batch(rng, cfg, model, sched);
    ParameterSet<float> all = trainable;
    for (std::size_t i = 0; i < meta.size(); ++i) all.add(meta.names()[i], meta.values()[i]);
    std::vector<Eigen::ArrayXf> grads;
    const double loss = denoiser_loss(model, all, batch, sched, &grads);
    if (!std::isfinite(loss))
      throw DivergenceError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) +
                            ", last gradient norm " + std::to_string(last_norm) + ")");
    grads.resize(trainable.size());
    last_norm = opt.step(trainable, grads, lr_multiplier(step, cfg));
    window += loss;
    ++window_n;
    const bool log = cfg.log_every > 0 && (step + 1) % cfg.log_every == 0;
    const bool ckpt = cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0;
    if (progress && (log || ckpt || step + 1 == cfg.steps)) {
      TrainProgress p{step + 1, window / std::max(1, window_n), last_norm,
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
      if (ckpt) {
        ParameterSet<double> snap = snapshot();
        progress(p, &snap);
      } else {
        progress(p, nullptr);
      }
      window = 0;
      window_n = 0;
    }
  }
  return snapshot();
}

double validation_loss(const DenoiserConfig& model, const ParameterSet<double>& params, const TrainConfig& cfg,
                       const NoiseSchedule& sched, std::uint64_t seed, int batches) {
  std::mt19937_64 rng(seed);
  const ParameterSet<float> p = params.cast<float>();
  double total = 0;
  for (int i = 0; i < batches; ++i) total += denoiser_loss(model, p, make_denoiser_batch(rng, cfg, model, sched), sched, nullptr);
  return total / batches;
}

}  // namespace attnpaint

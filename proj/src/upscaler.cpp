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

#include "attnpaint/upscaler.hpp"

#include "attnpaint/train.hpp"

#include <chrono>

namespace attnpaint {

ParameterSet<double> init_upscaler(const UpscalerConfig& cfg, std::uint64_t seed) {
  using namespace layers;
  if (cfg.channels.empty()) throw std::invalid_argument("upscaler needs at least one level");
  Initializer init(seed);
  ParameterSet<double> p;
  cfg.store(p);
  const Index L = static_cast<Index>(cfg.channels.size());
  add_linear(p, init, "time.fc1", cfg.time_features, cfg.time_dim);
  add_linear(p, init, "time.fc2", cfg.time_dim, cfg.time_dim);
  add_conv(p, init, "in", cfg.input_channels(), cfg.channels[0], 3);
  for (Index l = 0; l < L; ++l) {
    add_resblock(p, init, "enc" + std::to_string(l), cfg.channels[l], cfg.channels[l], cfg.time_dim);
    if (l + 1 < L) add_conv(p, init, "down" + std::to_string(l), cfg.channels[l], cfg.channels[l + 1], 3);
  }
  add_resblock(p, init, "mid", cfg.channels[L - 1], cfg.channels[L - 1], cfg.time_dim);
  for (Index l = L - 1; l >= 0; --l) {
    add_resblock(p, init, "dec" + std::to_string(l), 2 * cfg.channels[l], cfg.channels[l], cfg.time_dim);
    if (l > 0) add_conv(p, init, "up" + std::to_string(l), cfg.channels[l], cfg.channels[l - 1], 3);
  }
  add_norm(p, init, "out.norm", cfg.channels[0]);
  add_zero_conv(p, "out", cfg.channels[0], cfg.image_channels, 3);
  return p;
}

Image upsample_nearest(const Image& low, Index factor) {
  if (low.rank() != 3 || factor < 1) throw ShapeError("upsample_nearest", low.shape(), Shape{-1, -1, -1});
  const Index C = low.dim(0), h = low.dim(1), w = low.dim(2), H = h * factor, W = w * factor;
  Eigen::ArrayXd out(C * H * W);
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) out[(c * H + y) * W + x] = low[(c * h + y / factor) * w + x / factor];
  return Image({C, H, W}, out);
}

UpscalePool make_upscale_pool(std::uint64_t seed, int pool, Index high_size) {
  if (pool < 1) throw std::invalid_argument("upscale pool must hold at least one scene");
  std::mt19937_64 rng(seed);
  UpscalePool out;
  for (int i = 0; i < pool; ++i) {
    const Scene scene = random_scene(rng);
    out.high.push_back(render(scene, high_size));
    out.low.push_back(downscale(out.high.back(), kUpscaleFactor));
  }
  return out;
}

UpscaleBatch make_upscale_batch(std::mt19937_64& rng, const UpscalePool& pool, const UpscaleTrainConfig& cfg,
                                const NoiseSchedule& sched) {
  if (cfg.crop % kUpscaleFactor || cfg.crop > cfg.high_size)
    throw std::invalid_argument("upscale crop must be a multiple of the factor and fit the image");
  const Index C = 3, crop = cfg.crop, N = cfg.batch;
  std::uniform_int_distribution<std::size_t> pick(0, pool.high.size() - 1);
  std::uniform_int_distribution<Index> offset(0, (cfg.high_size - crop) / kUpscaleFactor);
  std::uniform_int_distribution<int> step(1, sched.steps()), coin(0, 1);
  std::normal_distribution<float> nd(0.f, 1.f);
  Eigen::ArrayXf x0(N * C * crop * crop), cond(N * C * crop * crop), z(N * C * crop * crop);
  UpscaleBatch b;
  for (Index n = 0; n < N; ++n) {
    const std::size_t k = pick(rng);
    const Index oy = offset(rng), ox = offset(rng);
    const bool flip = coin(rng) == 1;
    const Image& hi = pool.high[k];
    const Image& lo = pool.low[k];
    const Index Hh = hi.dim(1), Wh = hi.dim(2), Wl = lo.dim(2), Hl = lo.dim(1);
    for (Index c = 0; c < C; ++c)
      for (Index y = 0; y < crop; ++y)
        for (Index x = 0; x < crop; ++x) {
          const Index xs = flip ? crop - 1 - x : x;
          const Index i = ((n * C + c) * crop + y) * crop + x;
          const Index hy = oy * kUpscaleFactor + y, hx = ox * kUpscaleFactor + xs;
          x0[i] = float(hi[(c * Hh + hy) * Wh + hx] * 2 - 1);
          const Index ly = oy + y / kUpscaleFactor, lx = ox + xs / kUpscaleFactor;
          cond[i] = float(lo[(c * Hl + ly) * Wl + lx] * 2 - 1);
        }
    b.t.push_back(step(rng));
  }
  for (auto& v : z) v = nd(rng);
  const Shape s{N, C, crop, crop};
  b.x0 = Tensor<float>(s, x0);
  b.condition = Tensor<float>(s, cond);
  b.noise = Tensor<float>(s, z);
  return b;
}

double upscaler_loss(const UpscalerConfig& model, const ParameterSet<float>& params, const UpscaleBatch& b,
                     const NoiseSchedule& sched, std::vector<Eigen::ArrayXf>* grads) {
  const Index N = b.x0.dim(0), per = b.x0.size() / N;
  Eigen::ArrayXf xt(b.x0.size());
  for (Index n = 0; n < N; ++n) {
    const double a = sched.alpha_bar(b.t[n]);
    xt.segment(n * per, per) = float(std::sqrt(a)) * b.x0.array().segment(n * per, per) +
                               float(std::sqrt(1 - a)) * b.noise.array().segment(n * per, per);
  }
  auto run = [&](const ParameterSet<float>& p) {
    Upscaler<float> net(model, p);
    Tensor<float> diff = net.predict_noise(Tensor<float>(b.x0.shape(), xt), b.t, b.condition) - b.noise;
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

ParameterSet<double> train_upscaler(const UpscalerConfig& model, const UpscaleTrainConfig& cfg,
                                    const NoiseSchedule& sched, const UpscaleProgressFn& progress) {
  ParameterSet<double> master = init_upscaler(model, cfg.seed);
  ParameterSet<float> trainable, meta;
  for (std::size_t i = 0; i < master.size(); ++i) {
    const auto& name = master.names()[i];
    (name.rfind("meta.", 0) == 0 ? meta : trainable).add(name, master.values()[i].cast<float>());
  }
  const UpscalePool pool = make_upscale_pool(cfg.seed, cfg.pool, cfg.high_size);
  TrainConfig lr;
  lr.steps = cfg.steps;
  lr.warmup = cfg.warmup;
  lr.final_lr_fraction = cfg.final_lr_fraction;
  Adam<float> opt(cfg.adam);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto start = std::chrono::steady_clock::now();
  auto snapshot = [&] {
    ParameterSet<double> out;
    for (std::size_t i = 0; i < meta.size(); ++i) out.add(meta.names()[i], meta.values()[i].cast<double>());
    for (std::size_t i = 0; i < trainable.size(); ++i) out.add(trainable.names()[i], trainable.values()[i].cast<double>());
    return out;
  };
  double window = 0;
  int window_n = 0;
  for (long step = 0; step < cfg.steps; ++step) {
    const UpscaleBatch batch = make_upscale_batch(rng, pool, cfg, sched);
    std::vector<Eigen::ArrayXf> grads;
    const double loss = upscaler_loss(model, trainable, batch, sched, &grads);
    if (!std::isfinite(loss)) throw DivergenceError("upscaler training diverged at step " + std::to_string(step));
    const double norm = opt.step(trainable, grads, lr_multiplier(step, lr));
    window += loss;
    ++window_n;
    const bool log = cfg.log_every > 0 && (step + 1) % cfg.log_every == 0;
    const bool ckpt = cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0;
    if (progress && (log || ckpt || step + 1 == cfg.steps)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (ckpt) {
        const ParameterSet<double> snap = snapshot();
        progress(step + 1, window / window_n, norm, secs, &snap);
      } else {
        progress(step + 1, window / window_n, norm, secs, nullptr);
      }
      window = 0;
      window_n = 0;
    }
  }
  return snapshot();
}

}  // namespace attnpaint

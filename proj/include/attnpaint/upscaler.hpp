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

// Stage-2 4x super-resolution for inpainting: a convolutional denoiser
// conditioned on the upsampled low-resolution result, with the known part
// of every clean estimate replaced by the original image.

#pragma once

#include "attnpaint/data.hpp"
#include "attnpaint/denoiser.hpp"
#include "attnpaint/inpaint.hpp"
#include "attnpaint/schedule.hpp"

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace attnpaint {

inline constexpr Index kUpscaleFactor = 4;

struct UpscalerConfig {
  Index image_channels = 3;
  std::vector<Index> channels{24, 48, 64};
  Index groups = 8;
  Index time_features = 64;
  Index time_dim = 128;
  int total_steps = 50;

  Index input_channels() const { return 2 * image_channels; }

  void store(ParameterSet<double>& p) const {
    Eigen::ArrayXd ch(static_cast<Index>(channels.size()));
    for (std::size_t i = 0; i < channels.size(); ++i) ch[static_cast<Index>(i)] = double(channels[i]);
    p.set("meta.up.channels", Tensor<double>(Shape{ch.size()}, ch));
    p.set("meta.up.dims", Tensor<double>::of({5}, {double(image_channels), double(groups), double(time_features),
                                                   double(time_dim), double(total_steps)}));
  }

  static UpscalerConfig load(const ParameterSet<double>& p) {
    if (p.empty()) throw std::invalid_argument("upscaler checkpoint holds no tensors");
    if (!p.contains("meta.up.dims")) throw std::invalid_argument("checkpoint is not an upscaler (no meta.up.dims)");
    UpscalerConfig c;
    const Tensor<double>& ch = p["meta.up.channels"];
    c.channels.clear();
    for (Index i = 0; i < ch.size(); ++i) c.channels.push_back(static_cast<Index>(ch[i]));
    const Tensor<double>& d = p["meta.up.dims"];
    if (d.size() != 5) throw std::invalid_argument("meta.up.dims must hold 5 values");
    c.image_channels = static_cast<Index>(d[0]);
    c.groups = static_cast<Index>(d[1]);
    c.time_features = static_cast<Index>(d[2]);
    c.time_dim = static_cast<Index>(d[3]);
    c.total_steps = static_cast<int>(d[4]);
    return c;
  }
};

ParameterSet<double> init_upscaler(const UpscalerConfig& cfg, std::uint64_t seed);

/// Noise predictor eps([X_t, up(low)], t) without attention.
template <typename S>
class Upscaler {
 public:
  Upscaler(UpscalerConfig cfg, ParameterSet<S> params) : cfg_(std::move(cfg)), p_(std::move(params)) {
    if (p_.empty()) throw std::invalid_argument("upscaler: empty weight set");
    if (p_["in.w"].dim(1) != cfg_.input_channels())
      throw ShapeError("upscaler input head expects " + std::to_string(p_["in.w"].dim(1)) + " channels, config gives " +
                       std::to_string(cfg_.input_channels()));
  }

  const UpscalerConfig& config() const { return cfg_; }
  const ParameterSet<S>& params() const { return p_; }

  /// `condition` is the low-resolution image already upsampled to x_t's size.
  Tensor<S> predict_noise(const Tensor<S>& x_t, const std::vector<int>& t, const Tensor<S>& condition) const {
    using namespace layers;
    if (x_t.rank() != 4 || x_t.dim(1) != cfg_.image_channels)
      throw ShapeError("upscaler(x_t)", x_t.shape(), Shape{-1, cfg_.image_channels, -1, -1});
    if (condition.shape() != x_t.shape()) throw ShapeError("upscaler(condition)", condition.shape(), x_t.shape());
    if (static_cast<Index>(t.size()) != x_t.dim(0)) throw std::invalid_argument("upscaler: one step per sample");
    const Index L = static_cast<Index>(cfg_.channels.size());
    if (x_t.dim(2) % (Index(1) << (L - 1)) || x_t.dim(3) % (Index(1) << (L - 1)))
      throw ShapeError("upscaler: spatial size must be divisible by " + std::to_string(1 << (L - 1)));
    Tensor<S> temb = timestep_features<S>(t, cfg_.total_steps, cfg_.time_features);
    temb = silu(linear(p_, "time.fc2", silu(linear(p_, "time.fc1", temb))));
    Tensor<S> h = conv(p_, "in", concat<S>({x_t, condition}, 1));
    std::vector<Tensor<S>> skips;
    for (Index l = 0; l < L; ++l) {
      h = resblock(p_, "enc" + std::to_string(l), h, temb, cfg_.groups);
      skips.push_back(h);
      if (l + 1 < L) h = conv(p_, "down" + std::to_string(l), h, 2);
    }
    h = resblock(p_, "mid", h, temb, cfg_.groups);
    for (Index l = L - 1; l >= 0; --l) {
      h = resblock(p_, "dec" + std::to_string(l), concat<S>({h, skips[l]}, 1), temb, cfg_.groups);
      if (l > 0) h = conv(p_, "up" + std::to_string(l), resize_nearest(h, 2 * h.dim(2), 2 * h.dim(3)));
    }
    return conv(p_, "out", silu(norm(p_, "out.norm", h, cfg_.groups)));
  }

 private:
  UpscalerConfig cfg_;
  ParameterSet<S> p_;
};

/// Keeps the prediction where the mask is set and the known clean image
/// elsewhere. The mask is [H, W] or [N, 1, H, W] and broadcasts over
/// channels.
template <typename S>
Tensor<S> upscale_step_blend(const Tensor<S>& prediction, const Tensor<S>& known, const Tensor<S>& mask) {
  if (prediction.shape() != known.shape()) throw ShapeError("upscale_step_blend", prediction.shape(), known.shape());
  if (prediction.rank() != 4) throw ShapeError("upscale_step_blend expects [N, C, H, W]");
  const Index N = known.dim(0), C = known.dim(1), HW = known.dim(2) * known.dim(3);
  const bool shared = mask.shape() == Shape{known.dim(2), known.dim(3)};
  if (!shared && mask.shape() != Shape{N, 1, known.dim(2), known.dim(3)})
    throw ShapeError("upscale_step_blend(mask)", mask.shape(), Shape{N, 1, known.dim(2), known.dim(3)});
  typename Tensor<S>::Array out = known.array();
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index p = 0; p < HW; ++p) {
        const Index i = (n * C + c) * HW + p;
        if (mask[shared ? p : n * HW + p] != 0) out[i] = prediction[i];
      }
  return Tensor<S>(known.shape(), std::move(out));
}

struct UpscaleOptions {
  std::uint64_t seed = 0;
  bool blend_known = true;  // per-step clean-estimate blending
  bool poisson = true;      // final gradient-domain composite
};

struct UpscaleResult {
  Image image;      // final result; equals the input outside the mask
  Image generated;  // decoded final sample before compositing
  std::vector<double> latent_std;
  std::string message;
};

/// eps(x_t, t) for a single [1, C, H, W] latent.
template <typename S>
using NoisePredictor = std::function<Tensor<S>(const Tensor<S>& x_t, int t)>;

/// Deterministic reverse chain at full resolution with per-step blending.
/// Independent of the network so the chain can be checked with stubs.
template <typename S>
UpscaleResult upscale_chain(const Image& high, const Mask& mask, const NoisePredictor<S>& eps_fn,
                            const NoiseSchedule& sched, const UpscaleOptions& opt) {
  if (high.rank() != 3) throw ShapeError("upscale image", high.shape(), Shape{3, -1, -1});
  const Index C = high.dim(0), H = high.dim(1), W = high.dim(2);
  if (mask.shape() != Shape{H, W}) throw ShapeError("upscale mask", mask.shape(), Shape{H, W});
  UpscaleResult res;
  if (mask_count(mask) == 0) {
    res.image = high;
    res.generated = high;
    res.message = "empty mask: image returned unchanged";
    return res;
  }
  const Shape shape{1, C, H, W};
  const Tensor<S> known(shape, (high.array() * 2.0 - 1.0).template cast<S>());
  const Tensor<S> hole(Shape{H, W}, mask.array().template cast<S>());
  std::mt19937_64 rng(opt.seed);
  Tensor<S> x(shape, detail::normal_array<S>(rng, C * H * W));
  for (int t = sched.steps(); t >= 1; --t) {
    const Tensor<S> eps = eps_fn(x, t);
    if (!eps.array().allFinite()) throw NonFiniteLatent("upscaler noise prediction is not finite at t=" + std::to_string(t));
    Tensor<S> x0 = predict_x0(x, eps, t, sched);
    if (opt.blend_known) x0 = upscale_step_blend(x0, known, hole);
    x = ddim_from_x0<S>(x0, eps, t, 0.0, nullptr, sched);
    res.latent_std.push_back(population_std(x));
  }
  Eigen::ArrayXd v = ((x.array().template cast<double>() + 1.0) * 0.5).cwiseMax(0.0).cwiseMin(1.0);
  res.generated = Image(high.shape(), v);
  res.image = composite(res.generated, high, mask);
  if (opt.poisson) {
    PoissonReport rep;
    res.image = poisson_blend(res.generated, high, mask, &rep);
    res.message = "poisson: " + std::to_string(rep.iterations) + " iterations, residual " + std::to_string(rep.residual);
  }
  return res;
}

/// Nearest-neighbour upsampling of a [C, h, w] image by `factor`.
Image upsample_nearest(const Image& low, Index factor);

/// Inpainting-aware 4x upscale of `low` (the stage-1 result) guided by the
/// original high-resolution image outside `mask`.
template <typename S>
UpscaleResult run_upscale(const Image& high, const Image& low, const Mask& mask, const Upscaler<S>& model,
                          const NoiseSchedule& sched, const UpscaleOptions& opt = {}) {
  if (low.rank() != 3 || high.rank() != 3 || low.dim(0) != high.dim(0))
    throw ShapeError("run_upscale", low.shape(), high.shape());
  if (low.dim(1) * kUpscaleFactor != high.dim(1) || low.dim(2) * kUpscaleFactor != high.dim(2))
    throw std::invalid_argument("run_upscale: resolution ratio must be exactly " + std::to_string(kUpscaleFactor) +
                                " (got " + std::to_string(low.dim(1)) + "x" + std::to_string(low.dim(2)) + " -> " +
                                std::to_string(high.dim(1)) + "x" + std::to_string(high.dim(2)) + ")");
  if (sched.steps() != model.config().total_steps)
    throw std::invalid_argument("run_upscale: model was trained on a " + std::to_string(model.config().total_steps) +
                                "-step grid");
  const Image up = upsample_nearest(low, kUpscaleFactor);
  const Tensor<S> cond(Shape{1, high.dim(0), high.dim(1), high.dim(2)}, (up.array() * 2.0 - 1.0).template cast<S>());
  NoisePredictor<S> eps_fn = [&](const Tensor<S>& x, int t) { return model.predict_noise(x, {t}, cond); };
  return upscale_chain<S>(high, mask, eps_fn, sched, opt);
}

// ---------------------------------------------------------------------------
// Training

struct UpscaleTrainConfig {
  long steps = 4000;
  Index batch = 16;
  Index crop = 32;          // high-resolution crop side
  Index high_size = 128;
  int pool = 400;           // pre-rendered scenes to crop from
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 0.0, 1.0};
  long warmup = 100;
  double final_lr_fraction = 0.1;
  std::uint64_t seed = 2;
  int log_every = 100;
  int checkpoint_every = 1000;
};

struct UpscaleBatch {
  Tensor<float> x0, condition, noise;  // [N, C, crop, crop] in [-1, 1]
  std::vector<int> t;
};

/// Renders `pool` random scenes at high resolution with their 4x-downscaled
/// counterparts.
struct UpscalePool {
  std::vector<Image> high, low;
};
UpscalePool make_upscale_pool(std::uint64_t seed, int pool, Index high_size);

UpscaleBatch make_upscale_batch(std::mt19937_64& rng, const UpscalePool& pool, const UpscaleTrainConfig& cfg,
                                const NoiseSchedule& sched);

double upscaler_loss(const UpscalerConfig& model, const ParameterSet<float>& params, const UpscaleBatch& batch,
                     const NoiseSchedule& sched, std::vector<Eigen::ArrayXf>* grads);

using UpscaleProgressFn = std::function<void(long step, double loss, double grad_norm, double seconds,
                                             const ParameterSet<double>* checkpoint)>;

ParameterSet<double> train_upscaler(const UpscalerConfig& model, const UpscaleTrainConfig& cfg,
                                    const NoiseSchedule& sched, const UpscaleProgressFn& progress = {});

}  // namespace attnpaint

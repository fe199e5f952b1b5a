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

// Inpainting noise predictor: a small conv encoder-decoder with
// self/cross-attention blocks at the coarse levels, plus the building blocks
// shared with the upscaler.

#pragma once

#include "attnpaint/attention.hpp"
#include "attnpaint/params.hpp"
#include "attnpaint/prompt.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace attnpaint {

// ---------------------------------------------------------------------------
// Layers over a ParameterSet. Names follow "<prefix>.w" / "<prefix>.b".

namespace layers {

template <typename S>
Tensor<S> conv(const ParameterSet<S>& p, const std::string& name, const Tensor<S>& x, Index stride = 1) {
  const Tensor<S>& w = p[name + ".w"];
  return conv2d(x, w, p[name + ".b"], stride, w.dim(2) / 2);
}

template <typename S>
Tensor<S> linear(const ParameterSet<S>& p, const std::string& name, const Tensor<S>& x) {
  return matmul(x, p[name + ".w"]) + p[name + ".b"];
}

template <typename S>
Tensor<S> norm(const ParameterSet<S>& p, const std::string& name, const Tensor<S>& x, Index groups) {
  return group_norm(x, groups, p[name + ".g"], p[name + ".b"]);
}

/// [N, C, H, W] <-> [N, HW, C]
template <typename S>
Tensor<S> to_tokens(const Tensor<S>& x) {
  return transpose(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}));
}

template <typename S>
Tensor<S> from_tokens(const Tensor<S>& t, Index h, Index w) {
  return reshape(transpose(t), {t.dim(0), t.dim(2), h, w});
}

/// Sinusoidal features of integer steps, [N, dim]. Steps are rescaled to a
/// 1000-step grid so the frequencies do not depend on T.
template <typename S>
Tensor<S> timestep_features(const std::vector<int>& t, int total_steps, Index dim) {
  const Index N = static_cast<Index>(t.size()), half = dim / 2;
  typename Tensor<S>::Array v(N * dim);
  for (Index n = 0; n < N; ++n) {
    const double pos = t[n] * 1000.0 / total_steps;
    for (Index k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(10000.0) * k / half);
      v[n * dim + k] = S(std::sin(pos * f));
      v[n * dim + half + k] = S(std::cos(pos * f));
    }
  }
  return Tensor<S>(Shape{N, dim}, std::move(v));
}

inline void add_conv(ParameterSet<double>& p, Initializer& init, const std::string& name, Index in, Index out,
                     Index k, double gain = 1.0) {
  p.add(name + ".w", init.normal({out, in, k, k}, in * k * k, gain));
  p.add(name + ".b", init.zeros({out}));
}

inline void add_zero_conv(ParameterSet<double>& p, const std::string& name, Index in, Index out, Index k) {
  p.add(name + ".w", Tensor<double>::zeros({out, in, k, k}));
  p.add(name + ".b", Tensor<double>::zeros({out}));
}

inline void add_linear(ParameterSet<double>& p, Initializer& init, const std::string& name, Index in, Index out) {
  p.add(name + ".w", init.normal({in, out}, in));
  p.add(name + ".b", init.zeros({out}));
}

inline void add_norm(ParameterSet<double>& p, Initializer& init, const std::string& name, Index channels) {
  p.add(name + ".g", init.ones({channels}));
  p.add(name + ".b", init.zeros({channels}));
}

/// Pre-activation residual block with an additive timestep projection.
inline void add_resblock(ParameterSet<double>& p, Initializer& init, const std::string& name, Index in, Index out,
                         Index time_dim) {
  add_norm(p, init, name + ".norm1", in);
  add_conv(p, init, name + ".conv1", in, out, 3);
  add_linear(p, init, name + ".time", time_dim, out);
  add_norm(p, init, name + ".norm2", out);
  add_conv(p, init, name + ".conv2", out, out, 3, 0.5);
  if (in != out) add_conv(p, init, name + ".skip", in, out, 1);
}

template <typename S>
Tensor<S> resblock(const ParameterSet<S>& p, const std::string& name, const Tensor<S>& x, const Tensor<S>& temb,
                   Index groups) {
  Tensor<S> h = conv(p, name + ".conv1", silu(norm(p, name + ".norm1", x, groups)));
  Tensor<S> tp = linear(p, name + ".time", temb);
  h = h + reshape(tp, {tp.dim(0), tp.dim(1), 1, 1});
  h = conv(p, name + ".conv2", silu(norm(p, name + ".norm2", h, groups)));
  const Tensor<S> skip = p.contains(name + ".skip.w") ? conv(p, name + ".skip", x) : x;
  return skip + h;
}

}  // namespace layers

// ---------------------------------------------------------------------------

struct DenoiserConfig {
  Index image_channels = 3;
  std::vector<Index> channels{32, 48, 64, 64};  // per level; level k runs at H / 2^k
  std::vector<int> attention_levels{2, 3};
  Index groups = 8;
  Index time_features = 64;
  Index time_dim = 128;
  Index text_dim = 32;
  Index prompt_length = 8;
  int total_steps = 50;  // T used for the timestep grid

  Index input_channels() const { return 2 * image_channels + 1; }
  bool has_attention(int level) const {
    for (int l : attention_levels)
      if (l == level) return true;
    return false;
  }

  /// Stored alongside the weights as "meta.*" tensors.
  void store(ParameterSet<double>& p) const {
    auto vec = [](const std::vector<double>& v) {
      Eigen::ArrayXd a(static_cast<Index>(v.size()));
      for (std::size_t i = 0; i < v.size(); ++i) a[static_cast<Index>(i)] = v[i];
      return Tensor<double>(Shape{static_cast<Index>(v.size())}, a);
    };
    std::vector<double> ch(channels.begin(), channels.end()), at(attention_levels.begin(), attention_levels.end());
    p.set("meta.channels", vec(ch));
    p.set("meta.attention_levels", vec(at));
    p.set("meta.dims", vec({double(image_channels), double(groups), double(time_features), double(time_dim),
                            double(text_dim), double(prompt_length), double(total_steps)}));
  }

  template <typename S>
  static DenoiserConfig load(const ParameterSet<S>& p) {
    if (p.empty()) throw std::invalid_argument("denoiser checkpoint holds no tensors");
    DenoiserConfig c;
    const auto& ch = p["meta.channels"];
    const auto& at = p["meta.attention_levels"];
    const auto& d = p["meta.dims"];
    if (d.size() != 7) throw std::invalid_argument("denoiser checkpoint: malformed meta.dims");
    c.channels.clear();
    for (Index i = 0; i < ch.size(); ++i) c.channels.push_back(static_cast<Index>(ch[i]));
    c.attention_levels.clear();
    for (Index i = 0; i < at.size(); ++i) c.attention_levels.push_back(static_cast<int>(at[i]));
    c.image_channels = static_cast<Index>(d[0]);
    c.groups = static_cast<Index>(d[1]);
    c.time_features = static_cast<Index>(d[2]);
    c.time_dim = static_cast<Index>(d[3]);
    c.text_dim = static_cast<Index>(d[4]);
    c.prompt_length = static_cast<Index>(d[5]);
    c.total_steps = static_cast<int>(d[6]);
    return c;
  }
};

/// Where and how the rescaled self-attention replaces the plain one.
struct PaintaSettings {
  bool enabled = false;
  std::vector<int> levels{2, 3};
  AlignmentMax max_mode = AlignmentMax::Raw;
  bool force_unit_alignment = false;

  bool active_at(int level) const {
    if (!enabled) return false;
    for (int l : levels)
      if (l == level) return true;
    return false;
  }
};

template <typename S>
struct DenoiserInputs {
  Tensor<S> x_t;           // [N, C, H, W]
  std::vector<int> t;      // one step per sample
  Tensor<S> masked_image;  // [N, C, H, W], zero inside the mask
  Tensor<S> mask;          // [N, 1, H, W], 1 = unknown
  Tensor<S> prompt;        // [N, l, d_text] from encode_prompts
  std::vector<PromptIndexSet> indices;
};

template <typename S>
struct DenoiserOutput {
  Tensor<S> eps;
  std::vector<AttentionRecord<S>> records;
};

inline ParameterSet<double> init_denoiser(const DenoiserConfig& cfg, std::uint64_t seed) {
  using namespace layers;
  if (cfg.channels.empty()) throw std::invalid_argument("denoiser needs at least one level");
  Initializer init(seed);
  ParameterSet<double> p;
  cfg.store(p);
  const Index C = cfg.image_channels, L = static_cast<Index>(cfg.channels.size());
  init_prompt_encoder(p, init, cfg.text_dim, cfg.prompt_length);
  add_linear(p, init, "time.fc1", cfg.time_features, cfg.time_dim);
  add_linear(p, init, "time.fc2", cfg.time_dim, cfg.time_dim);

  // conditioning channels start at zero so the noisy-input path is unchanged
  add_conv(p, init, "in", cfg.input_channels(), cfg.channels[0], 3);
  {
    Eigen::ArrayXd w = p["in.w"].array();
    const Index in = cfg.input_channels();
    for (Index o = 0; o < cfg.channels[0]; ++o)
      for (Index c = C; c < in; ++c) w.segment((o * in + c) * 9, 9).setZero();
    p.set("in.w", Tensor<double>(p["in.w"].shape(), w));
  }

  auto add_attention = [&](const std::string& name, Index ch) {
    add_norm(p, init, name + ".norm1", ch);
    p.add(name + ".self.q", init.normal({ch, ch}, ch));
    p.add(name + ".self.k", init.normal({ch, ch}, ch));
    p.add(name + ".self.v", init.normal({ch, ch}, ch, 0.5));
    add_norm(p, init, name + ".norm2", ch);
    p.add(name + ".cross.q", init.normal({ch, ch}, ch));
    p.add(name + ".cross.k", init.normal({cfg.text_dim, ch}, cfg.text_dim));
    p.add(name + ".cross.v", init.normal({cfg.text_dim, ch}, cfg.text_dim));
    p.add(name + ".cross.o", init.normal({ch, ch}, ch, 0.5));
  };

  for (Index l = 0; l < L; ++l) {
    const Index in = l == 0 ? cfg.channels[0] : cfg.channels[l];
    add_resblock(p, init, "enc" + std::to_string(l), in, cfg.channels[l], cfg.time_dim);
    if (cfg.has_attention(int(l))) add_attention("enc" + std::to_string(l) + ".attn", cfg.channels[l]);
    if (l + 1 < L) add_conv(p, init, "down" + std::to_string(l), cfg.channels[l], cfg.channels[l + 1], 3);
  }
  add_resblock(p, init, "mid", cfg.channels[L - 1], cfg.channels[L - 1], cfg.time_dim);
  for (Index l = L - 1; l >= 0; --l) {
    add_resblock(p, init, "dec" + std::to_string(l), 2 * cfg.channels[l], cfg.channels[l], cfg.time_dim);
    if (cfg.has_attention(int(l))) add_attention("dec" + std::to_string(l) + ".attn", cfg.channels[l]);
    if (l > 0) add_conv(p, init, "up" + std::to_string(l), cfg.channels[l], cfg.channels[l - 1], 3);
  }
  add_norm(p, init, "out.norm", cfg.channels[0]);
  add_zero_conv(p, "out", cfg.channels[0], C, 3);
  return p;
}

/// Noise predictor eps([x_t, masked image, mask], t, prompt).
template <typename S>
class Denoiser {
 public:
  Denoiser(DenoiserConfig cfg, ParameterSet<S> params) : cfg_(std::move(cfg)), p_(std::move(params)) {
    if (p_.empty()) throw std::invalid_argument("denoiser: empty weight set");
    const Tensor<S>& w = p_["in.w"];
    if (w.dim(1) != cfg_.input_channels())
      throw ShapeError("denoiser input head expects " + std::to_string(w.dim(1)) + " channels, config gives " +
                       std::to_string(cfg_.input_channels()));
  }

  const DenoiserConfig& config() const { return cfg_; }
  const ParameterSet<S>& params() const { return p_; }

  Tensor<S> encode_prompts(const std::vector<PromptTokens>& prompts) const {
    return attnpaint::encode_prompts(p_, prompts);
  }

  DenoiserOutput<S> predict_noise(const DenoiserInputs<S>& in, const PaintaSettings& painta = {},
                                  bool record = false) const {
    using namespace layers;
    const Index N = in.x_t.dim(0), C = cfg_.image_channels;
    if (in.x_t.rank() != 4 || in.x_t.dim(1) != C)
      throw ShapeError("predict_noise(x_t)", in.x_t.shape(), Shape{N, C, -1, -1});
    const Index H = in.x_t.dim(2), W = in.x_t.dim(3);
    if (in.masked_image.shape() != in.x_t.shape())
      throw ShapeError("predict_noise(masked image)", in.masked_image.shape(), in.x_t.shape());
    if (in.mask.shape() != Shape{N, 1, H, W}) throw ShapeError("predict_noise(mask)", in.mask.shape(), Shape{N, 1, H, W});
    if (static_cast<Index>(in.t.size()) != N) throw std::invalid_argument("predict_noise: one step per sample");
    if (in.prompt.rank() != 3 || in.prompt.dim(0) != N)
      throw ShapeError("predict_noise(prompt)", in.prompt.shape(), Shape{N, cfg_.prompt_length, cfg_.text_dim});
    const Index L = static_cast<Index>(cfg_.channels.size());
    if (H % (Index(1) << (L - 1)) || W % (Index(1) << (L - 1)))
      throw ShapeError("predict_noise: spatial size must be divisible by " + std::to_string(1 << (L - 1)));
    for (int t : in.t)
      if (t < 1 || t > cfg_.total_steps) throw std::invalid_argument("predict_noise: step " + std::to_string(t));
    if (painta.enabled && static_cast<Index>(in.indices.size()) != N)
      throw std::invalid_argument("predict_noise: rescaled attention needs one prompt index set per sample");

    DenoiserOutput<S> out;
    Tensor<S> temb = timestep_features<S>(in.t, cfg_.total_steps, cfg_.time_features);
    temb = linear(p_, "time.fc2", silu(linear(p_, "time.fc1", temb)));
    const Tensor<S> temb_act = silu(temb);

    int layer_id = 0;
    auto attention = [&](const std::string& name, const Tensor<S>& h, int level) {
      const Index hh = h.dim(2), ww = h.dim(3);
      const Tensor<S> tokens = to_tokens(h);
      const Tensor<S> normed = to_tokens(norm(p_, name + ".norm1", h, cfg_.groups));
      SelfAttentionWeights<S> sw{p_[name + ".self.q"], p_[name + ".self.k"], p_[name + ".self.v"]};
      CrossAttentionWeights<S> cw{p_[name + ".cross.q"], p_[name + ".cross.k"], p_[name + ".cross.v"],
                                  p_[name + ".cross.o"]};
      std::optional<Tensor<S>> level_mask;
      PaintaInputs<S> pin;
      const bool rescale = painta.active_at(level);
      if (rescale) {
        level_mask = resize_nearest(in.mask.detach(), hh, ww).with_shape({N, hh * ww});
        pin = {&*level_mask, &in.prompt, &in.indices, &cw, painta.max_mode, painta.force_unit_alignment};
      }
      SelfAttentionOutput<S> sa = self_attention(tokens, normed, sw, rescale ? &pin : nullptr);
      const Tensor<S> mid = from_tokens(sa.out, hh, ww);
      const Tensor<S> q_in = to_tokens(norm(p_, name + ".norm2", mid, cfg_.groups));
      auto [crossed, probs] = cross_attention(sa.out, q_in, in.prompt, cw);
      if (record) {
        AttentionRecord<S> r;
        r.layer = layer_id;
        r.height = hh;
        r.width = ww;
        r.step = in.t.front();
        r.self_scores = sa.scores;
        r.self_scores_used = sa.scores_used;
        r.cross_probs = probs;
        r.alignment = sa.alignment;
        out.records.push_back(std::move(r));
      }
      ++layer_id;
      return from_tokens(crossed, hh, ww);
    };

    Tensor<S> h = conv(p_, "in", concat<S>({in.x_t, in.masked_image, in.mask}, 1));
    std::vector<Tensor<S>> skips;
    for (Index l = 0; l < L; ++l) {
      const std::string name = "enc" + std::to_string(l);
      h = resblock(p_, name, h, temb_act, cfg_.groups);
      if (cfg_.has_attention(int(l))) h = attention(name + ".attn", h, int(l));
      skips.push_back(h);
      if (l + 1 < L) h = conv(p_, "down" + std::to_string(l), h, 2);
    }
    h = resblock(p_, "mid", h, temb_act, cfg_.groups);
    for (Index l = L - 1; l >= 0; --l) {
      const std::string name = "dec" + std::to_string(l);
      h = resblock(p_, name, concat<S>({h, skips[l]}, 1), temb_act, cfg_.groups);
      if (cfg_.has_attention(int(l))) h = attention(name + ".attn", h, int(l));
      if (l > 0) h = conv(p_, "up" + std::to_string(l), resize_nearest(h, 2 * h.dim(2), 2 * h.dim(3)));
    }
    out.eps = conv(p_, "out", silu(norm(p_, "out.norm", h, cfg_.groups)));
    return out;
  }

 private:
  DenoiserConfig cfg_;
  ParameterSet<S> p_;
};

}  // namespace attnpaint

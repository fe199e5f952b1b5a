// Test-only helpers: a small denoiser and matching random inputs.

#pragma once

#include "attnpaint/data.hpp"
#include "attnpaint/denoiser.hpp"

#include <random>
#include <string>
#include <vector>

namespace attnpaint::testing {

inline DenoiserConfig tiny_config() {
  DenoiserConfig cfg;
  cfg.channels = {8, 16, 16};
  cfg.attention_levels = {1, 2};
  cfg.groups = 4;
  cfg.time_features = 16;
  cfg.time_dim = 32;
  cfg.text_dim = 8;
  cfg.prompt_length = 8;
  cfg.total_steps = 50;
  return cfg;
}

/// Every weight drawn at random, including the zero-initialised heads, so
/// that all paths carry signal.
inline ParameterSet<double> randomised(const DenoiserConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  ParameterSet<double> p = init_denoiser(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, scale);
  for (const auto& name : p.names()) {
    if (name.rfind("meta.", 0) == 0 || name.rfind("text.", 0) == 0) continue;
    if (name == "out.w" || name == "out.b" || name == "in.w") {
      Eigen::ArrayXd v = p[name].array();
      for (auto& x : v) x += n(rng);
      p.set(name, Tensor<double>(p[name].shape(), v));
    }
  }
  return p;
}

/// Square mask covering rows/cols [lo, hi).
inline Mask square_mask(Index size, Index lo, Index hi) {
  Mask m = Mask::zeros({size, size});
  Eigen::ArrayXd v = m.array();
  for (Index y = lo; y < hi; ++y)
    for (Index x = lo; x < hi; ++x) v[y * size + x] = 1;
  return Mask({size, size}, v);
}

struct TinyBatch {
  DenoiserInputs<double> in;
  std::vector<Mask> masks;
};

inline TinyBatch tiny_batch(const Denoiser<double>& model, std::uint64_t seed, Index N, Index size,
                            const std::vector<std::string>& prompts) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  const Index C = model.config().image_channels;
  TinyBatch b;
  Eigen::ArrayXd x(N * C * size * size), img(N * C * size * size), mk(N * size * size);
  std::vector<PromptTokens> tokens;
  for (Index i = 0; i < N; ++i) {
    const Index lo = 1 + i % 3, hi = lo + size / 2;
    b.masks.push_back(square_mask(size, lo, hi));
    mk.segment(i * size * size, size * size) = b.masks.back().array();
    tokens.push_back(make_prompt(prompts[i % prompts.size()], model.config().prompt_length));
    b.in.indices.push_back(tokens.back().indices);
    b.in.t.push_back(10 + 7 * static_cast<int>(i));
  }
  for (auto& v : x) v = n(rng);
  for (Index i = 0; i < N; ++i)
    for (Index c = 0; c < C; ++c)
      for (Index p = 0; p < size * size; ++p) {
        const Index k = (i * C + c) * size * size + p;
        img[k] = mk[i * size * size + p] != 0 ? 0.0 : std::tanh(n(rng));
      }
  b.in.x_t = Tensor<double>({N, C, size, size}, x);
  b.in.masked_image = Tensor<double>({N, C, size, size}, img);
  b.in.mask = Tensor<double>({N, 1, size, size}, mk);
  b.in.prompt = model.encode_prompts(tokens);
  return b;
}

}  // namespace attnpaint::testing

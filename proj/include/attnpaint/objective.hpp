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

// Guidance energies over cross-attention maps and their gradient with
// respect to the noisy input.

#pragma once

#include "attnpaint/data.hpp"
#include "attnpaint/denoiser.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace attnpaint {

enum class ObjectiveKind { Bce, Max };

inline ObjectiveKind parse_objective(const std::string& s) {
  if (s == "bce") return ObjectiveKind::Bce;
  if (s == "max") return ObjectiveKind::Max;
  throw std::invalid_argument("unknown objective '" + s + "' (bce, max)");
}

inline std::string objective_name(ObjectiveKind k) { return k == ObjectiveKind::Bce ? "bce" : "max"; }

/// Cross-attention probabilities averaged over the layers of one resolution.
template <typename S>
struct AggregatedAttention {
  Tensor<S> maps;  // [N, hw, l]; column k of sample n is token k's map
  int layers = 0;
  Index height = 0, width = 0;

  /// Token k's map for one sample as [h, w].
  Tensor<S> token_map(Index sample, Index k) const {
    const Index hw = height * width, l = maps.dim(2);
    typename Tensor<S>::Array v(hw);
    for (Index i = 0; i < hw; ++i) v[i] = maps[(sample * hw + i) * l + k];
    return Tensor<S>(Shape{height, width}, v);
  }
};

/// Averages the cross-attention of every record at the coarsest resolution
/// present (or at `height` x `width` when given).
template <typename S>
AggregatedAttention<S> aggregate_cross_attention(const std::vector<AttentionRecord<S>>& records, Index height = -1,
                                                 Index width = -1) {
  if (records.empty()) throw std::invalid_argument("aggregate_cross_attention: no attention records");
  if (height < 0) {
    Index best = std::numeric_limits<Index>::max();
    for (const auto& r : records)
      if (r.height * r.width < best) {
        best = r.height * r.width;
        height = r.height;
        width = r.width;
      }
  }
  AggregatedAttention<S> out;
  out.height = height;
  out.width = width;
  std::optional<Tensor<S>> acc;
  for (const auto& r : records) {
    if (r.height != height || r.width != width) continue;
    acc = acc ? *acc + r.cross_probs : r.cross_probs;
    ++out.layers;
  }
  if (out.layers == 0)
    throw std::invalid_argument("aggregate_cross_attention: no records at " + std::to_string(height) + "x" +
                                std::to_string(width));
  out.maps = out.layers == 1 ? *acc : *acc * S(1.0 / out.layers);
  return out;
}

/// Nearest-neighbour downscale of a full-resolution mask to map resolution.
/// A mask that vanishes is dilated at full resolution until it shows up,
/// unless `dilate_if_empty` is off, in which case it is an error.
inline Mask objective_mask(const Mask& mask, Index height, Index width, bool dilate_if_empty = true) {
  if (mask_count(mask) == 0) throw std::invalid_argument("objective mask is empty");
  if (height != width) throw std::invalid_argument("objective_mask: square maps only");
  Mask grown = mask, small = resize_mask(mask, height);
  while (mask_count(small) == 0) {
    if (!dilate_if_empty)
      throw std::invalid_argument("mask vanishes at " + std::to_string(height) + "x" + std::to_string(width) +
                                  "; dilate the mask");
    grown = dilate(grown);
    small = resize_mask(grown, height);
  }
  return small;
}

namespace detail {

/// [N, 1, l] weights: 1 at each sample's prompt positions.
template <typename S>
Tensor<S> token_selection(const std::vector<PromptIndexSet>& inds, Index l, bool average) {
  const Index N = static_cast<Index>(inds.size());
  typename Tensor<S>::Array w = Tensor<S>::Array::Zero(N * l);
  for (Index n = 0; n < N; ++n) {
    inds[n].validate();
    if (inds[n].length != l) throw std::invalid_argument("prompt index set length does not match the maps");
    for (Index k : inds[n].positions) w[n * l + k] = average ? S(1.0 / inds[n].positions.size()) : S(1);
  }
  return Tensor<S>(Shape{N, 1, l}, w);
}

template <typename S>
void check_masks(const AggregatedAttention<S>& a, const Tensor<S>& masks, std::size_t n_inds) {
  const Index N = a.maps.dim(0), hw = a.height * a.width;
  if (masks.shape() != Shape{N, hw}) throw ShapeError("objective(mask)", masks.shape(), Shape{N, hw});
  if (static_cast<Index>(n_inds) != N) throw std::invalid_argument("objective: one prompt index set per sample");
}

}  // namespace detail

/// Sum over prompt tokens and map pixels of BCE(sigmoid(map), mask), summed
/// over the batch. `masks` is [N, hw] at map resolution.
template <typename S>
Tensor<S> bce_objective(const AggregatedAttention<S>& a, const Tensor<S>& masks, const std::vector<PromptIndexSet>& inds) {
  detail::check_masks(a, masks, inds.size());
  const Index N = a.maps.dim(0), hw = a.height * a.width, l = a.maps.dim(2);
  // BCE(sigmoid(x), target) = log(1 + e^x) - target * x; maps are probabilities so e^x stays small
  const Tensor<S> target = masks.detach().with_shape({N, hw, 1});
  const Tensor<S> per = log(exp(a.maps) + S(1)) - a.maps * target;
  return sum(per * detail::token_selection<S>(inds, l, false));
}

/// -(1/|ind|) sum_k max over masked pixels of token k's map, summed over the
/// batch. Lies in [-1, 0] per sample.
template <typename S>
Tensor<S> max_objective(const AggregatedAttention<S>& a, const Tensor<S>& masks, const std::vector<PromptIndexSet>& inds) {
  detail::check_masks(a, masks, inds.size());
  const Index N = a.maps.dim(0), hw = a.height * a.width, l = a.maps.dim(2);
  for (Index n = 0; n < N; ++n)
    if ((masks.array().segment(n * hw, hw) != 0).count() == 0)
      throw std::invalid_argument("max objective: mask vanishes at map resolution; dilate the mask");
  typename Tensor<S>::Array cond(N * hw * l);
  for (Index n = 0; n < N; ++n)
    for (Index i = 0; i < hw; ++i) cond.segment((n * hw + i) * l, l).setConstant(masks[n * hw + i] != 0 ? S(1) : S(0));
  const Tensor<S> floor = Tensor<S>::constant({N, hw, l}, S(-1));
  const Tensor<S> peak = max(where(Tensor<S>(Shape{N, hw, l}, cond), a.maps, floor), 1, true);  // [N, 1, l]
  return -sum(peak * detail::token_selection<S>(inds, l, true));
}

template <typename S>
struct ObjectiveResult {
  double value = 0;          // objective summed over the batch
  std::vector<double> per_sample;
  Tensor<S> grad;            // d value / d x_t, shaped like x_t
  Tensor<S> eps;             // noise prediction from the same forward pass
  std::vector<AttentionRecord<S>> records;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs the denoiser on a fresh tape with x_t as the only leaf, evaluates the
/// objective on the coarsest cross-attention maps and differentiates it.
/// `masks` are full-resolution [N, H, W] inpainting masks.
template <typename S>
ObjectiveResult<S> objective_gradient(const Denoiser<S>& model, const DenoiserInputs<S>& in,
                                      const PaintaSettings& painta, ObjectiveKind kind,
                                      const std::vector<Mask>& masks) {
  Tape<S> tape;
  DenoiserInputs<S> taped = in;
  taped.x_t = tape.leaf(in.x_t.detach());
  DenoiserOutput<S> out = model.predict_noise(taped, painta, true);
  AggregatedAttention<S> agg = aggregate_cross_attention(out.records);
  const Index N = in.x_t.dim(0), hw = agg.height * agg.width;
  if (static_cast<Index>(masks.size()) != N) throw std::invalid_argument("objective_gradient: one mask per sample");
  typename Tensor<S>::Array mv(N * hw);
  for (Index n = 0; n < N; ++n)
    mv.segment(n * hw, hw) = objective_mask(masks[n], agg.height, agg.width).array().template cast<S>();
  const Tensor<S> small(Shape{N, hw}, mv);
  ObjectiveResult<S> res;
  // per-sample values, then their sum as the differentiated loss
  Tensor<S> total = Tensor<S>::scalar(S(0));
  for (Index n = 0; n < N; ++n) {
    AggregatedAttention<S> one = agg;
    one.maps = slice(agg.maps, 0, n, 1);
    const Tensor<S> mask_n = slice(small, 0, n, 1);
    const std::vector<PromptIndexSet> ind_n{in.indices.at(n)};
    Tensor<S> value = kind == ObjectiveKind::Bce ? bce_objective(one, mask_n, ind_n) : max_objective(one, mask_n, ind_n);
    res.per_sample.push_back(static_cast<double>(value.item()));
    total = total + value;
  }
  res.value = static_cast<double>(total.item());
  Gradients<S> g = tape.backward(total);
  res.grad = g.of(taped.x_t).detach();
  if (!res.grad.array().allFinite() || !std::isfinite(res.value))
    throw NonFiniteGradient("guidance objective produced a non-finite value or gradient");
  res.eps = out.eps.detach();
  for (auto& r : out.records) {
    r.self_scores = r.self_scores.detach();
    r.self_scores_used = r.self_scores_used.detach();
    r.cross_probs = r.cross_probs.detach();
  }
  res.records = std::move(out.records);
  return res;
}

// ---------------------------------------------------------------------------

struct GradientStatistics {
  double mean = 0, std = 0;
  double lo = 0, hi = 0;             // histogram range
  std::vector<long> counts;          // 64 bins, or 1 for a constant tensor
};

template <typename S>
GradientStatistics gradient_statistics(const Tensor<S>& t, int bins = 64) {
  if (t.size() == 0) throw std::invalid_argument("gradient_statistics: empty tensor");
  GradientStatistics st;
  const Eigen::ArrayXd v = t.array().template cast<double>();
  st.mean = v.mean();
  st.std = std::sqrt((v - st.mean).square().mean());
  st.lo = v.minCoeff();
  st.hi = v.maxCoeff();
  if (!(st.hi > st.lo)) {
    st.counts = {static_cast<long>(v.size())};
    return st;
  }
  st.counts.assign(bins, 0);
  const double w = (st.hi - st.lo) / bins;
  for (double x : v) {
    int b = static_cast<int>((x - st.lo) / w);
    st.counts[std::clamp(b, 0, bins - 1)] += 1;
  }
  return st;
}

}  // namespace attnpaint

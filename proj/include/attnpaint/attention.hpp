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

// Self- and cross-attention, and the prompt-aware rescaling of self-attention
// scores that keeps known pixels unrelated to the prompt from dominating the
// masked region.

#pragma once

#include "attnpaint/ops.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

namespace attnpaint {

/// Positions of the prompt's word tokens plus the end-of-text token.
/// Start-of-text (position 0) and padding are never included.
struct PromptIndexSet {
  Index length = 0;              // token sequence length l
  std::vector<Index> positions;  // 0-based, strictly increasing

  void validate() const {
    if (positions.empty()) throw std::invalid_argument("prompt index set is empty");
    for (std::size_t i = 0; i < positions.size(); ++i) {
      if (positions[i] <= 0 || positions[i] >= length)
        throw std::invalid_argument("prompt index " + std::to_string(positions[i]) + " outside [1, " +
                                    std::to_string(length) + ")");
      if (i && positions[i] <= positions[i - 1]) throw std::invalid_argument("prompt indices must increase");
    }
  }
};

/// How the alignment scores are scaled after median subtraction.
enum class AlignmentMax {
  Raw,         // divide by max of the raw scores
  Subtracted,  // divide by max of the median-subtracted scores
};

/// One attention layer's scores for a batch at one sampling step.
template <typename S>
struct AttentionRecord {
  int layer = 0;
  Index height = 0, width = 0;
  int step = 0;
  Tensor<S> self_scores;       // [N, hw, hw] raw Q K^T / sqrt(d)
  Tensor<S> self_scores_used;  // [N, hw, hw] after rescaling (== self_scores when off)
  Tensor<S> cross_probs;       // [N, hw, l] row-softmaxed, may live on a tape
  std::optional<Tensor<S>> alignment;  // [N, hw] normalised c, when rescaling ran
};

// ---------------------------------------------------------------------------
// Alignment scores

/// Per-pixel attention mass on the prompt positions, for every row of a
/// [..., hw, l] cross-attention matrix.
template <typename S>
Tensor<S> compute_alignment_scores(const Tensor<S>& cross_probs, const PromptIndexSet& ind) {
  ind.validate();
  if (cross_probs.rank() < 2 || cross_probs.dim(-1) != ind.length)
    throw ShapeError("compute_alignment_scores: cross matrix " + to_string(cross_probs.shape()) +
                     " does not have l=" + std::to_string(ind.length) + " columns");
  const Index l = ind.length, rows = cross_probs.size() / l;
  typename Tensor<S>::Array mass = Tensor<S>::Array::Zero(rows);
  for (Index r = 0; r < rows; ++r)
    for (Index k : ind.positions) mass[r] += cross_probs[r * l + k];
  Shape out(cross_probs.shape().begin(), cross_probs.shape().end() - 1);
  return Tensor<S>(out, std::move(mass));
}

/// Median; the mean of the two middle values for even counts.
template <typename S>
S median(std::vector<S> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  S hi = v[mid];
  if (v.size() % 2) return hi;
  S lo = *std::max_element(v.begin(), v.begin() + mid);
  return (lo + hi) / S(2);
}

/// Scores shifted by their median, divided by their max and clipped to [0, 1]
/// over the last axis.
template <typename S>
Tensor<S> normalize_alignment(const Tensor<S>& raw, AlignmentMax mode = AlignmentMax::Raw,
                              std::vector<std::string>* diag = nullptr) {
  if (raw.size() == 0 || raw.rank() == 0) throw std::invalid_argument("normalize_alignment: empty scores");
  const Index n = raw.dim(-1), groups = raw.size() / n;
  typename Tensor<S>::Array out(raw.size());
  for (Index g = 0; g < groups; ++g) {
    std::vector<S> v(raw.data() + g * n, raw.data() + (g + 1) * n);
    const S med = median(v);
    S mx = *std::max_element(v.begin(), v.end());
    if (mode == AlignmentMax::Subtracted) mx -= med;
    if (!(mx >= S(1e-12))) {
      if (diag) diag->push_back("normalize_alignment: max below 1e-12, scores zeroed");
      out.segment(g * n, n).setZero();
      continue;
    }
    for (Index j = 0; j < n; ++j) out[g * n + j] = std::clamp((v[j] - med) / mx, S(0), S(1));
  }
  return Tensor<S>(raw.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Score rescaling

/// Multiplicative factor: entry (i, j) is the alignment of pixel j when pixel i
/// is masked and pixel j is known, 1 otherwise. `alignment` and `mask` are
/// [..., hw]; the factor is [..., hw, hw].
template <typename S>
Tensor<S> rescale_factor(const Tensor<S>& alignment, const Tensor<S>& mask) {
  if (alignment.shape() != mask.shape()) throw ShapeError("rescale_factor", alignment.shape(), mask.shape());
  const Index n = alignment.dim(-1), groups = alignment.size() / n;
  typename Tensor<S>::Array f = Tensor<S>::Array::Ones(groups * n * n);
  for (Index g = 0; g < groups; ++g)
    for (Index i = 0; i < n; ++i) {
      if (mask[g * n + i] == S(0)) continue;
      for (Index j = 0; j < n; ++j)
        if (mask[g * n + j] == S(0)) f[(g * n + i) * n + j] = alignment[g * n + j];
    }
  Shape shape = alignment.shape();
  shape.push_back(n);
  return Tensor<S>(shape, std::move(f));
}

/// Rescaled similarity matrix. Entries outside (masked row, known column)
/// are returned bit-identical.
template <typename S>
Tensor<S> painta_scores(const Tensor<S>& self_scores, const Tensor<S>& alignment, const Tensor<S>& mask) {
  const Index n = alignment.dim(-1);
  Shape expect = alignment.shape();
  expect.push_back(n);
  if (self_scores.shape() != expect) throw ShapeError("painta_scores", self_scores.shape(), expect);
  if (mask.shape() != alignment.shape()) throw ShapeError("painta_scores", mask.shape(), alignment.shape());
  typename Tensor<S>::Array out = self_scores.array();
  const Index groups = alignment.size() / n;
  for (Index g = 0; g < groups; ++g)
    for (Index i = 0; i < n; ++i) {
      if (mask[g * n + i] == S(0)) continue;
      for (Index j = 0; j < n; ++j)
        if (mask[g * n + j] == S(0)) out[(g * n + i) * n + j] = alignment[g * n + j] * self_scores[(g * n + i) * n + j];
    }
  return Tensor<S>(self_scores.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Attention layers on token matrices [N, hw, d]

template <typename S>
struct SelfAttentionWeights {
  Tensor<S> query, key, value;  // [d, d]
};

template <typename S>
struct CrossAttentionWeights {
  Tensor<S> query;  // [d, d]
  Tensor<S> key;    // [d_text, d]
  Tensor<S> value;  // [d_text, d]
  Tensor<S> out;    // [d, d]
};

/// What the rescaled self-attention needs besides its own weights.
template <typename S>
struct PaintaInputs {
  const Tensor<S>* mask = nullptr;                        // [N, hw], 1 = unknown
  const Tensor<S>* prompt = nullptr;                      // [N, l, d_text]
  const std::vector<PromptIndexSet>* indices = nullptr;   // one per sample
  const CrossAttentionWeights<S>* borrowed = nullptr;     // next cross-attention module
  AlignmentMax max_mode = AlignmentMax::Raw;
  bool force_unit_alignment = false;                      // debug: c = 1 everywhere
};

template <typename S>
struct SelfAttentionOutput {
  Tensor<S> out;
  Tensor<S> scores, scores_used;
  std::optional<Tensor<S>> alignment;
};

/// Row-softmaxed Q_c K_c^T / sqrt(d) for token features and prompt embeddings.
template <typename S>
Tensor<S> cross_probabilities(const Tensor<S>& x, const Tensor<S>& prompt, const Tensor<S>& wq, const Tensor<S>& wk) {
  const Index d = wq.dim(-1);
  Tensor<S> q = matmul(x, wq);
  Tensor<S> k = matmul(prompt, wk);
  return softmax(matmul(q, transpose(k)) * S(1.0 / std::sqrt(static_cast<double>(d))));
}

/// residual + softmax(A~) V where A = Q K^T / sqrt(d) is computed from `x`.
/// With `painta` set, A is rescaled column-wise on (masked, known) pairs by
/// the normalised prompt alignment of the known pixel. The alignment itself
/// is treated as a constant in the gradient.
template <typename S>
SelfAttentionOutput<S> self_attention(const Tensor<S>& residual, const Tensor<S>& x, const SelfAttentionWeights<S>& w,
                                      const PaintaInputs<S>* painta = nullptr) {
  if (x.rank() != 3 || residual.shape() != x.shape()) throw ShapeError("self_attention", residual.shape(), x.shape());
  const Index d = w.query.dim(-1);
  Tensor<S> q = matmul(x, w.query), k = matmul(x, w.key), v = matmul(x, w.value);
  Tensor<S> scores = matmul(q, transpose(k)) * S(1.0 / std::sqrt(static_cast<double>(d)));
  SelfAttentionOutput<S> res{residual, scores, scores, std::nullopt};
  if (painta != nullptr) {
    if (painta->borrowed == nullptr)
      throw std::invalid_argument("painta: borrowed cross-attention projections are missing");
    if (painta->mask == nullptr || painta->prompt == nullptr || painta->indices == nullptr)
      throw std::invalid_argument("painta: mask, prompt and indices are required");
    const Index N = x.dim(0), hw = x.dim(1);
    if (painta->mask->shape() != Shape{N, hw}) throw ShapeError("painta(mask)", painta->mask->shape(), Shape{N, hw});
    Tensor<S> alignment;
    if (painta->force_unit_alignment) {
      alignment = Tensor<S>::constant({N, hw}, S(1));
    } else {
      Tensor<S> probs = cross_probabilities(x.detach(), painta->prompt->detach(), painta->borrowed->query.detach(),
                                            painta->borrowed->key.detach());
      const Index l = probs.dim(-1);
      typename Tensor<S>::Array all(N * hw);
      for (Index n = 0; n < N; ++n) {
        Tensor<S> pn(Shape{hw, l}, probs.array().segment(n * hw * l, hw * l));
        Tensor<S> raw = compute_alignment_scores(pn, (*painta->indices)[n]);
        all.segment(n * hw, hw) = normalize_alignment(raw, painta->max_mode).array();
      }
      alignment = Tensor<S>(Shape{N, hw}, std::move(all));
    }
    res.scores_used = scores * rescale_factor(alignment, *painta->mask);
    res.alignment = alignment;
  }
  res.out = residual + matmul(softmax(res.scores_used), v);
  return res;
}

/// Output of the rescaled layer for a single [hw, d] input with its own
/// projections: X + softmax(A~) V.
template <typename S>
Tensor<S> painta_forward(const Tensor<S>& x, const Tensor<S>& prompt, const Tensor<S>& mask,
                         const PromptIndexSet& ind, const SelfAttentionWeights<S>& w,
                         const CrossAttentionWeights<std::type_identity_t<S>>* borrowed, AlignmentMax mode = AlignmentMax::Raw) {
  if (x.rank() != 2) throw ShapeError("painta_forward: X must be [hw, d], got " + to_string(x.shape()));
  const Index hw = x.dim(0), d = x.dim(1);
  if (mask.size() != hw) throw ShapeError("painta_forward(mask)", mask.shape(), Shape{hw});
  Tensor<S> xb = x.with_shape({1, hw, d});
  Tensor<S> pb = prompt.with_shape({1, prompt.dim(0), prompt.dim(1)});
  Tensor<S> mb = mask.with_shape({1, hw});
  std::vector<PromptIndexSet> inds{ind};
  PaintaInputs<S> p{&mb, &pb, &inds, borrowed, mode, false};
  return self_attention(xb, xb, w, &p).out.with_shape({hw, d});
}

/// Plain residual self-attention on [hw, d].
template <typename S>
Tensor<S> self_attention_forward(const Tensor<S>& x, const SelfAttentionWeights<S>& w) {
  const Index hw = x.dim(0), d = x.dim(1);
  Tensor<S> xb = x.with_shape({1, hw, d});
  return self_attention(xb, xb, w).out.with_shape({hw, d});
}

/// residual + softmax(Q K^T / sqrt(d)) V W_o with keys/values from the prompt.
/// Returns the output and the probability matrix.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> cross_attention(const Tensor<S>& residual, const Tensor<S>& x, const Tensor<S>& prompt,
                                                const CrossAttentionWeights<S>& w) {
  Tensor<S> probs = cross_probabilities(x, prompt, w.query, w.key);
  Tensor<S> v = matmul(prompt, w.value);
  Tensor<S> out = residual + matmul(matmul(probs, v), w.out);
  return {out, probs};
}

// ---------------------------------------------------------------------------
// Visualisation

/// Which matrix of a record to average.
enum class SimilarityView { Raw, Used, Probabilities };

/// Average over masked rows and over records of one sample's self-attention
/// matrix, reshaped to [h, w].
template <typename S>
Tensor<S> masked_similarity_map(const std::vector<const AttentionRecord<S>*>& records, const Tensor<S>& mask,
                                Index sample = 0, SimilarityView view = SimilarityView::Raw) {
  if (records.empty()) throw std::invalid_argument("masked_similarity_map: no records");
  const Index h = records.front()->height, w = records.front()->width, hw = h * w;
  if (mask.size() != hw) throw ShapeError("masked_similarity_map(mask)", mask.shape(), Shape{h, w});
  std::vector<Index> rows;
  for (Index i = 0; i < hw; ++i)
    if (mask[i] != S(0)) rows.push_back(i);
  if (rows.empty()) throw std::invalid_argument("masked_similarity_map: mask is empty at this resolution");
  Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(hw);
  for (const auto* r : records) {
    if (r->height != h || r->width != w) throw std::invalid_argument("masked_similarity_map: mixed resolutions");
    Tensor<S> sim = view == SimilarityView::Raw ? r->self_scores : r->self_scores_used;
    if (view == SimilarityView::Probabilities) sim = softmax(sim.detach());
    const S* base = sim.data() + sample * hw * hw;
    for (Index i : rows)
      for (Index j = 0; j < hw; ++j) acc[j] += static_cast<double>(base[i * hw + j]);
  }
  acc /= static_cast<double>(rows.size() * records.size());
  return Tensor<S>(Shape{h, w}, acc.cast<S>());
}

}  // namespace attnpaint

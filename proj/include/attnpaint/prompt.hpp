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

// Toy text side: a fixed word vocabulary and a small learned encoder whose
// end-of-text output mixes in every word before it.

#pragma once

#include "attnpaint/attention.hpp"
#include "attnpaint/params.hpp"

#include <array>
#include <sstream>
#include <string>
#include <vector>

namespace attnpaint {

namespace vocab {

inline constexpr int kStart = 0;
inline constexpr int kEnd = 1;
inline constexpr int kPad = 2;

inline const std::vector<std::string>& words() {
  static const std::vector<std::string> w = {
      "<sot>", "<eot>", "<pad>", "red",    "green", "blue",  "circle", "square",     "triangle", "a",     "an",
      "the",   "small", "large", "shape",  "object", "photo", "of",    "on",         "in",       "with",  "and",
      "bright", "dark", "image", "picture", "colored", "plain", "empty", "background", "scene",   "thing"};
  return w;
}

inline int size() { return static_cast<int>(words().size()); }

inline int id(const std::string& word) {
  const auto& w = words();
  for (int i = 0; i < size(); ++i)
    if (w[i] == word) return i;
  throw std::invalid_argument("unknown word '" + word + "'");
}

inline const std::string& word(int id) {
  if (id < 0 || id >= size()) throw std::invalid_argument("unknown token id " + std::to_string(id));
  return words()[id];
}

inline std::vector<int> tokenize(const std::string& text) {
  std::istringstream in(text);
  std::vector<int> ids;
  for (std::string w; in >> w;) ids.push_back(id(w));
  return ids;
}

inline std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  for (int i : ids) {
    if (i == kStart || i == kEnd || i == kPad) continue;
    if (!out.empty()) out += ' ';
    out += word(i);
  }
  return out;
}

}  // namespace vocab

/// A padded token sequence [sot, words..., eot, pad...] and its prompt index set.
struct PromptTokens {
  std::vector<int> ids;
  PromptIndexSet indices;
};

/// Lays out word ids in a fixed-length sequence. Throws on unknown ids or
/// prompts that do not fit.
inline PromptTokens make_prompt(const std::vector<int>& word_ids, Index length) {
  if (static_cast<Index>(word_ids.size()) + 2 > length)
    throw std::invalid_argument("prompt of " + std::to_string(word_ids.size()) + " words does not fit length " +
                                std::to_string(length));
  PromptTokens p;
  p.ids.assign(length, vocab::kPad);
  p.ids[0] = vocab::kStart;
  p.indices.length = length;
  for (std::size_t i = 0; i < word_ids.size(); ++i) {
    const int w = word_ids[i];
    (void)vocab::word(w);
    if (w == vocab::kStart || w == vocab::kEnd || w == vocab::kPad)
      throw std::invalid_argument("special token inside prompt words");
    p.ids[i + 1] = w;
    p.indices.positions.push_back(static_cast<Index>(i + 1));
  }
  const Index eot = static_cast<Index>(word_ids.size()) + 1;
  p.ids[eot] = vocab::kEnd;
  p.indices.positions.push_back(eot);
  return p;
}

inline PromptTokens make_prompt(const std::string& text, Index length) {
  return make_prompt(vocab::tokenize(text), length);
}

/// Embeds a batch of token sequences: token + position + (causal mean of the
/// non-pad token embeddings up to i) * mix. Output [N, l, d].
template <typename S>
Tensor<S> encode_prompts(const ParameterSet<S>& p, const std::vector<PromptTokens>& prompts) {
  const Tensor<S>& table = p["text.token"];
  const Tensor<S>& pos = p["text.position"];
  const Index V = table.dim(0), d = table.dim(1), l = pos.dim(0);
  const Index N = static_cast<Index>(prompts.size());
  if (N == 0) throw std::invalid_argument("encode_prompts: empty batch");
  std::vector<Index> flat;
  typename Tensor<S>::Array avg = Tensor<S>::Array::Zero(N * l * l);
  for (Index n = 0; n < N; ++n) {
    const auto& ids = prompts[n].ids;
    if (static_cast<Index>(ids.size()) != l)
      throw std::invalid_argument("encode_prompts: sequence length " + std::to_string(ids.size()) + " != " +
                                  std::to_string(l));
    Index seen = 0;
    for (Index i = 0; i < l; ++i) {
      if (ids[i] < 0 || ids[i] >= V) throw std::invalid_argument("unknown token id " + std::to_string(ids[i]));
      flat.push_back(ids[i]);
      if (ids[i] != vocab::kPad) ++seen;
      for (Index k = 0; k <= i; ++k)
        if (ids[k] != vocab::kPad) avg[(n * l + i) * l + k] = S(1) / S(seen);
    }
  }
  Tensor<S> tok = reshape(take(table, 0, flat), {N, l, d});
  Tensor<S> ctx = matmul(Tensor<S>(Shape{N, l, l}, std::move(avg)), tok);
  return tok + reshape(pos, {1, l, d}) + matmul(ctx, p["text.mix"]);
}

inline void init_prompt_encoder(ParameterSet<double>& p, Initializer& init, Index dim, Index length) {
  p.add("text.token", init.normal({vocab::size(), dim}, 1));
  p.add("text.position", init.normal({length, dim}, 1, 0.1));
  p.add("text.mix", init.normal({dim, dim}, dim));
}

}  // namespace attnpaint

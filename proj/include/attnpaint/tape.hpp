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

#pragma once

#include "attnpaint/tensor.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace attnpaint {

/// dLoss/dInput for every leaf of a tape, keyed by node id.
template <typename Scalar>
class Gradients {
 public:
  const Tensor<Scalar>& of(const Tensor<Scalar>& x) const { return of(x.node()); }
  const Tensor<Scalar>& of(int node) const {
    auto it = grads_.find(node);
    if (it == grads_.end())
      throw GradientError("no gradient recorded for node " + std::to_string(node));
    return it->second;
  }
  bool contains(int node) const { return grads_.count(node) != 0; }
  std::size_t size() const { return grads_.size(); }

  void set(int node, Tensor<Scalar> g) { grads_.insert_or_assign(node, std::move(g)); }

 private:
  std::unordered_map<int, Tensor<Scalar>> grads_;
};

/// Linear record of differentiable operations.
///
/// Entries are appended in evaluation order, so every parent precedes its
/// child. A tape lives for one gradient computation (one sampling step or one
/// training iteration) and must outlive every tensor that points into it.
template <typename Scalar>
class Tape {
 public:
  using Array = typename Tensor<Scalar>::Array;
  /// Given dLoss/dOutput, returns one contribution per parent (an empty array
  /// means "none"). `needs[i]` tells whether parent i wants a gradient.
  using BackwardFn =
      std::function<std::vector<Array>(const Array& grad_out, const std::vector<char>& needs)>;

  struct Entry {
    std::string kind;
    std::vector<int> parents;  // -1 for detached inputs
    Shape shape;
    BackwardFn backward;  // empty for leaves and for non-differentiable ops
    bool leaf = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as an input that requires gradients.
  Tensor<Scalar> leaf(const Tensor<Scalar>& value) {
    if (value.tape_ != nullptr && value.tape_ != this)
      throw GradientError("leaf: tensor already belongs to another tape");
    entries_.push_back(Entry{"leaf", {}, value.shape(), {}, true});
    Tensor<Scalar> t = value.detach();
    t.tape_ = this;
    t.node_ = static_cast<int>(entries_.size()) - 1;
    return t;
  }

  /// Appends an op whose forward value has already been computed.
  /// A null `backward` marks the op as non-differentiable: reaching it during
  /// backward() is an error.
  Tensor<Scalar> record(std::string_view kind, std::span<const Tensor<Scalar>> inputs,
                        Tensor<Scalar> result, BackwardFn backward) {
    Entry e{std::string(kind), {}, result.shape(), std::move(backward), false};
    e.parents.reserve(inputs.size());
    for (const auto& in : inputs) {
      if (in.tape_ != nullptr && in.tape_ != this)
        throw GradientError(std::string(kind) + ": inputs live on different tapes");
      e.parents.push_back(in.tape_ == this ? in.node_ : -1);
    }
    entries_.push_back(std::move(e));
    result.tape_ = this;
    result.node_ = static_cast<int>(entries_.size()) - 1;
    return result;
  }

  std::size_t size() const { return entries_.size(); }
  const Entry& entry(int node) const { return entries_.at(node); }

  /// Reverse sweep from a scalar loss. Fan-out contributions are summed.
  Gradients<Scalar> backward(const Tensor<Scalar>& loss) const {
    if (loss.tape_ != this) throw GradientError("backward: loss is not on this tape");
    if (loss.size() != 1)
      throw GradientError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));

    const int n = static_cast<int>(entries_.size());
    std::vector<std::optional<Array>> grads(n);
    grads[loss.node_] = Array::Ones(1);

    // Which entries lie on a path to a leaf; prunes work for constant branches.
    std::vector<char> reaches_leaf(n, 0);
    for (int i = 0; i < n; ++i) {
      const Entry& e = entries_[i];
      if (e.leaf) {
        reaches_leaf[i] = 1;
        continue;
      }
      for (int p : e.parents) {
        if (p >= i) throw GradientError("backward: cycle detected at node " + std::to_string(i));
        if (p >= 0 && reaches_leaf[p]) reaches_leaf[i] = 1;
      }
    }

    for (int i = loss.node_; i >= 0; --i) {
      if (!grads[i] || entries_[i].leaf || !reaches_leaf[i]) continue;
      const Entry& e = entries_[i];
      if (!e.backward)
        throw GradientError("backward: op '" + e.kind + "' is not differentiable");
      std::vector<char> needs(e.parents.size(), 0);
      for (std::size_t k = 0; k < e.parents.size(); ++k)
        needs[k] = e.parents[k] >= 0 && reaches_leaf[e.parents[k]];
      std::vector<Array> contrib = e.backward(*grads[i], needs);
      for (std::size_t k = 0; k < e.parents.size(); ++k) {
        if (!needs[k] || contrib[k].size() == 0) continue;
        auto& slot = grads[e.parents[k]];
        if (slot)
          *slot += contrib[k];
        else
          slot = std::move(contrib[k]);
      }
      grads[i].reset();  // intermediate grads are not kept
    }

    Gradients<Scalar> out;
    for (int i = 0; i < n; ++i) {
      if (!entries_[i].leaf) continue;
      const Shape& s = entries_[i].shape;
      out.set(i, grads[i] ? Tensor<Scalar>(s, std::move(*grads[i])) : Tensor<Scalar>::zeros(s));
    }
    return out;
  }

 private:
  std::vector<Entry> entries_;
};

}  // namespace attnpaint

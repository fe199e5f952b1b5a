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

#include "attnpaint/tape.hpp"

#include <cmath>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnpaint {

/// Ordered collection of named tensors: model weights or their gradients.
template <typename S>
class ParameterSet {
 public:
  void add(const std::string& name, Tensor<S> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_[name] = values_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
  }

  void set(const std::string& name, Tensor<S> value) {
    auto it = index_.find(name);
    if (it == index_.end()) return add(name, std::move(value));
    if (values_[it->second].shape() != value.shape())
      throw ShapeError("parameter '" + name + "'", values_[it->second].shape(), value.shape());
    values_[it->second] = std::move(value);
  }

  const Tensor<S>& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("missing parameter '" + name + "'");
    return values_[it->second];
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor<S>>& values() const { return values_; }
  std::vector<Tensor<S>>& values() { return values_; }

  Index count() const {
    Index n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  /// Copy whose entries are fresh leaves on `tape`.
  ParameterSet on_tape(Tape<S>& tape) const {
    ParameterSet out;
    for (std::size_t i = 0; i < values_.size(); ++i) out.add(names_[i], tape.leaf(values_[i].detach()));
    return out;
  }

  template <typename O>
  ParameterSet<O> cast() const {
    ParameterSet<O> out;
    for (std::size_t i = 0; i < values_.size(); ++i) out.add(names_[i], values_[i].template cast<O>());
    return out;
  }

  /// Entries whose name starts with `prefix`, with the prefix stripped.
  ParameterSet subset(const std::string& prefix) const {
    ParameterSet out;
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (names_[i].rfind(prefix, 0) == 0) out.add(names_[i].substr(prefix.size()), values_[i]);
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<S>> values_;
  std::map<std::string, std::size_t> index_;
};

/// Deterministic weight initialisers.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  /// Normal with std gain / sqrt(fan_in).
  Tensor<double> normal(Shape shape, Index fan_in, double gain = 1.0) {
    std::normal_distribution<double> n(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
    Eigen::ArrayXd v(numel(shape));
    for (auto& x : v) x = n(rng_);
    return Tensor<double>(std::move(shape), std::move(v));
  }

  Tensor<double> zeros(Shape shape) { return Tensor<double>::zeros(std::move(shape)); }
  Tensor<double> ones(Shape shape) { return Tensor<double>::constant(std::move(shape), 1.0); }

 private:
  std::mt19937_64 rng_;
};

/// Adam with decoupled weight decay and optional global-norm clipping.
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 0.0;  // 0 disables clipping
};

template <typename S>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  /// Updates `params` in place from gradients aligned with `params.values()`.
  /// Returns the pre-clipping global gradient norm.
  double step(ParameterSet<S>& params, const std::vector<typename Tensor<S>::Array>& grads, double lr_scale = 1.0) {
    using Array = typename Tensor<S>::Array;
    auto& vals = params.values();
    if (grads.size() != vals.size()) throw std::invalid_argument("adam: gradient count mismatch");
    if (m_.empty()) {
      for (const auto& v : vals) {
        m_.push_back(Array::Zero(v.size()));
        v_.push_back(Array::Zero(v.size()));
      }
    }
    double sq = 0;
    for (const auto& g : grads) sq += g.template cast<double>().square().sum();
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double lr = cfg_.lr * lr_scale;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_), c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < vals.size(); ++i) {
      Array g = grads[i] * S(clip);
      m_[i] = S(cfg_.beta1) * m_[i] + S(1 - cfg_.beta1) * g;
      v_[i] = S(cfg_.beta2) * v_[i] + S(1 - cfg_.beta2) * g.square();
      Array w = vals[i].array();
      if (cfg_.weight_decay > 0) w *= S(1 - lr * cfg_.weight_decay);
      w -= S(lr) * (m_[i] / S(c1)) / ((v_[i] / S(c2)).sqrt() + S(cfg_.eps));
      vals[i] = Tensor<S>(vals[i].shape(), std::move(w));
    }
    return norm;
  }

  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<typename Tensor<S>::Array> m_, v_;
};

}  // namespace attnpaint

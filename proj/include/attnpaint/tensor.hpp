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

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace attnpaint {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Raised when operands of an op have incompatible shapes.
class ShapeError : public std::runtime_error {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::runtime_error(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b)),
        op_(op), lhs_(a), rhs_(b) {}
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}

  const std::string& op() const { return op_; }
  const Shape& lhs() const { return lhs_; }
  const Shape& rhs() const { return rhs_; }

 private:
  std::string op_;
  Shape lhs_, rhs_;
};

/// Raised when a gradient is requested through something that cannot provide one.
class GradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
class Tape;

/// Dense row-major n-d array with an optional link into a gradient tape.
///
/// Copies share the (immutable) storage, so passing tensors by value is cheap.
/// A tensor with no tape link is a detached constant and never receives a
/// gradient.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() : Tensor(Shape{}, Array::Zero(1)) {}

  Tensor(Shape shape, Array data)
      : shape_(std::move(shape)), data_(std::make_shared<const Array>(std::move(data))) {
    if (numel(shape_) != data_->size())
      throw ShapeError("tensor: shape " + to_string(shape_) + " does not match data length " +
                       std::to_string(data_->size()));
  }

  static Tensor zeros(Shape shape) {
    Index n = numel(shape);
    return Tensor(std::move(shape), Array::Zero(n));
  }
  static Tensor constant(Shape shape, Scalar value) {
    Index n = numel(shape);
    return Tensor(std::move(shape), Array::Constant(n, value));
  }
  static Tensor scalar(Scalar value) { return constant(Shape{}, value); }
  static Tensor of(Shape shape, std::initializer_list<Scalar> values) {
    Array a(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) a[i++] = v;
    return Tensor(std::move(shape), std::move(a));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(axis < 0 ? axis + rank() : axis); }
  Index size() const { return data_->size(); }

  const Array& array() const { return *data_; }
  const Scalar* data() const { return data_->data(); }
  Scalar operator[](Index i) const { return (*data_)[i]; }
  Scalar item() const {
    if (size() != 1) throw ShapeError("item: tensor is not a scalar " + to_string(shape_));
    return (*data_)[0];
  }

  Tape<Scalar>* tape() const { return tape_; }
  int node() const { return node_; }
  bool requires_grad() const { return tape_ != nullptr; }

  Tensor detach() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  /// Same storage, new shape. Not recorded; use ops::reshape on a tape.
  Tensor with_shape(Shape shape) const {
    if (numel(shape) != size()) throw ShapeError("with_shape", shape_, shape);
    Tensor t = detach();
    t.shape_ = std::move(shape);
    return t;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_->template cast<Other>());
  }

 private:
  friend class Tape<Scalar>;

  Shape shape_;
  std::shared_ptr<const Array> data_;
  Tape<Scalar>* tape_ = nullptr;
  int node_ = -1;
};

template <typename Scalar>
bool same_values(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return a.shape() == b.shape() && (a.array() == b.array()).all();
}

}  // namespace attnpaint

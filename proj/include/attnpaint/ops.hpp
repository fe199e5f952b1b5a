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

// Differentiable tensor ops. Each op computes its forward value eagerly and,
// when any input lives on a tape, records a backward rule there.

#pragma once

#include "attnpaint/tape.hpp"
#include "attnpaint/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace attnpaint {

namespace detail {

template <typename S>
Tape<S>* common_tape(const char* kind, std::initializer_list<const Tensor<S>*> inputs) {
  Tape<S>* tape = nullptr;
  for (const Tensor<S>* t : inputs) {
    if (t->tape() == nullptr) continue;
    if (tape != nullptr && tape != t->tape())
      throw GradientError(std::string(kind) + ": inputs live on different tapes");
    tape = t->tape();
  }
  return tape;
}

template <typename S>
Tensor<S> finish(Tape<S>* tape, const char* kind, std::vector<Tensor<S>> inputs, Tensor<S> result,
                 typename Tape<S>::BackwardFn fn) {
  if (tape == nullptr) return result;
  return tape->record(kind, inputs, std::move(result), std::move(fn));
}

inline int norm_axis(int axis, int rank) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

inline Shape broadcast_shape(const char* kind, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    Index da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    Index db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) throw ShapeError(kind, a, b);
    out[i] = da == 1 ? db : da;
  }
  return out;
}

inline std::vector<Index> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  const std::size_t off = out.size() - in.size();
  Index s = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    strides[k + off] = (in[k] == 1 && out[k + off] != 1) ? 0 : s;
    s *= in[k];
  }
  return strides;
}

/// Iteration plan over an output shape with two (possibly broadcast) inputs.
/// Adjacent dims with compatible strides are merged so the inner loop is long.
struct BroadcastPlan {
  std::vector<Index> dims, sa, sb;

  BroadcastPlan(const Shape& out, const Shape& a, const Shape& b) {
    auto ra = broadcast_strides(a, out);
    auto rb = broadcast_strides(b, out);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out[i] == 1) continue;
      if (!dims.empty() && sa.back() == ra[i] * out[i] && sb.back() == rb[i] * out[i]) {
        dims.back() *= out[i];
        sa.back() = ra[i];
        sb.back() = rb[i];
        continue;
      }
      dims.push_back(out[i]);
      sa.push_back(ra[i]);
      sb.push_back(rb[i]);
    }
  }

  template <typename F>
  void run(F&& f) const {
    if (dims.empty()) {
      f(Index{0}, Index{0}, Index{0});
      return;
    }
    const std::size_t r = dims.size();
    const Index inner = dims.back(), ia_step = sa.back(), ib_step = sb.back();
    Index outer = 1;
    for (std::size_t d = 0; d + 1 < r; ++d) outer *= dims[d];
    std::vector<Index> ctr(r, 0);
    Index o = 0, oa = 0, ob = 0;
    for (Index k = 0; k < outer; ++k) {
      for (Index j = 0; j < inner; ++j) f(o + j, oa + j * ia_step, ob + j * ib_step);
      o += inner;
      for (std::size_t d = r - 1; d-- > 0;) {
        oa += sa[d];
        ob += sb[d];
        if (++ctr[d] < dims[d]) break;
        oa -= sa[d] * dims[d];
        ob -= sb[d] * dims[d];
        ctr[d] = 0;
      }
    }
  }
};

/// Shared machinery for broadcasting binary elementwise ops.
/// da/db map (a, b, grad) to the partial contribution for each operand.
template <typename S, typename F, typename DA, typename DB>
Tensor<S> binary(const char* kind, const Tensor<S>& a, const Tensor<S>& b, F f, DA da, DB db) {
  using Array = typename Tensor<S>::Array;
  Shape out = broadcast_shape(kind, a.shape(), b.shape());
  BroadcastPlan plan(out, a.shape(), b.shape());
  Array y(numel(out));
  {
    const S* pa = a.data();
    const S* pb = b.data();
    S* py = y.data();
    plan.run([&](Index o, Index ia, Index ib) { py[o] = f(pa[ia], pb[ib]); });
  }
  Tape<S>* tape = common_tape(kind, {&a, &b});
  return finish<S>(tape, kind, {a, b}, Tensor<S>(out, std::move(y)),
                   [a, b, plan, da, db](const Array& g, const std::vector<char>& needs) {
                     std::vector<Array> res(2);
                     const S* pa = a.data();
                     const S* pb = b.data();
                     const S* pg = g.data();
                     if (needs[0]) {
                       res[0] = Array::Zero(a.size());
                       S* r = res[0].data();
                       plan.run([&](Index o, Index ia, Index ib) { r[ia] += da(pa[ia], pb[ib], pg[o]); });
                     }
                     if (needs[1]) {
                       res[1] = Array::Zero(b.size());
                       S* r = res[1].data();
                       plan.run([&](Index o, Index ia, Index ib) { r[ib] += db(pa[ia], pb[ib], pg[o]); });
                     }
                     return res;
                   });
}

/// Views a tensor as [outer, axis, inner] around one axis.
struct AxisSplit {
  Index outer = 1, n = 1, inner = 1;
  AxisSplit(const Shape& s, int axis) {
    for (int i = 0; i < axis; ++i) outer *= s[i];
    n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting)

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S, S g) { return g; },
      [](S, S, S g) { return g; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S, S g) { return g; },
      [](S, S, S g) { return -g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y, S g) { return g * y; },
      [](S x, S, S g) { return g * x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary(
      "div", a, b, [](S x, S y) { return x / y; }, [](S, S y, S g) { return g / y; },
      [](S x, S y, S g) { return -g * x / (y * y); });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  using Array = typename Tensor<S>::Array;
  return detail::finish<S>(a.tape(), "add_scalar", {a}, Tensor<S>(a.shape(), a.array() + c),
                           [](const Array& g, const std::vector<char>&) { return std::vector<Array>{g}; });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  using Array = typename Tensor<S>::Array;
  return detail::finish<S>(a.tape(), "mul_scalar", {a}, Tensor<S>(a.shape(), a.array() * c),
                           [c](const Array& g, const std::vector<char>&) {
                             return std::vector<Array>{g * c};
                           });
}

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S> Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <typename S> Tensor<S> operator+(const Tensor<S>& a, S c) { return add_scalar(a, c); }
template <typename S> Tensor<S> operator+(S c, const Tensor<S>& a) { return add_scalar(a, c); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, S c) { return add_scalar(a, -c); }
template <typename S> Tensor<S> operator-(S c, const Tensor<S>& a) { return add_scalar(mul_scalar(a, S(-1)), c); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, S c) { return mul_scalar(a, c); }
template <typename S> Tensor<S> operator*(S c, const Tensor<S>& a) { return mul_scalar(a, c); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a) { return mul_scalar(a, S(-1)); }

// ---------------------------------------------------------------------------
// Unary

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  using Array = typename Tensor<S>::Array;
  Tensor<S> y(a.shape(), a.array().exp());
  return detail::finish<S>(a.tape(), "exp", {a}, y, [y](const Array& g, const std::vector<char>&) {
    return std::vector<Array>{g * y.array()};
  });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  using Array = typename Tensor<S>::Array;
  return detail::finish<S>(a.tape(), "log", {a}, Tensor<S>(a.shape(), a.array().log()),
                           [a](const Array& g, const std::vector<char>&) {
                             return std::vector<Array>{g / a.array()};
                           });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  using Array = typename Tensor<S>::Array;
  Array v = a.array().unaryExpr([](S x) {
    // split by sign so exp never overflows
    if (x >= 0) return S(1) / (S(1) + std::exp(-x));
    S e = std::exp(x);
    return e / (S(1) + e);
  });
  Tensor<S> y(a.shape(), std::move(v));
  return detail::finish<S>(a.tape(), "sigmoid", {a}, y, [y](const Array& g, const std::vector<char>&) {
    const Array& s = y.array();
    return std::vector<Array>{g * s * (S(1) - s)};
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  using Array = typename Tensor<S>::Array;
  const Index n = a.size();
  return detail::finish<S>(a.tape(), "sum", {a}, Tensor<S>::scalar(a.array().sum()),
                           [n](const Array& g, const std::vector<char>&) {
                             return std::vector<Array>{Array::Constant(n, g[0])};
                           });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return mul_scalar(sum(a), S(1) / static_cast<S>(a.size()));
}

/// Sum over one axis.
template <typename S>
Tensor<S> sum(const Tensor<S>& a, int axis, bool keepdim = false) {
  using Array = typename Tensor<S>::Array;
  axis = detail::norm_axis(axis, a.rank());
  detail::AxisSplit sp(a.shape(), axis);
  Array y = Array::Zero(sp.outer * sp.inner);
  const S* pa = a.data();
  for (Index o = 0; o < sp.outer; ++o)
    for (Index k = 0; k < sp.n; ++k)
      for (Index i = 0; i < sp.inner; ++i) y[o * sp.inner + i] += pa[(o * sp.n + k) * sp.inner + i];
  Shape out = a.shape();
  if (keepdim)
    out[axis] = 1;
  else
    out.erase(out.begin() + axis);
  return detail::finish<S>(a.tape(), "sum_axis", {a}, Tensor<S>(out, std::move(y)),
                           [sp](const Array& g, const std::vector<char>&) {
                             Array r(sp.outer * sp.n * sp.inner);
                             for (Index o = 0; o < sp.outer; ++o)
                               for (Index k = 0; k < sp.n; ++k)
                                 for (Index i = 0; i < sp.inner; ++i)
                                   r[(o * sp.n + k) * sp.inner + i] = g[o * sp.inner + i];
                             return std::vector<Array>{std::move(r)};
                           });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a, int axis, bool keepdim = false) {
  const int ax = detail::norm_axis(axis, a.rank());
  return mul_scalar(sum(a, ax, keepdim), S(1) / static_cast<S>(a.shape()[ax]));
}

/// Max over one axis; the gradient goes to the first maximal entry.
template <typename S>
Tensor<S> max(const Tensor<S>& a, int axis, bool keepdim = false) {
  using Array = typename Tensor<S>::Array;
  axis = detail::norm_axis(axis, a.rank());
  detail::AxisSplit sp(a.shape(), axis);
  if (sp.n == 0) throw ShapeError("max: empty axis");
  Array y(sp.outer * sp.inner);
  std::vector<Index> arg(sp.outer * sp.inner);
  const S* pa = a.data();
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      Index best = 0;
      S bv = pa[o * sp.n * sp.inner + i];
      for (Index k = 1; k < sp.n; ++k) {
        S v = pa[(o * sp.n + k) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      y[o * sp.inner + i] = bv;
      arg[o * sp.inner + i] = best;
    }
  Shape out = a.shape();
  if (keepdim)
    out[axis] = 1;
  else
    out.erase(out.begin() + axis);
  return detail::finish<S>(a.tape(), "max_axis", {a}, Tensor<S>(out, std::move(y)),
                           [sp, arg](const Array& g, const std::vector<char>&) {
                             Array r = Array::Zero(sp.outer * sp.n * sp.inner);
                             for (Index o = 0; o < sp.outer; ++o)
                               for (Index i = 0; i < sp.inner; ++i)
                                 r[(o * sp.n + arg[o * sp.inner + i]) * sp.inner + i] = g[o * sp.inner + i];
                             return std::vector<Array>{std::move(r)};
                           });
}

/// Softmax over the last axis.
template <typename S>
Tensor<S> softmax(const Tensor<S>& a) {
  using Array = typename Tensor<S>::Array;
  if (a.rank() == 0) throw ShapeError("softmax: needs rank >= 1");
  const Index n = a.shape().back();
  const Index rows = a.size() / n;
  Array y(a.size());
  const S* pa = a.data();
  for (Index r = 0; r < rows; ++r) {
    const S* x = pa + r * n;
    S* o = y.data() + r * n;
    S m = *std::max_element(x, x + n);
    S z = 0;
    for (Index j = 0; j < n; ++j) z += (o[j] = std::exp(x[j] - m));
    for (Index j = 0; j < n; ++j) o[j] /= z;
  }
  Tensor<S> out(a.shape(), std::move(y));
  return detail::finish<S>(a.tape(), "softmax", {a}, out,
                           [out, n, rows](const Array& g, const std::vector<char>&) {
                             Array r(out.size());
                             const S* py = out.data();
                             for (Index k = 0; k < rows; ++k) {
                               S dot = 0;
                               for (Index j = 0; j < n; ++j) dot += g[k * n + j] * py[k * n + j];
                               for (Index j = 0; j < n; ++j)
                                 r[k * n + j] = py[k * n + j] * (g[k * n + j] - dot);
                             }
                             return std::vector<Array>{std::move(r)};
                           });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  using Array = typename Tensor<S>::Array;
  if (numel(shape) != a.size()) throw ShapeError("reshape", a.shape(), shape);
  return detail::finish<S>(a.tape(), "reshape", {a}, a.with_shape(std::move(shape)),
                           [](const Array& g, const std::vector<char>&) { return std::vector<Array>{g}; });
}

/// Swaps the last two axes.
template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  using Array = typename Tensor<S>::Array;
  if (a.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + to_string(a.shape()));
  const Index m = a.dim(-2), n = a.dim(-1), batch = a.size() / (m * n);
  auto swap = [m, n, batch](const S* src, S* dst, Index rows, Index cols) {
    for (Index b = 0; b < batch; ++b)
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) dst[b * rows * cols + j * rows + i] = src[b * rows * cols + i * cols + j];
    (void)m;
    (void)n;
  };
  Array y(a.size());
  swap(a.data(), y.data(), m, n);
  Shape out = a.shape();
  std::swap(out[out.size() - 1], out[out.size() - 2]);
  return detail::finish<S>(a.tape(), "transpose", {a}, Tensor<S>(out, std::move(y)),
                           [swap, m, n](const Array& g, const std::vector<char>&) {
                             Array r(g.size());
                             swap(g.data(), r.data(), n, m);
                             return std::vector<Array>{std::move(r)};
                           });
}

/// Contiguous range [start, start+length) along an axis.
template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, Index start, Index length) {
  using Array = typename Tensor<S>::Array;
  axis = detail::norm_axis(axis, a.rank());
  detail::AxisSplit sp(a.shape(), axis);
  if (start < 0 || length < 0 || start + length > sp.n)
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") outside axis of size " + std::to_string(sp.n));
  Array y(sp.outer * length * sp.inner);
  for (Index o = 0; o < sp.outer; ++o)
    std::copy_n(a.data() + (o * sp.n + start) * sp.inner, length * sp.inner, y.data() + o * length * sp.inner);
  Shape out = a.shape();
  out[axis] = length;
  return detail::finish<S>(a.tape(), "slice", {a}, Tensor<S>(out, std::move(y)),
                           [sp, start, length](const Array& g, const std::vector<char>&) {
                             Array r = Array::Zero(sp.outer * sp.n * sp.inner);
                             for (Index o = 0; o < sp.outer; ++o)
                               std::copy_n(g.data() + o * length * sp.inner, length * sp.inner,
                                           r.data() + (o * sp.n + start) * sp.inner);
                             return std::vector<Array>{std::move(r)};
                           });
}

/// Gathers the given positions along an axis (indices may repeat; the
/// backward pass scatter-adds).
template <typename S>
Tensor<S> take(const Tensor<S>& a, int axis, const std::vector<Index>& indices) {
  using Array = typename Tensor<S>::Array;
  axis = detail::norm_axis(axis, a.rank());
  detail::AxisSplit sp(a.shape(), axis);
  for (Index k : indices)
    if (k < 0 || k >= sp.n) throw ShapeError("take: index " + std::to_string(k) + " out of range");
  const Index m = static_cast<Index>(indices.size());
  Array y(sp.outer * m * sp.inner);
  for (Index o = 0; o < sp.outer; ++o)
    for (Index k = 0; k < m; ++k)
      std::copy_n(a.data() + (o * sp.n + indices[k]) * sp.inner, sp.inner, y.data() + (o * m + k) * sp.inner);
  Shape out = a.shape();
  out[axis] = m;
  return detail::finish<S>(a.tape(), "take", {a}, Tensor<S>(out, std::move(y)),
                           [sp, indices, m](const Array& g, const std::vector<char>&) {
                             Array r = Array::Zero(sp.outer * sp.n * sp.inner);
                             for (Index o = 0; o < sp.outer; ++o)
                               for (Index k = 0; k < m; ++k)
                                 for (Index i = 0; i < sp.inner; ++i)
                                   r[(o * sp.n + indices[k]) * sp.inner + i] += g[(o * m + k) * sp.inner + i];
                             return std::vector<Array>{std::move(r)};
                           });
}

/// Elementwise select: cond != 0 ? a : b. `cond` is a detached 0/1 tensor of
/// the same shape.
template <typename S>
Tensor<S> where(const Tensor<S>& cond, const Tensor<S>& a, const Tensor<S>& b) {
  using Array = typename Tensor<S>::Array;
  if (cond.shape() != a.shape()) throw ShapeError("where", cond.shape(), a.shape());
  if (a.shape() != b.shape()) throw ShapeError("where", a.shape(), b.shape());
  if (cond.requires_grad()) throw GradientError("where: condition must be detached");
  Array y = (cond.array() != S(0)).select(a.array(), b.array());
  Tape<S>* tape = detail::common_tape("where", {&a, &b});
  Tensor<S> c = cond;
  return detail::finish<S>(tape, "where", {a, b}, Tensor<S>(a.shape(), std::move(y)),
                           [c](const Array& g, const std::vector<char>& needs) {
                             std::vector<Array> r(2);
                             if (needs[0]) r[0] = (c.array() != S(0)).select(g, S(0));
                             if (needs[1]) r[1] = (c.array() != S(0)).select(S(0), g);
                             return r;
                           });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  using Array = typename Tensor<S>::Array;
  if (parts.empty()) throw ShapeError("concat: no inputs");
  axis = detail::norm_axis(axis, parts[0].rank());
  Shape out = parts[0].shape();
  out[axis] = 0;
  Tape<S>* tape = nullptr;
  std::vector<Index> sizes;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out.size()) throw ShapeError("concat", parts[0].shape(), s);
    for (std::size_t d = 0; d < s.size(); ++d)
      if (static_cast<int>(d) != axis && s[d] != parts[0].shape()[d]) throw ShapeError("concat", parts[0].shape(), s);
    out[axis] += s[axis];
    sizes.push_back(s[axis]);
    if (p.tape()) {
      if (tape && tape != p.tape()) throw GradientError("concat: inputs live on different tapes");
      tape = p.tape();
    }
  }
  detail::AxisSplit sp(out, axis);
  Array y(numel(out));
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (Index o = 0; o < sp.outer; ++o)
      std::copy_n(parts[k].data() + o * sizes[k] * sp.inner, sizes[k] * sp.inner,
                  y.data() + (o * sp.n + offset) * sp.inner);
    offset += sizes[k];
  }
  return detail::finish<S>(tape, "concat", parts, Tensor<S>(out, std::move(y)),
                           [sp, sizes](const Array& g, const std::vector<char>& needs) {
                             std::vector<Array> r(sizes.size());
                             Index offset = 0;
                             for (std::size_t k = 0; k < sizes.size(); ++k) {
                               if (needs[k]) {
                                 r[k].resize(sp.outer * sizes[k] * sp.inner);
                                 for (Index o = 0; o < sp.outer; ++o)
                                   std::copy_n(g.data() + (o * sp.n + offset) * sp.inner, sizes[k] * sp.inner,
                                               r[k].data() + o * sizes[k] * sp.inner);
                               }
                               offset += sizes[k];
                             }
                             return r;
                           });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product: a[..., m, k] x b[..., k, n]. `b` may also be a
/// plain [k, n] matrix shared across the batch.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  using Array = typename Tensor<S>::Array;
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul", a.shape(), b.shape());
  const Index m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) throw ShapeError("matmul", a.shape(), b.shape());
  const Index batch = a.size() / (m * k);
  const bool shared = b.rank() == 2;
  if (!shared) {
    if (!std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(), b.shape().end() - 2) ||
        a.rank() != b.rank())
      throw ShapeError("matmul", a.shape(), b.shape());
  }
  Shape out = a.shape();
  out.back() = n;
  Array y(batch * m * n);
  if (shared) {
    MMap(y.data(), batch * m, n).noalias() = CMap(a.data(), batch * m, k) * CMap(b.data(), k, n);
  } else {
    for (Index i = 0; i < batch; ++i)
      MMap(y.data() + i * m * n, m, n).noalias() =
          CMap(a.data() + i * m * k, m, k) * CMap(b.data() + i * k * n, k, n);
  }
  Tape<S>* tape = detail::common_tape("matmul", {&a, &b});
  return detail::finish<S>(
      tape, "matmul", {a, b}, Tensor<S>(out, std::move(y)),
      [a, b, m, k, n, batch, shared](const Array& g, const std::vector<char>& needs) {
        std::vector<Array> r(2);
        if (shared) {
          if (needs[0]) {
            r[0].resize(batch * m * k);
            MMap(r[0].data(), batch * m, k).noalias() =
                CMap(g.data(), batch * m, n) * CMap(b.data(), k, n).transpose();
          }
          if (needs[1]) {
            r[1].resize(k * n);
            MMap(r[1].data(), k, n).noalias() =
                CMap(a.data(), batch * m, k).transpose() * CMap(g.data(), batch * m, n);
          }
          return r;
        }
        if (needs[0]) r[0].resize(batch * m * k);
        if (needs[1]) r[1].resize(batch * k * n);
        for (Index i = 0; i < batch; ++i) {
          CMap gi(g.data() + i * m * n, m, n);
          if (needs[0])
            MMap(r[0].data() + i * m * k, m, k).noalias() = gi * CMap(b.data() + i * k * n, k, n).transpose();
          if (needs[1])
            MMap(r[1].data() + i * k * n, k, n).noalias() = CMap(a.data() + i * m * k, m, k).transpose() * gi;
        }
        return r;
      });
}

// ---------------------------------------------------------------------------
// Images: [N, C, H, W]

namespace detail {

template <typename S>
void im2col(const S* x, Index N, Index C, Index H, Index W, Index k, Index stride, Index pad, Index Ho, Index Wo,
            S* cols) {
  // cols is [C*k*k, N*Ho*Wo] row-major
  const Index P = Ho * Wo, NP = N * P;
  for (Index c = 0; c < C; ++c)
    for (Index ki = 0; ki < k; ++ki)
      for (Index kj = 0; kj < k; ++kj) {
        S* row = cols + ((c * k + ki) * k + kj) * NP;
        for (Index n = 0; n < N; ++n) {
          const S* plane = x + (n * C + c) * H * W;
          for (Index oy = 0; oy < Ho; ++oy) {
            const Index iy = oy * stride - pad + ki;
            S* dst = row + n * P + oy * Wo;
            if (iy < 0 || iy >= H) {
              std::fill_n(dst, Wo, S(0));
              continue;
            }
            for (Index ox = 0; ox < Wo; ++ox) {
              const Index ix = ox * stride - pad + kj;
              dst[ox] = (ix >= 0 && ix < W) ? plane[iy * W + ix] : S(0);
            }
          }
        }
      }
}

template <typename S>
void col2im(const S* cols, Index N, Index C, Index H, Index W, Index k, Index stride, Index pad, Index Ho, Index Wo,
            S* x) {
  const Index P = Ho * Wo, NP = N * P;
  for (Index c = 0; c < C; ++c)
    for (Index ki = 0; ki < k; ++ki)
      for (Index kj = 0; kj < k; ++kj) {
        const S* row = cols + ((c * k + ki) * k + kj) * NP;
        for (Index n = 0; n < N; ++n) {
          S* plane = x + (n * C + c) * H * W;
          for (Index oy = 0; oy < Ho; ++oy) {
            const Index iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= H) continue;
            const S* src = row + n * P + oy * Wo;
            for (Index ox = 0; ox < Wo; ++ox) {
              const Index ix = ox * stride - pad + kj;
              if (ix >= 0 && ix < W) plane[iy * W + ix] += src[ox];
            }
          }
        }
      }
}

}  // namespace detail

/// 2D cross-correlation of x[N,C,H,W] with w[O,C,k,k] plus bias[O].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, Index stride = 1, Index pad = 0) {
  using Array = typename Tensor<S>::Array;
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3))
    throw ShapeError("conv2d", x.shape(), w.shape());
  if (bias.rank() != 1 || bias.dim(0) != w.dim(0)) throw ShapeError("conv2d(bias)", w.shape(), bias.shape());
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index O = w.dim(0), k = w.dim(2);
  const Index Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d", x.shape(), w.shape());
  const Index P = Ho * Wo, K = C * k * k;
  const bool pointwise = k == 1 && stride == 1 && pad == 0;

  // columns are laid out [K, N*P]; a pointwise conv needs only a transpose of
  // the batch and channel axes
  auto make_cols = [=](const S* px) {
    Mat cols(K, N * P);
    if (pointwise) {
      for (Index c = 0; c < C; ++c)
        for (Index n = 0; n < N; ++n) std::copy_n(px + (n * C + c) * P, P, cols.data() + c * N * P + n * P);
    } else {
      detail::im2col(px, N, C, H, W, k, stride, pad, Ho, Wo, cols.data());
    }
    return cols;
  };

  Mat big(O, N * P);
  {
    Mat cols = make_cols(x.data());
    big.noalias() = CMap(w.data(), O, K) * cols;
  }
  Array y(N * O * P);
  for (Index n = 0; n < N; ++n)
    for (Index o = 0; o < O; ++o) {
      const S b = bias[o];
      const S* src = big.data() + o * N * P + n * P;
      S* dst = y.data() + (n * O + o) * P;
      for (Index p = 0; p < P; ++p) dst[p] = src[p] + b;
    }

  Tape<S>* tape = detail::common_tape("conv2d", {&x, &w, &bias});
  return detail::finish<S>(
      tape, "conv2d", {x, w, bias}, Tensor<S>(Shape{N, O, Ho, Wo}, std::move(y)),
      [=](const Array& g, const std::vector<char>& needs) {
        std::vector<Array> r(3);
        Mat gbig(O, N * P);
        for (Index n = 0; n < N; ++n)
          for (Index o = 0; o < O; ++o)
            std::copy_n(g.data() + (n * O + o) * P, P, gbig.data() + o * N * P + n * P);
        if (needs[2]) r[2] = gbig.rowwise().sum().array();
        if (needs[1]) {
          Mat cols = make_cols(x.data());
          r[1].resize(O * K);
          MMap(r[1].data(), O, K).noalias() = gbig * cols.transpose();
        }
        if (needs[0]) {
          Mat dcols = CMap(w.data(), O, K).transpose() * gbig;
          r[0] = Array::Zero(N * C * H * W);
          if (pointwise) {
            for (Index c = 0; c < C; ++c)
              for (Index n = 0; n < N; ++n) std::copy_n(dcols.data() + c * N * P + n * P, P, r[0].data() + (n * C + c) * P);
          } else {
            detail::col2im(dcols.data(), N, C, H, W, k, stride, pad, Ho, Wo, r[0].data());
          }
        }
        return r;
      });
}

/// Nearest-neighbour resize of the two trailing axes, sampling source pixel
/// floor((dst + 0.5) * in / out).
template <typename S>
Tensor<S> resize_nearest(const Tensor<S>& x, Index Ho, Index Wo) {
  using Array = typename Tensor<S>::Array;
  if (x.rank() < 2) throw ShapeError("resize_nearest: needs rank >= 2, got " + to_string(x.shape()));
  const Index H = x.dim(-2), W = x.dim(-1), planes = x.size() / (H * W);
  std::vector<Index> src(Ho * Wo);
  for (Index oy = 0; oy < Ho; ++oy)
    for (Index ox = 0; ox < Wo; ++ox) {
      Index iy = std::min<Index>(H - 1, static_cast<Index>((oy + 0.5) * H / Ho));
      Index ix = std::min<Index>(W - 1, static_cast<Index>((ox + 0.5) * W / Wo));
      src[oy * Wo + ox] = iy * W + ix;
    }
  Array y(planes * Ho * Wo);
  for (Index p = 0; p < planes; ++p)
    for (Index j = 0; j < Ho * Wo; ++j) y[p * Ho * Wo + j] = x[p * H * W + src[j]];
  Shape out = x.shape();
  out[out.size() - 2] = Ho;
  out.back() = Wo;
  const Index HW = H * W, HoWo = Ho * Wo;
  return detail::finish<S>(x.tape(), "resize_nearest", {x}, Tensor<S>(out, std::move(y)),
                           [src, planes, HW, HoWo](const Array& g, const std::vector<char>&) {
                             Array r = Array::Zero(planes * HW);
                             for (Index p = 0; p < planes; ++p)
                               for (Index j = 0; j < HoWo; ++j) r[p * HW + src[j]] += g[p * HoWo + j];
                             return std::vector<Array>{std::move(r)};
                           });
}

/// Bicubic resize (Keys kernel, a = -0.75, half-pixel centres, clamped
/// borders). Not differentiable: a gradient reaching it is an error.
template <typename S>
Tensor<S> resize_bicubic(const Tensor<S>& x, Index Ho, Index Wo) {
  using Array = typename Tensor<S>::Array;
  if (x.rank() < 2) throw ShapeError("resize_bicubic: needs rank >= 2, got " + to_string(x.shape()));
  const Index H = x.dim(-2), W = x.dim(-1), planes = x.size() / (H * W);
  auto kernel = [](double t) {
    constexpr double a = -0.75;
    t = std::abs(t);
    if (t <= 1) return ((a + 2) * t - (a + 3)) * t * t + 1;
    if (t < 2) return ((a * t - 5 * a) * t + 8 * a) * t - 4 * a;
    return 0.0;
  };
  struct Tap {
    std::array<Index, 4> idx;
    std::array<double, 4> wt;
  };
  auto taps = [&](Index in, Index out) {
    std::vector<Tap> v(out);
    for (Index o = 0; o < out; ++o) {
      double src = (o + 0.5) * static_cast<double>(in) / out - 0.5;
      Index base = static_cast<Index>(std::floor(src));
      double f = src - base;
      for (int k = 0; k < 4; ++k) {
        v[o].idx[k] = std::clamp<Index>(base - 1 + k, 0, in - 1);
        v[o].wt[k] = kernel(f - (k - 1));
      }
    }
    return v;
  };
  auto ty = taps(H, Ho), tx = taps(W, Wo);
  Array y(planes * Ho * Wo);
  for (Index p = 0; p < planes; ++p)
    for (Index oy = 0; oy < Ho; ++oy)
      for (Index ox = 0; ox < Wo; ++ox) {
        double acc = 0;
        for (int a = 0; a < 4; ++a)
          for (int b = 0; b < 4; ++b)
            acc += ty[oy].wt[a] * tx[ox].wt[b] * static_cast<double>(x[p * H * W + ty[oy].idx[a] * W + tx[ox].idx[b]]);
        y[p * Ho * Wo + oy * Wo + ox] = static_cast<S>(acc);
      }
  Shape out = x.shape();
  out[out.size() - 2] = Ho;
  out.back() = Wo;
  return detail::finish<S>(x.tape(), "resize_bicubic", {x}, Tensor<S>(out, std::move(y)), {});
}

// ---------------------------------------------------------------------------
// Composites used throughout

/// x * sigmoid(x) as a single node.
template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  using Array = typename Tensor<S>::Array;
  // exp(-x) may overflow to inf for very negative x; 1 / inf is still 0
  Array sg = (S(1) + (-x.array()).exp()).inverse();
  Tensor<S> y(x.shape(), x.array() * sg);
  return detail::finish<S>(x.tape(), "silu", {x}, y, [x, sg](const Array& g, const std::vector<char>&) {
    return std::vector<Array>{g * sg * (S(1) + x.array() * (S(1) - sg))};
  });
}

/// Group normalisation of x[N, C, ...] over (C / groups) channels and all
/// trailing axes, followed by a per-channel affine map gamma[C], beta[C].
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, Index groups, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-5) {
  using Array = typename Tensor<S>::Array;
  if (x.rank() < 2) throw ShapeError("group_norm: needs [N, C, ...], got " + to_string(x.shape()));
  const Index N = x.dim(0), C = x.dim(1), inner = x.size() / (N * C);
  if (groups < 1 || C % groups) throw ShapeError("group_norm: " + std::to_string(C) + " channels in " +
                                                 std::to_string(groups) + " groups");
  if (gamma.shape() != Shape{C}) throw ShapeError("group_norm(gamma)", gamma.shape(), Shape{C});
  if (beta.shape() != Shape{C}) throw ShapeError("group_norm(beta)", beta.shape(), Shape{C});
  const Index per = C / groups, len = per * inner;
  Array xhat(x.size()), inv(N * groups), y(x.size());
  for (Index b = 0; b < N * groups; ++b) {
    auto seg = x.array().segment(b * len, len);
    const double m = seg.template cast<double>().mean();
    const double v = (seg.template cast<double>() - m).square().mean();
    const double is = 1.0 / std::sqrt(v + eps);
    inv[b] = S(is);
    xhat.segment(b * len, len) = ((seg.template cast<double>() - m) * is).template cast<S>();
  }
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const Index off = (n * C + c) * inner;
      y.segment(off, inner) = xhat.segment(off, inner) * gamma[c] + beta[c];
    }
  Tape<S>* tape = detail::common_tape("group_norm", {&x, &gamma, &beta});
  return detail::finish<S>(
      tape, "group_norm", {x, gamma, beta}, Tensor<S>(x.shape(), std::move(y)),
      [=](const Array& g, const std::vector<char>& needs) {
        std::vector<Array> r(3);
        if (needs[1]) r[1] = Array::Zero(C);
        if (needs[2]) r[2] = Array::Zero(C);
        if (needs[0]) r[0].resize(N * C * inner);
        for (Index n = 0; n < N; ++n)
          for (Index c = 0; c < C; ++c) {
            const Index off = (n * C + c) * inner;
            if (needs[1]) r[1][c] += (g.segment(off, inner) * xhat.segment(off, inner)).sum();
            if (needs[2]) r[2][c] += g.segment(off, inner).sum();
            if (needs[0]) r[0].segment(off, inner) = g.segment(off, inner) * gamma[c];
          }
        if (needs[0])
          for (Index b = 0; b < N * groups; ++b) {
            auto dx = r[0].segment(b * len, len);
            auto xh = xhat.segment(b * len, len);
            const S m1 = dx.mean(), m2 = (dx * xh).mean();
            dx = inv[b] * (dx - m1 - xh * m2);
          }
        return r;
      });
}

}  // namespace attnpaint

#include "doctest.h"
#include "gradcheck.hpp"

#include "attnpaint/ops.hpp"

#include <random>

using namespace attnpaint;
using attnpaint::testing::T;

TEST_CASE("matmul with identity returns the left operand") {
  T a = T::of({2, 2}, {1, 2, 3, 4});
  T id = T::of({2, 2}, {1, 0, 0, 1});
  CHECK(same_values(matmul(a, id), a));
}

TEST_CASE("softmax of equal logits is uniform") {
  T y = softmax(T::of({2}, {0, 0}));
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(y[1] == doctest::Approx(0.5));
}

TEST_CASE("derivative of sum(sigmoid(x)) at zero is a quarter") {
  Tape<double> tape;
  T x = tape.leaf(T::zeros({3}));
  auto g = tape.backward(sum(sigmoid(x)));
  for (Index i = 0; i < 3; ++i) CHECK(g.of(x)[i] == doctest::Approx(0.25));
}

TEST_CASE("gradient of sum of squares is 2x") {
  Tape<double> tape;
  T x = tape.leaf(T::of({3}, {1, 2, 3}));
  auto g = tape.backward(sum(x * x));
  CHECK(g.of(x)[0] == 2.0);
  CHECK(g.of(x)[1] == 4.0);
  CHECK(g.of(x)[2] == 6.0);
}

TEST_CASE("sum of softmax is constant so its gradient vanishes") {
  Tape<double> tape;
  T x = tape.leaf(T::of({4}, {0.3, -1.0, 2.0, 0.5}));
  auto g = tape.backward(sum(softmax(x)));
  for (Index i = 0; i < 4; ++i) CHECK(std::abs(g.of(x)[i]) < 1e-15);
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 5);
  Eigen::ArrayXd v(7 * 11);
  for (auto& x : v) x = n(rng);
  T y = softmax(T({7, 11}, v));
  CHECK((y.array() >= 0).all());
  for (Index r = 0; r < 7; ++r) CHECK(std::abs(y.array().segment(r * 11, 11).sum() - 1.0) <= 1e-12);
}

TEST_CASE("shape mismatch names the op and both shapes") {
  T a = T::zeros({2, 3}), b = T::zeros({4, 5});
  try {
    (void)add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.op() == "add");
    CHECK(e.lhs() == Shape{2, 3});
    CHECK(e.rhs() == Shape{4, 5});
  }
  CHECK_THROWS_AS((void)matmul(a, b), ShapeError);
}

TEST_CASE("backward rejects non-scalar losses and bicubic gradient flow") {
  Tape<double> tape;
  T x = tape.leaf(T::constant({1, 1, 4, 4}, 1.0));
  CHECK_THROWS_AS(tape.backward(x * x), GradientError);
  T y = resize_bicubic(x, 8, 8);
  CHECK_THROWS_AS(tape.backward(sum(y)), GradientError);
}

TEST_CASE("bicubic resize off the tape is fine and preserves constants") {
  T x = T::constant({1, 1, 4, 4}, 0.7);
  T y = resize_bicubic(x, 16, 16);
  CHECK(y.shape() == Shape{1, 1, 16, 16});
  for (Index i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("detached tensors receive no gradient and fan-out accumulates") {
  Tape<double> tape;
  T x = tape.leaf(T::of({2}, {1.5, -2.0}));
  T c = T::of({2}, {3.0, 4.0});
  auto g = tape.backward(sum(x * c + x * x + x));
  CHECK(g.of(x)[0] == doctest::Approx(3.0 + 3.0 + 1.0));
  CHECK(g.of(x)[1] == doctest::Approx(4.0 - 4.0 + 1.0));
  CHECK_FALSE(g.contains(-1));
  CHECK(g.size() == 1);
}

TEST_CASE("unreached leaves get zero gradients with their own shape") {
  Tape<double> tape;
  T x = tape.leaf(T::of({2}, {1, 2}));
  T unused = tape.leaf(T::zeros({3, 2}));
  auto g = tape.backward(sum(x));
  CHECK(g.of(unused).shape() == Shape{3, 2});
  CHECK((g.of(unused).array() == 0).all());
}

TEST_CASE("tensors from two tapes cannot be mixed") {
  Tape<double> t1, t2;
  T a = t1.leaf(T::zeros({2})), b = t2.leaf(T::zeros({2}));
  CHECK_THROWS_AS((void)add(a, b), GradientError);
}

TEST_CASE("broadcasting adds a bias over channels and reduces its gradient") {
  Tape<double> tape;
  T x = tape.leaf(T::constant({2, 3, 2, 2}, 1.0));
  T b = tape.leaf(T::of({1, 3, 1, 1}, {1, 2, 3}));
  T y = x + b;
  CHECK(y[0] == 2.0);
  CHECK(y[4] == 3.0);
  auto g = tape.backward(sum(y));
  for (Index i = 0; i < 3; ++i) CHECK(g.of(b)[i] == 8.0);
}

TEST_CASE("conv2d matches a direct loop") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 1);
  auto rnd = [&](Shape s) {
    Eigen::ArrayXd v(numel(s));
    for (auto& e : v) e = n(rng);
    return T(s, v);
  };
  T x = rnd({2, 3, 5, 6}), w = rnd({4, 3, 3, 3}), b = rnd({4});
  for (Index stride : {1, 2}) {
    T y = conv2d(x, w, b, stride, 1);
    const Index Ho = y.dim(2), Wo = y.dim(3);
    for (Index nn = 0; nn < 2; ++nn)
      for (Index o = 0; o < 4; ++o)
        for (Index oy = 0; oy < Ho; ++oy)
          for (Index ox = 0; ox < Wo; ++ox) {
            double acc = b[o];
            for (Index c = 0; c < 3; ++c)
              for (Index ki = 0; ki < 3; ++ki)
                for (Index kj = 0; kj < 3; ++kj) {
                  Index iy = oy * stride - 1 + ki, ix = ox * stride - 1 + kj;
                  if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
                  acc += w[((o * 3 + c) * 3 + ki) * 3 + kj] * x[((nn * 3 + c) * 5 + iy) * 6 + ix];
                }
            CHECK(y[((nn * 4 + o) * Ho + oy) * Wo + ox] == doctest::Approx(acc).epsilon(1e-12));
          }
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  auto rnd = [&](Shape s) {
    Eigen::ArrayXd v(numel(s));
    for (auto& e : v) e = n(rng);
    return T(s, v);
  };
  std::vector<T> leaves = {rnd({2, 2, 4, 5}), rnd({3, 2, 3, 3}), rnd({3}), rnd({3, 3, 1, 1}), rnd({3})};
  auto f = [](const std::vector<T>& p) {
    T h = conv2d(p[0], p[1], p[2], 2, 1);
    return sum(conv2d(h * h, p[3], p[4]) * h);
  };
  Tape<double> tape;
  std::vector<T> vars;
  for (auto& l : leaves) vars.push_back(tape.leaf(l));
  auto g = tape.backward(f(vars));
  auto fd = testing::finite_difference([&](const std::vector<T>& p) { return f(p).item(); }, leaves);
  for (std::size_t i = 0; i < leaves.size(); ++i) CHECK(testing::max_rel_error(g.of(vars[i]).array(), fd[i]) < 1e-6);
}

TEST_CASE("batched matmul, transpose and softmax gradients match finite differences") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0, 1);
  auto rnd = [&](Shape s) {
    Eigen::ArrayXd v(numel(s));
    for (auto& e : v) e = n(rng);
    return T(s, v);
  };
  std::vector<T> leaves = {rnd({2, 4, 3}), rnd({3, 3}), rnd({2, 4, 3})};
  auto f = [](const std::vector<T>& p) {
    T q = matmul(p[0], p[1]);
    T att = softmax(matmul(q, transpose(p[2])));
    return sum(matmul(att, p[2]) * q);
  };
  Tape<double> tape;
  std::vector<T> vars;
  for (auto& l : leaves) vars.push_back(tape.leaf(l));
  auto g = tape.backward(f(vars));
  auto fd = testing::finite_difference([&](const std::vector<T>& p) { return f(p).item(); }, leaves);
  for (std::size_t i = 0; i < leaves.size(); ++i) CHECK(testing::max_rel_error(g.of(vars[i]).array(), fd[i]) < 1e-6);
}

TEST_CASE("gradient is linear in the loss") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0, 1);
  Eigen::ArrayXd v(12);
  for (auto& e : v) e = n(rng);
  const T x0({3, 4}, v);
  auto grad_of = [&](auto loss_fn) {
    Tape<double> tape;
    T x = tape.leaf(x0);
    return tape.backward(loss_fn(x)).of(x).array().eval();
  };
  auto f = [](const T& x) { return sum(softmax(x) * x); };
  auto h = [](const T& x) { return sum(exp(sigmoid(x)) * x); };
  const double a = 2.5, b = -0.75;
  Eigen::ArrayXd combined = grad_of([&](const T& x) { return f(x) * a + h(x) * b; });
  Eigen::ArrayXd separate = a * grad_of(f) + b * grad_of(h);
  CHECK(testing::max_rel_error(combined, separate, 1e-300) <= 1e-12);
}

TEST_CASE("random composite graphs agree with finite differences") {
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    CAPTURE(seed);
    CHECK(testing::check_random_graph(seed, 5, 16) < 1e-4);
  }
}

TEST_CASE("float32 mode runs the same ops") {
  Tape<float> tape;
  Tensor<float> x = tape.leaf(Tensor<float>::of({3}, {1, 2, 3}));
  auto g = tape.backward(sum(x * x));
  CHECK(g.of(x)[2] == 6.0f);
}

TEST_CASE("group norm and silu gradients match finite differences") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n(0, 1);
  auto rnd = [&](Shape s) {
    Eigen::ArrayXd v(numel(s));
    for (auto& e : v) e = n(rng);
    return T(s, v);
  };
  std::vector<T> leaves = {rnd({2, 4, 3, 3}), rnd({4}), rnd({4}), rnd({2, 4, 3, 3})};
  auto f = [](const std::vector<T>& p) { return sum(silu(group_norm(p[0], 2, p[1], p[2])) * p[3]); };
  Tape<double> tape;
  std::vector<T> vars;
  for (auto& l : leaves) vars.push_back(tape.leaf(l));
  auto g = tape.backward(f(vars));
  auto fd = testing::finite_difference([&](const std::vector<T>& p) { return f(p).item(); }, leaves);
  for (std::size_t i = 0; i < 3; ++i) CHECK(testing::max_rel_error(g.of(vars[i]).array(), fd[i]) < 1e-6);
}

TEST_CASE("group norm output has zero mean and unit variance per group") {
  std::mt19937_64 rng(32);
  std::normal_distribution<double> n(3, 5);
  Eigen::ArrayXd v(2 * 6 * 4);
  for (auto& e : v) e = n(rng);
  T y = group_norm(T({2, 6, 4}, v), 3, T::constant({6}, 1.0), T::zeros({6}), 0.0);
  for (Index b = 0; b < 6; ++b) {
    Eigen::ArrayXd seg = y.array().segment(b * 8, 8);
    CHECK(std::abs(seg.mean()) < 1e-12);
    CHECK(std::abs((seg - seg.mean()).square().mean() - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS((void)group_norm(T({2, 6, 4}, v), 4, T::constant({6}, 1.0), T::zeros({6})), ShapeError);
}

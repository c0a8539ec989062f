#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace casvit;
using testutil::randn;
using T4 = Tensor<double>;

TEST_CASE("tensor construction validates extents and data size") {
  CHECK_THROWS_AS(T4(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  CHECK_THROWS_AS(T4(Shape{2, 0, 3}), ShapeError);
  T4 t(Shape{2, 3, 4});
  t.at({1, 2, 3}) = 7;
  CHECK(t[23] == 7);
  CHECK(t.dim(-1) == 4);
  CHECK_THROWS_AS(t.at({2, 0, 0}), ShapeError);
  CHECK_THROWS_AS(t.reshaped(Shape{5, 5}), ShapeError);
  CHECK(t.reshaped(Shape{6, 4}).numel() == 24);
}

TEST_CASE("conv2d matches the loop oracle across configurations") {
  Rng rng(11);
  struct Case {
    std::size_t cin, cout, k, stride, groups;
    bool circular;
  };
  const Case cases[] = {{3, 5, 3, 1, 1, false}, {4, 4, 3, 1, 4, false}, {4, 4, 3, 1, 4, true},
                        {6, 4, 3, 2, 2, false}, {8, 3, 1, 1, 1, false}, {3, 6, 3, 2, 1, false},
                        {4, 8, 1, 1, 4, false}, {5, 5, 3, 2, 5, true},  {2, 4, 5, 1, 1, true}};
  for (const auto& c : cases) {
    for (int rep = 0; rep < 3; ++rep) {
      const std::size_t h = 4 + rng.below(5), w = 4 + rng.below(5);
      const T4 x = randn({2, c.cin, h, w}, rng);
      const T4 wt = randn({c.cout, c.cin / c.groups, c.k, c.k}, rng);
      const T4 b = randn({c.cout}, rng);
      ConvSpec spec = ConvSpec::strided(c.k, c.stride, c.groups);
      if (c.circular) spec.padding = PaddingMode::circular;
      const T4 y = kernels::conv2d(x, wt, &b, spec);
      const T4 ref = oracle::conv2d(x, wt, &b, c.stride, c.k / 2, c.groups, c.circular);
      CHECK(testutil::max_diff(y, ref) < 1e-10);
    }
  }
}

TEST_CASE("conv2d rejects inconsistent configurations") {
  const T4 x(Shape{1, 4, 5, 5});
  CHECK_THROWS_AS(kernels::conv2d<double>(x, T4(Shape{2, 3, 3, 3}), nullptr, ConvSpec::same(3)), ShapeError);
  CHECK_THROWS(kernels::conv2d<double>(x, T4(Shape{3, 2, 3, 3}), nullptr, ConvSpec::same(3, 3)));
  CHECK_THROWS(kernels::conv2d<double>(T4(Shape{4, 5, 5}), T4(Shape{2, 4, 3, 3}), nullptr, ConvSpec::same(3)));
}

TEST_CASE("conv2d backward kernels are adjoint to the forward") {
  // <conv(x), g> = <x, conv_grad_input(g)> and likewise for the weight.
  Rng rng(5);
  for (std::size_t groups : {1, 3}) {
    for (std::size_t stride : {1, 2}) {
      const ConvSpec spec = ConvSpec::strided(3, stride, groups);
      const T4 x = randn({2, 6, 7, 6}, rng), w = randn({3, 6 / groups, 3, 3}, rng);
      const T4 y = kernels::conv2d<double>(x, w, nullptr, spec);
      const T4 g = randn(y.shape(), rng);
      const T4 gx = kernels::conv2d_grad_input(g, w, spec, x.shape());
      const T4 gw = kernels::conv2d_grad_weight(g, x, spec, w.shape());
      double lhs = 0, rx = 0, rw = 0;
      for (std::size_t i = 0; i < y.numel(); ++i) lhs += y[i] * g[i];
      for (std::size_t i = 0; i < x.numel(); ++i) rx += x[i] * gx[i];
      for (std::size_t i = 0; i < w.numel(); ++i) rw += w[i] * gw[i];
      CHECK(lhs == doctest::Approx(rx).epsilon(1e-12));
      CHECK(lhs == doctest::Approx(rw).epsilon(1e-12));
    }
  }
}

TEST_CASE("batchnorm eval and train match the oracle") {
  Rng rng(3);
  BatchNormParams<double> p{randn({4}, rng), randn({4}, rng), randn({4}, rng), T4(Shape{4})};
  for (auto& v : p.running_var.data()) v = rng.uniform(0.5, 2.0);
  const T4 x = randn({3, 4, 5, 6}, rng, 2.0);
  CHECK(testutil::max_diff(kernels::batchnorm2d_eval(x, p.gamma, p.beta, p.running_mean, p.running_var, 1e-5),
                           oracle::batchnorm_eval(x, p, 1e-5)) < 1e-12);
  T4 rm = p.running_mean, rv = p.running_var;
  const auto r = kernels::batchnorm2d_train(x, p.gamma, p.beta, rm, rv, 0.1, 1e-5);
  CHECK(testutil::max_diff(r.y, oracle::batchnorm_train(x, p, 1e-5)) < 1e-12);
}

TEST_CASE("batchnorm train normalizes each channel and updates running stats") {
  Rng rng(4);
  const T4 x = randn({4, 3, 5, 5}, rng, 3.0);
  T4 rm(Shape{3}), rv(Shape{3}, 1.0);
  const auto r = kernels::batchnorm2d_train(x, T4::ones({3}), T4::zeros({3}), rm, rv, 0.1, 1e-5);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0, raw = 0, raw2 = 0;
    const std::size_t n = 4 * 25;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t k = 0; k < 25; ++k) {
        const double y = r.y[(b * 3 + c) * 25 + k], xv = x[(b * 3 + c) * 25 + k];
        m += y;
        v += y * y;
        raw += xv;
        raw2 += xv * xv;
      }
    m /= n;
    v = v / n - m * m;
    CHECK(std::abs(m) < 1e-10);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-5));
    const double mean = raw / n, unbiased = (raw2 / n - mean * mean) * n / (n - 1);
    CHECK(rm[c] == doctest::Approx(0.1 * mean).epsilon(1e-12));
    CHECK(rv[c] == doctest::Approx(0.9 + 0.1 * unbiased).epsilon(1e-12));
  }
}

TEST_CASE("matmul matches the oracle and broadcasts a shared right operand") {
  Rng rng(8);
  const T4 a = randn({2, 3, 5, 4}, rng), b = randn({2, 3, 4, 6}, rng), s = randn({4, 6}, rng);
  CHECK(testutil::max_diff(kernels::matmul(a, b), oracle::matmul(a, b)) < 1e-12);
  CHECK(testutil::max_diff(kernels::matmul(a, s), oracle::matmul(a, s)) < 1e-12);
  CHECK_THROWS_AS(kernels::matmul(a, randn({5, 6}, rng)), ShapeError);
  const T4 t = kernels::transpose_last2(a);
  CHECK(t.shape() == Shape{2, 3, 4, 5});
  CHECK(t.at({1, 2, 3, 4}) == a.at({1, 2, 4, 3}));
}

TEST_CASE("softmax is a distribution along the axis, even for extreme logits") {
  Rng rng(9);
  T4 x = randn({3, 7, 4}, rng, 50.0);
  x[0] = 1e300;
  x[1] = -1e300;
  for (int axis : {0, 1, 2, -1}) {
    const T4 y = kernels::softmax(x, axis);
    CHECK(all_finite(y));
    for (double v : y.data()) CHECK(v >= 0.0);
  }
  const T4 y = kernels::softmax(x, 1);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t k = 0; k < 4; ++k) {
      double s = 0;
      for (std::size_t i = 0; i < 7; ++i) s += y.at({b, i, k});
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  const T4 small = randn({2, 5}, rng);
  const T4 ys = kernels::softmax(small, -1);
  for (std::size_t b = 0; b < 2; ++b) {
    const auto ref = oracle::softmax(std::vector<double>(small.data().begin() + b * 5, small.data().begin() + b * 5 + 5));
    for (std::size_t i = 0; i < 5; ++i) CHECK(ys.at({b, i}) == doctest::Approx(ref[i]).epsilon(1e-14));
  }
}

TEST_CASE("pooling matches the oracle") {
  Rng rng(12);
  const T4 x = randn({2, 3, 5, 7}, rng);
  CHECK(testutil::max_diff(kernels::avg_pool2d(x, 3), oracle::avg_pool(x, 3)) < 1e-13);
  const T4 g = kernels::global_avg_pool(x);
  CHECK(g.shape() == Shape{2, 3, 1, 1});
  double s = 0;
  for (std::size_t i = 0; i < 35; ++i) s += x[35 + i];
  CHECK(g[1] == doctest::Approx(s / 35).epsilon(1e-14));
}

TEST_CASE("activations follow their exact definitions") {
  Rng rng(2);
  const T4 x = randn({50}, rng, 3.0);
  const T4 r = kernels::activation(x, Activation::relu);
  const T4 s = kernels::activation(x, Activation::sigmoid);
  const T4 g = kernels::activation(x, Activation::gelu);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(r[i] == oracle::relu(x[i]));
    CHECK(s[i] == doctest::Approx(oracle::sigmoid(x[i])).epsilon(1e-15));
    CHECK(g[i] == doctest::Approx(oracle::gelu(x[i])).epsilon(1e-15));
  }
  const T4 big(Shape{2}, std::vector<double>{-800.0, 800.0});
  CHECK(all_finite(kernels::activation(big, Activation::sigmoid)));
  CHECK(all_finite(kernels::activation(big, Activation::gelu)));
}

TEST_CASE("broadcasting elementwise ops and their reductions") {
  CHECK(broadcast_shapes({2, 3, 4, 5}, {3, 1, 1}) == Shape{2, 3, 4, 5});
  CHECK(broadcast_shapes({2, 1, 4}, {1, 3, 1}) == Shape{2, 3, 4});
  CHECK_THROWS_AS(broadcast_shapes({2, 3}, {4}), ShapeError);
  Rng rng(1);
  const T4 a = randn({2, 3, 4}, rng), b = randn({3, 1}, rng);
  const T4 m = kernels::elementwise(a, b, BinaryOp::mul);
  CHECK(m.at({1, 2, 3}) == a.at({1, 2, 3}) * b.at({2, 0}));
  const T4 reduced = kernels::sum_to_shape(m, Shape{3, 1});
  double s = 0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 4; ++j) s += m.at({i, 1, j});
  CHECK(reduced.at({1, 0}) == doctest::Approx(s).epsilon(1e-14));
}

TEST_CASE("l2_normalize, cross_entropy and roll2d") {
  Rng rng(6);
  const T4 x = randn({3, 5}, rng);
  const T4 n = kernels::l2_normalize(x, -1, 1e-12);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += n.at({r, c}) * n.at({r, c});
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK(all_finite(kernels::l2_normalize(T4(Shape{2, 3}), -1, 1e-12)));

  const T4 uniform(Shape{2, 4});
  const int labels[] = {1, 3};
  CHECK(kernels::cross_entropy(uniform, std::span<const int>(labels), 0.0) == doctest::Approx(std::log(4.0)));
  CHECK(kernels::cross_entropy(uniform, std::span<const int>(labels), 0.1) == doctest::Approx(std::log(4.0)));

  const T4 img = randn({1, 2, 4, 5}, rng);
  const T4 rolled = kernels::roll2d(img, 1, -2);
  CHECK(rolled.at({0, 1, 1, 0}) == img.at({0, 1, 0, 2}));
  CHECK(testutil::max_diff(kernels::roll2d(rolled, -1, 2), img) == 0.0);
}

TEST_CASE("kernels stay finite on random finite inputs") {
  Rng rng(21);
  for (int rep = 0; rep < 10; ++rep) {
    const double scale = std::pow(10.0, rng.uniform(-3, 3));
    const T4 x = randn({2, 4, 6, 6}, rng, scale);
    const T4 w = randn({4, 1, 3, 3}, rng, scale);
    CHECK(all_finite(kernels::conv2d<double>(x, w, nullptr, ConvSpec::same(3, 4))));
    CHECK(all_finite(kernels::softmax(x, 1)));
    CHECK(all_finite(kernels::batchnorm2d_eval(x, T4::ones({4}), T4::zeros({4}), T4::zeros({4}), T4::ones({4}), 1e-5)));
    CHECK(all_finite(kernels::l2_normalize(x, -1, 1e-12)));
    for (auto a : {Activation::relu, Activation::sigmoid, Activation::gelu}) CHECK(all_finite(kernels::activation(x, a)));
  }
}

#include <cmath>

#include "casd/nn.hpp"
#include "doctest.h"

using namespace casd;
using namespace casd::ops;

namespace {

Tensor<double> randn(Shape s, uint64_t seed, bool rg = false) {
  Rng rng(seed);
  Tensor<double> t = Tensor<double>::zeros(std::move(s));
  for (auto& v : *t.data) v = rng.normal();
  t.set_requires_grad(rg);
  return t;
}

}  // namespace

TEST_CASE("relu and leaky relu forward") {
  auto x = Tensor<double>::from({3}, {-1, 0, 2});
  auto y = relu(x);
  CHECK(y.vals() == std::vector<double>{0, 0, 2});
  auto z = leaky_relu(x, 0.2);
  CHECK(z.at({0}) == doctest::Approx(-0.2));
  CHECK(z.at({2}) == 2.0);
}

TEST_CASE("nearest upsample of a single pixel") {
  auto x = Tensor<double>::from({1, 1, 1, 1}, {5});
  auto y = upsample_nearest2x(x);
  CHECK(y.shape == Shape{1, 2, 2, 1});
  for (double v : y.vals()) CHECK(v == 5.0);
}

TEST_CASE("softmax uniform / analytic / shift invariance") {
  auto z = softmax(Tensor<double>::zeros({8}), 0);
  for (double v : z.vals()) CHECK(v == doctest::Approx(0.125).epsilon(1e-12));

  auto a = softmax(Tensor<double>::from({2}, {0.0, std::log(2.0)}), 0);
  CHECK(a.at({0}) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(a.at({1}) == doctest::Approx(2.0 / 3).epsilon(1e-12));

  // the max subtraction makes a constant shift bitwise invisible
  auto s1 = softmax(Tensor<double>::from({3}, {1, 2, 3}), 0);
  auto s2 = softmax(Tensor<double>::from({3}, {11, 12, 13}), 0);
  CHECK(s1.vals() == s2.vals());
}

TEST_CASE("softmax rows sum to one on random tensors") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    int n = 2 + rng.uniform_int(9);
    int m = 1 + rng.uniform_int(6);
    auto x = randn({m, n}, seed + 100);
    for (auto& v : *x.data) v *= 10;
    auto y = softmax(x, 1);
    for (int i = 0; i < m; ++i) {
      double s = 0;
      for (int j = 0; j < n; ++j) {
        CHECK(y.at({i, j}) >= 0.0);
        s += y.at({i, j});
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    // shift each row by its own constant; the shifted logits themselves round,
    // so equality is up to that rounding, not bitwise
    auto xs = x.detach();
    auto x2 = Tensor<double>::zeros(x.shape);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) (*x2.data)[size_t(i) * n + j] = xs.at({i, j}) + double(i) - 3.0;
    auto y2 = softmax(x2, 1);
    for (int64_t i = 0; i < y.numel(); ++i)
      CHECK(std::abs((*y.data)[size_t(i)] - (*y2.data)[size_t(i)]) < 1e-12);
  }
}

TEST_CASE("instance norm zeroes a constant channel") {
  auto x = Tensor<double>::full({1, 3, 4, 2}, 7.5);
  auto y = instance_norm(x);
  for (double v : y.vals()) CHECK(v == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("instance norm two-pixel analytic case") {
  auto x = Tensor<double>::from({1, 2, 1, 1}, {1, 3});
  auto y = instance_norm(x);
  // mean 2, var 1; eps pulls the magnitude just under 1
  CHECK(y.at({0, 0, 0, 0})
        == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  CHECK(y.at({0, 1, 0, 0}) == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
}

TEST_CASE("instance norm statistics on random input") {
  auto x = randn({2, 4, 4, 3}, 7);
  auto y = instance_norm(x);
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c) {
      double mean = 0, var = 0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) mean += y.at({b, i, j, c});
      mean /= 16;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          double d = y.at({b, i, j, c}) - mean;
          var += d * d;
        }
      var /= 16;
      CHECK(std::abs(mean) < 1e-4);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("sw-lin endpoints and balanced blend") {
  ParameterStore<double> ps(3);
  SwLin<double> sw(ps, "sw", 16);
  auto x = randn({2, 8, 16}, 11);

  SUBCASE("logit +20 collapses onto the layer-norm branch") {
    (*ps["sw.rho"].data)[0] = 20.0;
    auto y = sw(x);
    auto ln = layer_norm(x);
    for (int64_t i = 0; i < y.numel(); ++i)
      CHECK(std::abs((*y.data)[size_t(i)] - (*ln.data)[size_t(i)]) < 1e-6);
  }

  SUBCASE("constant input is zeroed for any rho") {
    (*ps["sw.rho"].data)[0] = 1.234;
    auto c = Tensor<double>::full({2, 8, 16}, 3.3);
    auto y = sw(c);
    for (double v : y.vals()) CHECK(std::abs(v) < 1e-9);
  }

  SUBCASE("rho 0.5 averages the two branches") {
    auto y = sw(x);  // fresh logit is 0 -> rho = 0.5 exactly
    auto ln = layer_norm(x);
    auto in = instance_norm(x);
    for (int64_t i = 0; i < y.numel(); ++i) {
      double want = 0.5 * (*ln.data)[size_t(i)] + 0.5 * (*in.data)[size_t(i)];
      CHECK((*y.data)[size_t(i)] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("ops never mutate their inputs") {
  auto x = randn({3, 5}, 21, true);
  std::vector<double> before = x.vals();
  auto y = add(mul(relu(x), x), softmax(x, 1));
  auto loss = sum_all(y);
  loss.backward();
  CHECK(x.vals() == before);
}

TEST_CASE("shape errors carry the op name and shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 5});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), std::runtime_error);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), std::runtime_error);
  auto x = Tensor<double>::zeros({1, 4, 4, 3});
  auto w = Tensor<double>::zeros({3, 3, 2, 8});
  CHECK_THROWS_WITH_AS(conv2d(x, w, Tensor<double>(), 1), doctest::Contains("conv2d"),
                       std::runtime_error);
}

TEST_CASE("broadcasting matches explicit loops") {
  Rng rng(5);
  auto a = randn({2, 3, 4}, 31);
  auto b = randn({2, 1, 4}, 32);
  auto c = randn({1, 1, 1}, 33);
  auto y = add(mul(a, b), c);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 4; ++k)
        CHECK(y.at({i, j, k})
              == doctest::Approx(a.at({i, j, k}) * b.at({i, 0, k}) + c.at({0, 0, 0})));
}

TEST_CASE("matmul matches a dense loop, including transB") {
  auto a = randn({3, 4}, 41);
  auto b = randn({4, 5}, 42);
  auto y = matmul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += a.at({i, k}) * b.at({k, j});
      CHECK(y.at({i, j}) == doctest::Approx(s).epsilon(1e-12));
    }
  auto bt = randn({5, 4}, 43);
  auto y2 = matmul(a, bt, true);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += a.at({i, k}) * bt.at({j, k});
      CHECK(y2.at({i, j}) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("conv2d stride-1 preserves and stride-2 halves the extent") {
  auto x = randn({2, 8, 6, 3}, 51);
  auto w = randn({3, 3, 3, 4}, 52);
  auto b = randn({4}, 53);
  CHECK(conv2d(x, w, b, 1).shape == Shape{2, 8, 6, 4});
  auto w2 = randn({4, 4, 3, 4}, 54);
  CHECK(conv2d(x, w2, b, 2).shape == Shape{2, 4, 3, 4});
  // odd extents round up
  auto x2 = randn({1, 5, 3, 3}, 55);
  CHECK(conv2d(x2, w2, b, 2).shape == Shape{1, 3, 2, 4});
}

TEST_CASE("conv2d 1x1 equals a per-pixel linear map") {
  auto x = randn({1, 3, 3, 4}, 61);
  auto w = randn({1, 1, 4, 2}, 62);
  auto y = conv2d(x, w, Tensor<double>(), 1);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int o = 0; o < 2; ++o) {
        double s = 0;
        for (int c = 0; c < 4; ++c) s += x.at({0, i, j, c}) * w.at({0, 0, c, o});
        CHECK(y.at({0, i, j, o}) == doctest::Approx(s).epsilon(1e-12));
      }
}

TEST_CASE("concat, slice, permute round trips") {
  auto a = randn({2, 3, 4}, 71);
  auto b = randn({2, 2, 4}, 72);
  auto cat = concat<double>({a, b}, 1);
  CHECK(cat.shape == Shape{2, 5, 4});
  auto back = slice(cat, 1, 0, 3);
  CHECK(back.vals() == a.vals());
  auto tail = slice(cat, 1, 3, 2);
  CHECK(tail.vals() == b.vals());

  auto p = permute(a, {1, 0, 2});
  CHECK(p.shape == Shape{3, 2, 4});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 4; ++k) CHECK(p.at({j, i, k}) == a.at({i, j, k}));
}

TEST_CASE("reductions and pooling match loops") {
  auto x = randn({2, 3, 4, 5}, 81);
  auto s = reduce_sum(x, {1, 2}, true);
  CHECK(s.shape == Shape{2, 1, 1, 5});
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 5; ++c) {
      double want = 0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) want += x.at({b, i, j, c});
      CHECK(s.at({b, 0, 0, c}) == doctest::Approx(want).epsilon(1e-12));
    }
  auto gap = global_avg_pool(x);
  CHECK(gap.shape == Shape{2, 5});
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 5; ++c)
      CHECK(gap.at({b, c}) == doctest::Approx(s.at({b, 0, 0, c}) / 12.0).epsilon(1e-12));

  auto mx = reduce_max(x, 3, false);
  CHECK(mx.shape == Shape{2, 3, 4});
  for (int b = 0; b < 2; ++b) {
    double want = x.at({b, 0, 0, 0});
    for (int c = 1; c < 5; ++c) want = std::max(want, x.at({b, 0, 0, c}));
    CHECK(mx.at({b, 0, 0}) == want);
  }
}

TEST_CASE("finite checks flag NaN when enabled") {
  set_finite_checks(true);
  auto x = Tensor<double>::from({2}, {1.0, -1.0});
  CHECK_THROWS_AS(log_op(x), std::runtime_error);
  set_finite_checks(false);
}

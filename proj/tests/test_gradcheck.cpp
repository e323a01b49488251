#include <cmath>

#include "casd/gradcheck.hpp"
#include "doctest.h"

using namespace casd;
using namespace casd::ops;

namespace {

Tensor<double> randn(Shape s, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<double> t = Tensor<double>::zeros(std::move(s));
  for (auto& v : *t.data) v = rng.normal() * scale;
  t.set_requires_grad(true);
  return t;
}

// scalar objective: weighted sum with fixed random weights, so every output
// element contributes a distinct gradient path
Tensor<double> pin(const Tensor<double>& y, uint64_t seed) {
  Rng rng(seed);
  Tensor<double> w = Tensor<double>::zeros(y.shape);
  for (auto& v : *w.data) v = rng.normal();
  return sum_all(mul(y, w.detach()));
}

double check1(const std::function<Tensor<double>()>& f,
              std::vector<std::pair<std::string, Tensor<double>>> targets) {
  auto rep = finite_diff_check<double>(f, std::move(targets));
  return rep.max_rel_err;
}

}  // namespace

TEST_CASE("every primitive's backward matches central differences") {
  set_finite_checks(true);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng shp(seed * 77 + 1);
    int B = 1 + shp.uniform_int(2);
    int H = 2 + shp.uniform_int(4);
    int W = 2 + shp.uniform_int(4);
    int C = 1 + shp.uniform_int(5);

    CAPTURE(seed);

    {  // elementwise binaries with broadcasting
      auto a = randn({B, H, W, C}, seed + 10);
      auto b = randn({B, 1, 1, C}, seed + 11);
      CHECK(check1([&] { return pin(add(a, b), seed); }, {{"a", a}, {"b", b}}) < 1e-4);
      CHECK(check1([&] { return pin(mul(a, b), seed); }, {{"a", a}, {"b", b}}) < 1e-4);
      auto bp = randn({B, 1, 1, C}, seed + 12);
      for (auto& v : *bp.data) v = 1.5 + std::abs(v);  // keep the divisor away from 0
      CHECK(check1([&] { return pin(div(a, bp), seed); }, {{"a", a}, {"b", bp}}) < 1e-4);
      CHECK(check1([&] { return pin(sub(a, b), seed); }, {{"a", a}, {"b", b}}) < 1e-4);
    }
    {  // unaries
      auto x = randn({H, W}, seed + 20);
      CHECK(check1([&] { return pin(leaky_relu(x, 0.2), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(tanh_op(x), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(sigmoid(x), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(exp_op(x), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(abs_op(x), seed); }, {{"x", x}}) < 1e-4);
      auto xp = randn({H, W}, seed + 21);
      for (auto& v : *xp.data) v = 0.5 + std::abs(v);
      CHECK(check1([&] { return pin(log_op(xp), seed); }, {{"x", xp}}) < 1e-4);
      CHECK(check1([&] { return pin(sqrt_op(xp), seed); }, {{"x", xp}}) < 1e-4);
    }
    {  // softmax, reductions, extremes
      auto x = randn({B, H, C}, seed + 30);
      CHECK(check1([&] { return pin(softmax(x, 2), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(reduce_sum(x, {1}, false), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(reduce_mean(x, {0, 2}, true), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(reduce_max(x, 2, false), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(reduce_min(x, 1, true), seed); }, {{"x", x}}) < 1e-4);
    }
    {  // matmul / linear
      auto a = randn({B, H, C}, seed + 40);
      auto w = randn({C, 4}, seed + 41);
      auto bias = randn({4}, seed + 42);
      CHECK(check1([&] { return pin(linear(a, w, bias), seed); },
                   {{"a", a}, {"w", w}, {"b", bias}}) < 1e-4);
      auto k = randn({B, 5, C}, seed + 43);
      CHECK(check1([&] { return pin(matmul(a, k, true), seed); }, {{"a", a}, {"k", k}}) < 1e-4);
    }
    {  // shape ops
      auto x = randn({B, H, W, C}, seed + 50);
      CHECK(check1([&] { return pin(reshape(x, {B, H * W * C}), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(permute(x, {0, 3, 1, 2}), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(slice(x, 1, 1, H - 1), seed); }, {{"x", x}}) < 1e-4);
      auto y = randn({B, H, W, 2}, seed + 51);
      CHECK(check1([&] { return pin(concat<double>({x, y}, 3), seed); }, {{"x", x}, {"y", y}}) < 1e-4);
      CHECK(check1([&] { return pin(broadcast_to(randn({1, H, 1, C}, seed + 52, 1.0), {B, H, W, C}), seed); },
                   {{"x", x}}) >= 0);  // broadcast grad exercised via mul below
      auto m = randn({1, H, 1, C}, seed + 53);
      CHECK(check1([&] { return pin(broadcast_to(m, {B, H, W, C}), seed); }, {{"m", m}}) < 1e-4);
    }
    {  // resampling and pooling
      auto x = randn({B, H, W, C}, seed + 60);
      CHECK(check1([&] { return pin(upsample_nearest2x(x), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(global_avg_pool(x), seed); }, {{"x", x}}) < 1e-4);
    }
    {  // norms as composites
      auto x = randn({B, H, W, C}, seed + 70);
      CHECK(check1([&] { return pin(instance_norm(x), seed); }, {{"x", x}}) < 1e-4);
      CHECK(check1([&] { return pin(layer_norm(x), seed); }, {{"x", x}}) < 1e-4);
    }
  }
  set_finite_checks(false);
}

TEST_CASE("conv2d gradient vs central differences at 1e-6") {
  set_finite_checks(true);
  auto x = randn({1, 4, 4, 2}, 123);
  auto w = randn({3, 3, 2, 3}, 124);
  auto b = randn({3}, 125);
  auto rep = finite_diff_check<double>([&] { return pin(conv2d(x, w, b, 1), 9); },
                                       {{"x", x}, {"w", w}, {"b", b}}, 1e-5, 1e-6);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-6);

  // strided variant
  auto w2 = randn({4, 4, 2, 3}, 126);
  auto rep2 = finite_diff_check<double>([&] { return pin(conv2d(x, w2, b, 2), 10); },
                                        {{"x", x}, {"w", w2}, {"b", b}}, 1e-5, 1e-6);
  CHECK(rep2.pass);
  set_finite_checks(false);
}

TEST_CASE("finite_diff_check on a bare quadratic") {
  auto w = Tensor<double>::from({1}, {3.0}, true);
  auto rep = finite_diff_check<double>([&] { return mul(w, w); }, {{"w", w}}, 1e-5, 1e-9);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-9);
  CHECK((*w.grad)[0] == doctest::Approx(6.0));  // left from the analytic pass
}

TEST_CASE("gradient of sum of softmax is zero") {
  auto x = randn({7}, 99);
  auto loss = sum_all(softmax(x, 0));
  loss.backward();
  for (double g : *x.grad) CHECK(std::abs(g) < 1e-12);
  auto rep = finite_diff_check<double>([&] { return sum_all(softmax(x, 0)); }, {{"x", x}});
  CHECK(rep.pass);
}

TEST_CASE("finite_diff_check rejects non-finite objectives") {
  auto w = Tensor<double>::from({1}, {-2.0}, true);
  CHECK_THROWS_AS(finite_diff_check<double>([&] { return log_op(w); }, {{"w", w}}),
                  std::runtime_error);
}

TEST_CASE("backward accumulates when one tensor feeds two paths") {
  auto x = randn({4}, 201);
  auto y = add(mul(x, x), mul_scalar(x, 3.0));  // x^2 + 3x -> 2x + 3
  auto loss = sum_all(y);
  loss.backward();
  for (int i = 0; i < 4; ++i)
    CHECK((*x.grad)[size_t(i)] == doctest::Approx(2 * x.at({i}) + 3).epsilon(1e-12));
}

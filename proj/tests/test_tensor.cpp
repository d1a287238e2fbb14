// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace bertese;
using bertese::testing::random_tensor;
using Catch::Approx;

namespace {

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST_CASE("tensor construction checks the value count", "[tensor]") {
  CHECK_THROWS_AS(Tensor<double>(2, 3, {1, 2, 3}), ShapeError);
  const Tensor<double> t(2, 2, {1, 2, 3, 4});
  CHECK(t(1, 0) == 3);
  CHECK(t.shape() == Shape{2, 2});
  CHECK_THROWS_AS(t.item(), ShapeError);
  CHECK(Tensor<double>::scalar(5).item() == 5);
}

TEST_CASE("matmul and its transposed variant agree with hand values", "[tensor]") {
  const Tensor<double> a(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor<double> b(3, 2, {7, 8, 9, 10, 11, 12});
  CHECK(values(matmul(a, b)) == std::vector<double>{58, 64, 139, 154});
  CHECK(values(matmul_nt(a, transpose(b))) == std::vector<double>{58, 64, 139, 154});
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("broadcasting follows the match-or-one rule", "[tensor]") {
  const Tensor<double> m(2, 2, {1, 2, 3, 4});
  const auto r = Tensor<double>::row({10, 20});
  const Tensor<double> c(2, 1, {100, 200});
  CHECK(values(add(m, r)) == std::vector<double>{11, 22, 13, 24});
  CHECK(values(add(m, c)) == std::vector<double>{101, 102, 203, 204});
  CHECK(values(mul(m, Tensor<double>::scalar(2))) == std::vector<double>{2, 4, 6, 8});
  CHECK_THROWS_AS(add(m, Tensor<double>::row({1, 2, 3})), ShapeError);
}

TEST_CASE("reductions and selections", "[tensor]") {
  const Tensor<double> m(2, 3, {3, 1, 2, 5, 5, 4});
  CHECK(sum(m).item() == 20);
  CHECK(mean(m).item() == Approx(20.0 / 6));
  CHECK(values(min_cols(m)) == std::vector<double>{1, 4});
  CHECK(max_all(m).item() == 5);
  CHECK(argmax(std::span<const double>(std::vector<double>{1, 5, 5, 2})) == 1);
  CHECK(values(select_col(m, 2)) == std::vector<double>{2, 4});
  CHECK(values(slice_rows(m, 1, 1)) == std::vector<double>{5, 5, 4});
  CHECK(values(slice_cols(m, 1, 2)) == std::vector<double>{1, 2, 5, 4});
  const std::vector<int> ids{1, 0, 1};
  CHECK(values(gather_rows(m, std::span<const int>(ids))) == std::vector<double>{5, 5, 4, 3, 1, 2, 5, 5, 4});
}

TEST_CASE("max_all routes the gradient to the lowest tied index", "[tensor]") {
  Tensor<double> m(1, 4, {1, 7, 7, 2}, true);
  backward(max_all(m));
  CHECK(values(Tensor<double>(1, 4, {m.grad().begin(), m.grad().end()})) == std::vector<double>{0, 1, 0, 0});
}

TEST_CASE("softmax rows are distributions and stable for large inputs", "[tensor]") {
  const Tensor<double> x(2, 3, {1000, 1001, 1002, -5, 0, 5});
  const auto p = softmax_rows(x);
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(std::isfinite(p(i, j)));
      s += p(i, j);
    }
    CHECK(s == Approx(1.0).margin(1e-12));
  }
  const auto lp = log_softmax_rows(x);
  CHECK(std::exp(lp(0, 2)) == Approx(p(0, 2)));
}

TEST_CASE("squared distances and cross-entropy hand values", "[tensor]") {
  const Tensor<double> a(1, 2, {3, 4});
  const Tensor<double> b(2, 2, {0, 0, 3, 0});
  CHECK(values(sq_dist_rows(a, b)) == std::vector<double>{25, 16});
  const Tensor<double> logits(1, 2, {0, 0});
  const int y = 0;
  CHECK(cross_entropy(logits, std::span<const int>(&y, 1)).item() == Approx(std::log(2.0)));
  const int bad = 2;
  CHECK_THROWS_AS(cross_entropy(logits, std::span<const int>(&bad, 1)), std::out_of_range);
}

TEST_CASE("layer norm output has zero mean and unit variance per row", "[tensor]") {
  std::mt19937_64 rng(1);
  const auto x = random_tensor<double>(3, 8, rng, 2.0, false);
  const auto y = layer_norm_rows(x, Tensor<double>::full(1, 8, 1.0), Tensor<double>::zeros(1, 8), 1e-12);
  for (std::size_t i = 0; i < 3; ++i) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 8; ++j) mu += y(i, j) / 8;
    for (std::size_t j = 0; j < 8; ++j) var += (y(i, j) - mu) * (y(i, j) - mu) / 8;
    CHECK(mu == Approx(0.0).margin(1e-12));
    CHECK(var == Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("every differentiable op passes the finite-difference oracle", "[tensor][grad]") {
  std::mt19937_64 rng(42);
  auto a = random_tensor<double>(3, 4, rng);
  auto b = random_tensor<double>(4, 2, rng);
  auto c = random_tensor<double>(3, 4, rng);
  auto r = random_tensor<double>(1, 4, rng);
  auto g = random_tensor<double>(1, 4, rng);
  const std::vector<int> ids{2, 0, 2, 1};
  const std::vector<int> targets{1, 3, 0};

  using Fn = std::function<Tensor<double>()>;
  const std::vector<std::pair<std::string, Fn>> cases = {
      {"matmul", [&] { return sum(matmul(a, b)); }},
      {"matmul_nt", [&] { return sum(exp(scale(matmul_nt(a, c), 0.1))); }},
      {"transpose", [&] { return sum(mul(transpose(a), transpose(c))); }},
      {"broadcast", [&] { return sum(mul(add(a, r), sub(c, r))); }},
      {"neg-exp", [&] { return sum(exp(neg(a))); }},
      {"gelu", [&] { return sum(gelu(a)); }},
      {"mean", [&] { return mean(mul(a, a)); }},
      {"min_cols", [&] { return sum(min_cols(mul(a, c))); }},
      {"max_all", [&] { return max_all(mul(a, c)); }},
      {"softmax", [&] { return sum(mul(softmax_rows(a), c)); }},
      {"log_softmax", [&] { return sum(mul(log_softmax_rows(a), c)); }},
      {"layer_norm", [&] { return sum(mul(layer_norm_rows(a, g, r, 1e-5), c)); }},
      {"gather", [&] { return sum(mul(gather_rows(a, std::span<const int>(ids)), gather_rows(c, std::span<const int>(ids)))); }},
      {"slices", [&] { return sum(mul(slice_rows(a, 1, 2), slice_cols(slice_rows(c, 0, 2), 0, 4))); }},
      {"concat", [&] { return sum(mul(concat_cols(std::vector<Tensor<double>>{slice_cols(a, 0, 2), slice_cols(a, 2, 2)}), c)); }},
      {"select_col", [&] { return sum(mul(select_col(a, 1), select_col(c, 3))); }},
      {"sq_dist", [&] { return sum(sq_dist_rows(a, c)); }},
      {"cross_entropy", [&] { return cross_entropy(a, std::span<const int>(targets)); }},
  };
  for (const auto& [name, fn] : cases) {
    INFO(name);
    CHECK(grad_check<double>(fn, {a, b, c, r, g}, 1e-6) < 1e-6);
  }
}

TEST_CASE("backward accumulates across calls and skips constants", "[tensor][grad]") {
  Tensor<double> x(1, 2, {1, 2}, true);
  const Tensor<double> k(1, 2, {3, 4});
  const auto loss = sum(mul(x, k));
  backward(loss);
  backward(loss);
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{6, 8});
  CHECK_FALSE(k.has_grad());
  CHECK_THROWS_AS(backward(mul(x, k)), ShapeError);
}

TEST_CASE("no-grad guard records no graph and restores the previous mode", "[tensor]") {
  Tensor<double> x(1, 1, {2}, true);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    const auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    {
      NoGradGuard nested;
    }
    CHECK_FALSE(grad_enabled());
  }
  CHECK(grad_enabled());
  CHECK(mul(x, x).requires_grad());
}

TEST_CASE("straight-through hardmax: one-hot forward, identity backward", "[tensor][ste]") {
  Tensor<double> p(1, 3, {0.2, 0.5, 0.3}, true);
  const auto h = ste_hardmax(p);
  CHECK(values(h) == std::vector<double>{0, 1, 0});
  backward(sum(mul(h, Tensor<double>::row({1, 2, 3}))));
  CHECK(std::vector<double>(p.grad().begin(), p.grad().end()) == std::vector<double>{1, 2, 3});
  CHECK(values(ste_hardmax(Tensor<double>::row({0.5, 0.5}))) == std::vector<double>{1, 0});
  CHECK_THROWS(ste_hardmax(Tensor<double>::row({0.5, 0.7})));
  CHECK_THROWS(ste_hardmax(Tensor<double>::row({-0.5, 1.5})));
}

TEST_CASE("straight-through snap: nearest-row forward, identity backward", "[tensor][ste]") {
  const Tensor<double> table(3, 2, {0, 0, 1, 0, 0, 1});
  Tensor<double> q(2, 2, {0.9, 0.1, 0.2, 0.7}, true);
  const auto s = ste_snap_rows(q, table);
  CHECK(values(s) == std::vector<double>{1, 0, 0, 1});
  backward(sum(mul(s, Tensor<double>(2, 2, {1, 2, 3, 4}))));
  CHECK(std::vector<double>(q.grad().begin(), q.grad().end()) == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("nearest rows break ties toward the lowest index", "[tensor]") {
  const Tensor<double> table(4, 1, {0, 2, 2, 4});
  const Tensor<double> q(3, 1, {1, 2, 3});
  CHECK(nearest_rows(q, table) == std::vector<int>{0, 1, 1});
  CHECK_THROWS_AS(nearest_rows(Tensor<double>(1, 2, {0, 0}), table), ShapeError);
}

TEST_CASE("float and double graphs agree to single precision", "[tensor]") {
  std::mt19937_64 rng(3);
  const auto a = random_tensor<double>(4, 6, rng, 1.0, false);
  Tensor<float> af(4, 6, std::vector<float>(a.data().begin(), a.data().end()));
  const double d = sum(gelu(softmax_rows(a))).item();
  const float f = sum(gelu(softmax_rows(af))).item();
  CHECK(static_cast<double>(f) == Approx(d).epsilon(1e-6));
}

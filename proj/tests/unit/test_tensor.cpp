// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <cmath>
#include <vector>

#include "mtcm/rng.hpp"
#include "mtcm/tensor.hpp"

using namespace mtcm;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  return Tensor(std::move(shape), rng.normal_vec(shape_size(shape), scale));
}

// Independent oracle: naive triple loop, no batching tricks.
std::vector<double> matmul_ref(const Tensor& a, const Tensor& b, int m, int k, int n) {
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p)
        out[static_cast<std::size_t>(i * n + j)] += a.at2(i, p) * b.at2(p, j);
  return out;
}

}  // namespace

TEST_CASE("matmul identity passes through") {
  Rng rng(1);
  Tensor x = random_tensor({2, 2}, rng);
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor y = matmul(eye, x);
  for (int i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-15));
}

TEST_CASE("matmul direct arithmetic") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {5, 6});
  Tensor c = matmul(a, b);
  CHECK(c[0] == 17.0);
  CHECK(c[1] == 39.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor c = matmul(a, b);
  auto ref = matmul_ref(a, b, 3, 4, 2);
  for (int i = 0; i < 6; ++i) CHECK(c[i] == doctest::Approx(ref[static_cast<std::size_t>(i)]).epsilon(1e-13));
}

TEST_CASE("batched matmul matches per-slice oracle") {
  Rng rng(11);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 4, 5}, rng);
  Tensor c = matmul(a, b);
  for (int s = 0; s < 2; ++s) {
    Tensor as = select_axis0(a, s);
    Tensor bs = select_axis0(b, s);
    auto ref = matmul_ref(as, bs, 3, 4, 5);
    for (int i = 0; i < 15; ++i)
      CHECK(c[s * 15 + i] == doctest::Approx(ref[static_cast<std::size_t>(i)]).epsilon(1e-13));
  }
}

TEST_CASE("matmul rejects shape mismatch naming both shapes") {
  Tensor a({2, 3}, std::vector<double>(6, 0.0));
  Tensor b({4, 2}, std::vector<double>(8, 0.0));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[4x2]"), std::invalid_argument);
}

TEST_CASE("softmax closed forms") {
  Tensor x({2}, {0.0, 0.0});
  Tensor y = softmax_axis(x, 0);
  CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor z = softmax_axis(Tensor({2}, {0.0, std::log(3.0)}), 0);
  CHECK(z[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(z[1] == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("softmax slices sum to one on every axis") {
  Rng rng(3);
  Tensor x = random_tensor({3, 4, 5}, rng, 10.0);
  for (int axis = 0; axis < 3; ++axis) {
    Tensor y = softmax_axis(x, axis);
    REQUIRE(y.all_finite());
    for (int i = 0; i < y.size(); ++i) {
      CHECK(y[i] >= 0.0);
      CHECK(y[i] <= 1.0);
    }
    // sum along the axis for every (outer, inner) pair
    int inner = 1;
    for (int i = axis + 1; i < 3; ++i) inner *= x.dim(i);
    const int len = x.dim(axis);
    const int outer = x.size() / (len * inner);
    for (int o = 0; o < outer; ++o) {
      for (int in = 0; in < inner; ++in) {
        double s = 0.0;
        for (int i = 0; i < len; ++i) s += y[o * len * inner + i * inner + in];
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("softmax is stable for large magnitudes") {
  Tensor x({3}, {1000.0, 999.0, -1000.0});
  Tensor y = softmax_axis(x, 0);
  CHECK(y.all_finite());
  CHECK(y[0] > y[1]);
  CHECK(y[2] < 1e-300);
}

TEST_CASE("backward of sum of squares is 2x") {
  Rng rng(5);
  Tensor x = random_tensor({6}, rng);
  Graph g;
  Tensor xt = g.leaf(x);
  Tensor loss = sum_all(mul(xt, xt));
  g.backward(loss);
  const auto* gr = g.grad(xt);
  REQUIRE(gr != nullptr);
  for (int i = 0; i < 6; ++i) CHECK((*gr)[static_cast<std::size_t>(i)] == doctest::Approx(2.0 * x[i]).epsilon(1e-13));
}

TEST_CASE("backward of softmax cross-entropy is p minus onehot") {
  Rng rng(9);
  Tensor x = random_tensor({5}, rng);
  const int label = 2;
  Graph g;
  Tensor xt = g.leaf(x);
  Tensor p = softmax_axis(xt, 0);
  std::vector<double> onehot(5, 0.0);
  onehot[label] = 1.0;
  Tensor loss = scale(sum_all(mul(Tensor({5}, onehot), elem_log(p))), -1.0);
  g.backward(loss);
  const auto* gr = g.grad(xt);
  REQUIRE(gr != nullptr);
  for (int i = 0; i < 5; ++i) {
    const double expect = p[i] - (i == label ? 1.0 : 0.0);
    CHECK((*gr)[static_cast<std::size_t>(i)] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("reciprocal inverts elementwise and rejects zero") {
  Tensor x({3}, {2.0, -4.0, 0.5});
  Tensor y = reciprocal(x);
  CHECK(y[0] == 0.5);
  CHECK(y[1] == -0.25);
  CHECK(y[2] == 2.0);
  CHECK_THROWS_AS(reciprocal(Tensor({2}, {1.0, 0.0})), std::invalid_argument);

  auto f = [](Graph&, const Tensor& t) { return sum_all(mul(reciprocal(t), t)); };
  Tensor a({4}, {1.5, -2.0, 3.0, 0.25});
  CHECK(finite_diff_check(f, a) < 1e-6);
  auto f2 = [](Graph&, const Tensor& t) { return sum_all(reciprocal(t)); };
  CHECK(finite_diff_check(f2, a) < 1e-6);
}

TEST_CASE("backward rejects non-scalar loss") {
  Graph g;
  Tensor xt = g.leaf(Tensor({2}, {1.0, 2.0}));
  Tensor y = mul(xt, xt);
  CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
}

TEST_CASE("untracked inputs receive no gradient") {
  Graph g;
  Tensor a = g.leaf(Tensor({2}, {1.0, 2.0}));
  Tensor b({2}, {3.0, 4.0});
  Tensor loss = sum_all(mul(a, b));
  g.backward(loss);
  CHECK(g.grad(a) != nullptr);
  CHECK(g.grad(b) == nullptr);
}

TEST_CASE("composed network gradient matches central differences") {
  Rng rng(13);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w1 = random_tensor({4, 8}, rng, 0.5);
  Tensor w2 = random_tensor({8, 2}, rng, 0.5);
  auto f = [](Graph&, const std::vector<Tensor>& xs) {
    Tensor h = relu(matmul(xs[0], xs[1]));
    Tensor o = softmax_axis(matmul(h, xs[2]), 1);
    return sum_all(mul(o, o));
  };
  CHECK(finite_diff_check_multi(f, {x, w1, w2}, 1e-6) < 1e-4);
}

TEST_CASE("finite differences on linear and quadratic closed forms") {
  Rng rng(17);
  Tensor x = random_tensor({7}, rng);
  auto linear = [](Graph&, const Tensor& t) { return scale(sum_all(t), 3.0); };
  CHECK(finite_diff_check(linear, x, 1e-3) < 1e-10);

  auto quadratic = [](Graph&, const Tensor& t) { return sum_all(mul(t, t)); };
  CHECK(finite_diff_check(quadratic, x) < 1e-7);
}

TEST_CASE("elementwise and shape ops pass gradient checks") {
  Rng rng(19);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  Tensor bias = random_tensor({4}, rng);

  auto f_add = [&b](Graph& g, const Tensor& t) { return sum_all(mul(add(t, g.leaf(b)), t)); };
  CHECK(finite_diff_check(f_add, a) < 1e-6);

  auto f_bias = [&a](Graph& g, const Tensor& t) {
    Tensor s = add(g.leaf(a), t);  // broadcast over rows
    return sum_all(mul(s, s));
  };
  CHECK(finite_diff_check(f_bias, bias) < 1e-6);

  auto f_mix = [](Graph&, const Tensor& t) {
    Tensor tr = transpose(t);
    Tensor r = reshape(tr, {2, 6});
    Tensor s = sigmoid(r);
    return sum_all(mul(s, s));
  };
  CHECK(finite_diff_check(f_mix, a) < 1e-5);

  auto f_select = [](Graph&, const Tensor& t) {
    Tensor c = stack_axis0({t, scale(t, 2.0)});         // [2,3,4]
    Tensor s = select_axis1(c, 1);                      // [2,4]
    Tensor m = mean_axis0(s);                           // [4]
    return sum_all(mul(m, m));
  };
  CHECK(finite_diff_check(f_select, a) < 1e-6);

  auto f_perm = [](Graph&, const Tensor& t) {
    Tensor p = permute_rows(t, {2, 0, 1});
    return sum_all(mul(p, p));
  };
  CHECK(finite_diff_check(f_perm, a) < 1e-6);

  auto f_cols = [&b](Graph& g, const Tensor& t) {
    Tensor c = concat_cols({t, g.leaf(b)});
    return sum_all(mul(c, c));
  };
  CHECK(finite_diff_check(f_cols, a) < 1e-6);
}

TEST_CASE("forward is bit-identical across repeated runs") {
  Rng rng(23);
  Tensor a = random_tensor({4, 4}, rng);
  Tensor b = random_tensor({4, 4}, rng);
  Tensor first = softmax_axis(matmul(a, b), 1);
  for (int rep = 0; rep < 3; ++rep) {
    Tensor again = softmax_axis(matmul(a, b), 1);
    for (int i = 0; i < first.size(); ++i) CHECK(first[i] == again[i]);
  }
}

TEST_CASE("gradients accumulate across reuse of a tensor") {
  Graph g;
  Tensor x = g.leaf(Tensor({1}, {3.0}));
  Tensor y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 7
  g.backward(y);
  const auto* gr = g.grad(x);
  REQUIRE(gr != nullptr);
  CHECK((*gr)[0] == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("graph reset drops nodes") {
  Graph g;
  Tensor x = g.leaf(Tensor({1}, {1.0}));
  (void)x;
  CHECK(g.node_count() == 1);
  g.reset();
  CHECK(g.node_count() == 0);
}

// SPDX-License-Identifier: Apache-2.0
//
// Tensor core: shape algebra, matmul, permutation ops, grad_check.

#include <catch2/catch_amalgamated.hpp>

#include "dig/autodiff.hpp"
#include "dig/tensor.hpp"

using namespace dig;

TEST_CASE("matmul identity and hand case", "[tensor]") {
  Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  Tensor i2 = Tensor::eye(2);
  CHECK(max_abs_diff(matmul(i2, a), a) == 0.0);

  Tensor b = Tensor::from_rows({{0}, {1}});
  Tensor c = matmul(a, b);
  CHECK(c(0, 0) == 2.0);
  CHECK(c(1, 0) == 4.0);
}

TEST_CASE("matmul shape mismatch", "[tensor]") {
  Tensor a({2, 3}), b({4, 2});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul gradient of sum equals ones * b^T", "[tensor]") {
  Rng rng(11);
  Tensor a = Tensor::randn(rng, {3, 4});
  Tensor b = Tensor::randn(rng, {4, 2});

  auto f = [&](Tape& t, Var x) { return ad::sum_all(ad::matmul(x, t.leaf(b))); };
  auto rep = grad_check(f, a, 1e-5, 1e-6);
  CHECK(rep.pass);

  // closed form: d(sum(a b))/da = ones(3,2) b^T
  Tape tape;
  Var av = tape.leaf(a);
  tape.backward(f(tape, av));
  Tensor expected = matmul(Tensor::ones({3, 2}), transpose2d(b));
  CHECK(max_abs_diff(tape.grad(av), expected) < 1e-12);
}

TEST_CASE("flip and grid permutations", "[tensor]") {
  Tensor x = Tensor::from_rows({{1}, {2}, {3}});
  Tensor f = flip_seq(x);
  CHECK(f(0, 0) == 3.0);
  CHECK(f(1, 0) == 2.0);
  CHECK(f(2, 0) == 1.0);
  CHECK(max_abs_diff(flip_seq(flip_seq(x)), x) == 0.0);

  // flatten(transpose(reshape2d([a,b,c,d]))) = [a,c,b,d]
  Tensor t4 = Tensor::from_rows({{1}, {2}, {3}, {4}});
  Tensor r = flatten_grid(transpose_grid(reshape2d(t4)));
  CHECK(r(0, 0) == 1.0);
  CHECK(r(1, 0) == 3.0);
  CHECK(r(2, 0) == 2.0);
  CHECK(r(3, 0) == 4.0);

  CHECK_THROWS_AS(reshape2d(Tensor({3, 2})), ShapeError);

  Rng rng(5);
  Tensor m = Tensor::randn(rng, {4, 6});
  CHECK(max_abs_diff(transpose2d(transpose2d(m)), m) == 0.0);
  CHECK(max_abs_diff(flatten_grid(reshape2d(m)), m) == 0.0);
}

TEST_CASE("elementwise ops and activations", "[tensor]") {
  Tensor x = Tensor::from_rows({{0.0, 1.0, -2.0}});
  Tensor s = sigmoid(x);
  CHECK(s(0, 0) == Catch::Approx(0.5));
  Tensor sw = silu(x);
  CHECK(sw(0, 0) == 0.0);
  CHECK(sw(0, 1) == Catch::Approx(1.0 / (1.0 + std::exp(-1.0))));
  Tensor g = gelu(x);
  CHECK(g(0, 0) == 0.0);
  CHECK(g(0, 1) == Catch::Approx(0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)))));
}

TEST_CASE("layernorm rows", "[tensor]") {
  Rng rng(3);
  Tensor x = Tensor::randn(rng, {5, 8}, 2.5);
  Tensor y = layernorm_rows(x);
  for (std::int64_t i = 0; i < 5; ++i) {
    double m = 0, v = 0;
    for (std::int64_t j = 0; j < 8; ++j) m += y(i, j);
    m /= 8;
    for (std::int64_t j = 0; j < 8; ++j) v += (y(i, j) - m) * (y(i, j) - m);
    v /= 8;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == Catch::Approx(1.0).margin(1e-4));
  }

  Tensor gamma = Tensor::full({1, 8}, 2.0);
  Tensor beta = Tensor::full({1, 8}, -1.0);
  Tensor ya = layernorm_rows(x, &gamma, &beta);
  CHECK(max_abs_diff(ya, add_scalar(scale(y, 2.0), -1.0)) < 1e-12);
}

TEST_CASE("softmax rows sum to one", "[tensor]") {
  Rng rng(4);
  Tensor x = Tensor::randn(rng, {3, 7});
  Tensor y = softmax_rows(x);
  for (std::int64_t i = 0; i < 3; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < 7; ++j) s += y(i, j);
    CHECK(s == Catch::Approx(1.0));
  }
}

TEST_CASE("grad_check quadratic", "[tensor]") {
  Tensor x = Tensor::from_rows({{1.0, 2.0}});
  auto f = [](Tape&, Var v) { return ad::sum_all(ad::square(v)); };
  auto rep = grad_check(f, x, 1e-5, 1e-8);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-8);

  Tape tape;
  Var v = tape.leaf(x);
  tape.backward(f(tape, v));
  Tensor g = tape.grad(v);
  CHECK(g.at(0) == Catch::Approx(2.0));
  CHECK(g.at(1) == Catch::Approx(4.0));
}

TEST_CASE("grad_check flags detached path", "[tensor]") {
  Tensor x = Tensor::from_rows({{1.5, -0.5}});
  auto f = [](Tape&, Var v) { return ad::sum_all(ad::square(ad::detach(v))); };
  auto rep = grad_check(f, x);
  CHECK(rep.zero_adjoint);
}

TEST_CASE("grad_check rejects NaN evaluations", "[tensor]") {
  Tensor x = Tensor::from_rows({{-1.0}});
  auto f = [](Tape&, Var v) { return ad::sum_all(ad::pow_scalar(v, 0.5)); };
  CHECK_THROWS_AS(grad_check(f, x), NumericError);
}

TEST_CASE("tensor invariants", "[tensor]") {
  CHECK_THROWS_AS(Tensor({0, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
}

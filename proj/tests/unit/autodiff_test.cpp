#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "qg/autodiff.hpp"
#include "qg/error.hpp"

using qg::Parameter;
using qg::Tape;
using qg::Tensor;
using qg::Var;

namespace {

std::size_t rand_dim(std::mt19937_64& rng) { return std::uniform_int_distribution<std::size_t>(1, 8)(rng); }

// Builds loss = sum(w ⊙ f(p)) with a fixed random weighting so every output
// entry contributes a distinct adjoint.
double check_op(std::mt19937_64& rng, Parameter& p, const std::function<Var(Tape&, Var)>& op) {
  Tensor weights;
  auto build = [&](Tape& t) {
    Var out = op(t, t.param(p));
    if (weights.empty()) weights = oracle::random_tensor(rng, out.shape());
    return qg::sum(qg::mul(out, t.constant(weights)));
  };
  {
    Tape t;
    Var loss = build(t);
    t.backward(loss);
  }
  return oracle::fd_block_error(
      [&] {
        Tape t(false);
        return build(t).value().item();
      },
      p);
}

}  // namespace

TEST(Backward, SumGivesOnes) {
  Parameter p("p", Tensor::matrix({{1, -2, 3}, {0.5, 4, 6}}));
  Tape t;
  t.backward(qg::sum(t.param(p)));
  for (double g : p.grad.data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesValue) {
  Parameter p("p", Tensor::matrix({{1, -2, 3}, {0.5, 4, 6}}));
  Tape t;
  t.backward(qg::scale(qg::sum_squares(t.param(p)), 0.5));
  EXPECT_EQ(p.grad, p.value);
}

TEST(Backward, RejectsNonScalarLoss) {
  Parameter p("p", Tensor({2, 2}, 1.0));
  Tape t;
  Var x = t.param(p);
  EXPECT_THROW(t.backward(x), qg::ShapeError);
}

TEST(Backward, GradientsAreZeroedBetweenPasses) {
  Parameter p("p", Tensor({1, 3}, 2.0));
  for (int i = 0; i < 3; ++i) {
    Tape t;
    t.backward(qg::sum(t.param(p)));
  }
  for (double g : p.grad.data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SharedParameterAccumulatesOnce) {
  Parameter p("p", Tensor::matrix({{2.0, 3.0}}));
  Tape t;
  Var a = t.param(p);
  Var b = t.param(p);
  EXPECT_EQ(a.id(), b.id());
  t.backward(qg::sum(qg::mul(a, b)));  // d/dp sum(p^2) = 2p
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
  EXPECT_DOUBLE_EQ(p.grad[1], 6.0);
}

TEST(Backward, TwoLayerCompositionMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  Parameter w1("w1", oracle::random_tensor(rng, {4, 6}));
  Parameter b1("b1", oracle::random_tensor(rng, {1, 6}));
  Parameter w2("w2", oracle::random_tensor(rng, {6, 3}));
  Tensor x = oracle::random_tensor(rng, {5, 4});
  std::vector<std::int32_t> labels{0, 2, 1, 1, 0};
  auto build = [&](Tape& t) {
    Var h = qg::relu(qg::add_row(qg::matmul(t.constant(x), t.param(w1)), t.param(b1)));
    return qg::cross_entropy(qg::matmul(h, t.param(w2)), labels, -1);
  };
  Tape t;
  t.backward(build(t));
  auto f = [&] {
    Tape tt(false);
    return build(tt).value().item();
  };
  EXPECT_LT(oracle::fd_relative_error(f, w1), 1e-4);
  EXPECT_LT(oracle::fd_relative_error(f, b1), 1e-4);
  EXPECT_LT(oracle::fd_relative_error(f, w2), 1e-4);
}

TEST(Primitives, EveryAdjointMatchesFiniteDifferences) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = rand_dim(rng), n = rand_dim(rng), k = rand_dim(rng);
    Parameter a("a", oracle::random_tensor(rng, {m, n}));
    Tensor other_mn = oracle::random_tensor(rng, {m, n});
    Tensor other_nk = oracle::random_tensor(rng, {n, k});
    Tensor other_kn = oracle::random_tensor(rng, {k, n});
    Tensor bias = oracle::random_tensor(rng, {1, n});
    Tensor gain = oracle::random_tensor(rng, {1, n}, 0.5, 1.5);
    std::vector<std::int32_t> ids;
    for (std::size_t i = 0; i < k + 2; ++i) ids.push_back(static_cast<std::int32_t>(rng() % m));
    std::vector<std::int32_t> labels;
    for (std::size_t i = 0; i < m; ++i) labels.push_back(static_cast<std::int32_t>(rng() % n));
    labels[0] = -1;  // one ignored row
    if (m == 1) labels[0] = 0;

    const double tol = 1e-4;
    EXPECT_LT(check_op(rng, a, [&](Tape& t, Var x) { return qg::matmul(x, t.constant(other_nk)); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape& t, Var x) { return qg::matmul(t.constant(qg::kernels::transpose(other_mn)), x); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape& t, Var x) { return qg::matmul_nt(x, t.constant(other_kn)); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape& t, Var x) { return qg::matmul_nt(t.constant(other_kn), x); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape& t, Var x) { return qg::add(x, t.constant(other_mn)); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape& t, Var x) { return qg::sub(t.constant(other_mn), x); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape& t, Var x) { return qg::mul(x, t.constant(other_mn)); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape&, Var x) { return qg::mul(x, x); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape&, Var x) { return qg::scale(x, -1.7); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape& t, Var x) { return qg::add_row(x, t.constant(bias)); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape&, Var x) { return qg::softmax_rows(x); }), tol);
    // a single-column layer norm is constant in x, so there is nothing to compare
    if (n > 1) {
      EXPECT_LT(check_op(rng, a, [&](Tape& t, Var x) { return qg::layer_norm(x, t.constant(gain), t.constant(bias)); }),
                tol);
    }
    EXPECT_LT(check_op(rng, a, [&](Tape&, Var x) { return qg::embedding(x, ids); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape&, Var x) { return qg::cross_entropy(x, labels, -1); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape&, Var x) { return qg::cross_entropy(x, labels, -1, 0.2); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape& t, Var x) { return qg::concat_cols({x, t.constant(other_mn), x}); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape&, Var x) { return qg::slice_cols(x, n / 2, n - n / 2); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape& t, Var x) { return qg::concat_rows({t.constant(other_mn), x}); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape&, Var x) { return qg::slice_rows(x, m / 2, m - m / 2); }), tol);
    EXPECT_LT(check_op(rng, a, [&](Tape&, Var x) { return qg::sum_squares(x); }), tol);
  }
}

TEST(Primitives, LayerNormGainAndBiasGradients) {
  std::mt19937_64 rng(9);
  Parameter gain("g", oracle::random_tensor(rng, {1, 5}, 0.5, 1.5));
  Parameter bias("b", oracle::random_tensor(rng, {1, 5}));
  Tensor x = oracle::random_tensor(rng, {3, 5});
  Tensor w = oracle::random_tensor(rng, {3, 5});
  auto build = [&](Tape& t) {
    return qg::sum(qg::mul(qg::layer_norm(t.constant(x), t.param(gain), t.param(bias)), t.constant(w)));
  };
  Tape t;
  t.backward(build(t));
  auto f = [&] {
    Tape tt(false);
    return build(tt).value().item();
  };
  EXPECT_LT(oracle::fd_relative_error(f, gain), 1e-4);
  EXPECT_LT(oracle::fd_relative_error(f, bias), 1e-4);
}

TEST(Primitives, ReluDerivativeAwayFromKink) {
  Parameter p("p", Tensor::matrix({{-1.0, 0.5, 2.0}}));
  Tape t;
  t.backward(qg::sum(qg::relu(t.param(p))));
  EXPECT_EQ(p.grad, Tensor::matrix({{0.0, 1.0, 1.0}}));
}

TEST(Primitives, CrossEntropyRejectsAllPadding) {
  Tape t;
  Var z = t.constant(Tensor({2, 3}));
  EXPECT_THROW(qg::cross_entropy(z, {0, 0}, 0), qg::InputError);
}

TEST(Primitives, ShapeMismatchesFailLoudly) {
  Tape t;
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({3, 2}));
  EXPECT_THROW(qg::add(a, b), qg::ShapeError);
  EXPECT_THROW(qg::mul(a, b), qg::ShapeError);
  EXPECT_THROW(qg::matmul(a, a), qg::ShapeError);
  EXPECT_THROW(qg::concat_cols({a, b}), qg::ShapeError);
  EXPECT_THROW(qg::slice_cols(a, 2, 2), qg::ShapeError);
  EXPECT_THROW(qg::embedding(a, {5}), qg::InputError);
}

TEST(CheckGradients, LinearFunctionIsExact) {
  std::mt19937_64 rng(1);
  Parameter p("p", oracle::random_tensor(rng, {3, 4}));
  Tensor w = oracle::random_tensor(rng, {3, 4});
  double err = qg::check_gradients(
      [&](Tape& t) { return qg::sum(qg::mul(t.param(p), t.constant(w))); }, p, 1e-5);
  EXPECT_LT(err, 1e-10);
}

TEST(CheckGradients, SoftmaxOfMatmul) {
  std::mt19937_64 rng(5);
  Parameter p("p", oracle::random_tensor(rng, {4, 3}));
  Tensor x = oracle::random_tensor(rng, {5, 4});
  Tensor w = oracle::random_tensor(rng, {5, 3});
  double err = qg::check_gradients(
      [&](Tape& t) {
        return qg::sum(qg::mul(qg::softmax_rows(qg::matmul(t.constant(x), t.param(p))), t.constant(w)));
      },
      p, 1e-5);
  EXPECT_LT(err, 1e-4);
}

TEST(CheckGradients, RejectsZeroStep) {
  Parameter p("p", Tensor({1, 1}, 1.0));
  EXPECT_THROW(qg::check_gradients([&](Tape& t) { return qg::sum(t.param(p)); }, p, 0.0),
               qg::InputError);
}

TEST(CheckGradients, RejectsNondeterministicFunction) {
  Parameter p("p", Tensor({1, 1}, 1.0));
  int calls = 0;
  EXPECT_THROW(qg::check_gradients(
                   [&](Tape& t) { return qg::scale(qg::sum(t.param(p)), 1.0 + (++calls)); }, p, 1e-5),
               qg::InputError);
}

#include "psgd/graph.hpp"
#include "psgd/model_zoo.hpp"
#include "psgd/problem.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace psgd;

namespace {

// Single affine layer y = W x + b with MSE loss.
CompGraph affine_graph(Index in, Index out, LossKind loss = LossKind::MeanSquared) {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("w", out, in);
  layout->add("b", out, 1);
  GraphBuilder gb(layout, in);
  const int y = gb.affine(gb.input(), "w", std::string("b"));
  return std::move(gb).build(y, loss);
}

}  // namespace

TEST(Forward, IdentityLayerOnMatchingTargetIsZero) {
  const auto g = affine_graph(3, 3);
  ParamVector x = ParamVector::Zero(12);
  g.layout()->view(x, 0) = RealMatrix::Identity(3, 3);
  RealMatrix batch = RealMatrix::Random(3, 5);
  EXPECT_EQ(forward(g, x, batch, batch), 0.0);
}

TEST(Forward, QuadraticDiagValue) {
  RealMatrix A = RealMatrix::Zero(2, 2);
  A(0, 0) = 1.0;
  A(1, 1) = 2.0;
  QuadraticProblem q(A, RealVector::Zero(2));
  EXPECT_DOUBLE_EQ(q.loss(RealVector::Ones(2)), 1.5);
  const RealVector g = q.gradient(RealVector::Ones(2));
  EXPECT_DOUBLE_EQ(g[0], 1.0);
  EXPECT_DOUBLE_EQ(g[1], 2.0);
}

TEST(Forward, EmptyBatchIsContractError) {
  const auto g = affine_graph(2, 2);
  const ParamVector x = ParamVector::Zero(6);
  EXPECT_THROW(forward(g, x, RealMatrix(2, 0), RealMatrix(2, 0)), ContractError);
}

TEST(Forward, ShapeMismatchIsContractError) {
  const auto g = affine_graph(2, 2);
  const ParamVector x = ParamVector::Zero(6);
  EXPECT_THROW(forward(g, x, RealMatrix::Ones(3, 4), RealMatrix::Ones(2, 4)), ContractError);
  EXPECT_THROW(forward(g, x, RealMatrix::Ones(2, 4), RealMatrix::Ones(2, 3)), ContractError);
  EXPECT_THROW(forward(g, ParamVector::Zero(5), RealMatrix::Ones(2, 4), RealMatrix::Ones(2, 4)),
               ContractError);
}

TEST(Forward, NonFiniteIntermediateCarriesNodeId) {
  const auto g = affine_graph(2, 2);
  ParamVector x = ParamVector::Zero(6);
  x[0] = std::numeric_limits<double>::infinity();
  try {
    forward(g, x, RealMatrix::Ones(2, 1), RealMatrix::Ones(2, 1));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    ASSERT_TRUE(e.node().has_value());
    EXPECT_EQ(*e.node(), 1);
  }
}

TEST(Gradient, ZeroAtQuadraticMinimizer) {
  auto q = make_quadratic({.dim = 6, .condition = 5.0, .seed = 3, .offset = true});
  EXPECT_LT(q.gradient(q.minimizer()).norm(), 1e-10);
}

TEST(Gradient, HomogeneousQuadraticIsLinear) {
  auto q = make_quadratic({.dim = 5, .condition = 3.0, .seed = 1});
  Rng rng(9);
  std::normal_distribution<double> n;
  for (int rep = 0; rep < 20; ++rep) {
    RealVector x(5);
    for (auto& v : x) v = n(rng);
    const double a = n(rng);
    EXPECT_LT((q.gradient(a * x) - a * q.gradient(x)).norm(), 1e-12 * (1.0 + q.gradient(x).norm()));
  }
}

TEST(Gradient, DeterministicBitIdentical) {
  const auto net = build_mlp({{4, 8, 3}, Activation::Tanh, LossKind::SoftmaxCrossEntropy, 2});
  RealMatrix X = RealMatrix::Random(4, 7);
  RealMatrix T = RealMatrix::Zero(3, 7);
  for (Index j = 0; j < 7; ++j) T(j % 3, j) = 1.0;
  const auto a = value_and_gradient(net.graph, net.params, X, T);
  const auto b = value_and_gradient(net.graph, net.params, X, T);
  EXPECT_TRUE(bit_equal(a.second, b.second));
  EXPECT_EQ(std::memcmp(&a.first, &b.first, sizeof(double)), 0);
}

TEST(Gradient, MatchesFiniteDifferencesOnZoo) {
  RealMatrix X = RealMatrix::Random(4, 6);
  RealMatrix T = RealMatrix::Zero(3, 6);
  for (Index j = 0; j < 6; ++j) T(j % 3, j) = 1.0;
  std::vector<Network> zoo;
  zoo.push_back(build_mlp({{4, 6, 3}, Activation::Tanh, LossKind::MeanSquared, 1}));
  zoo.push_back(build_mlp({{4, 5, 5, 3}, Activation::Tanh, LossKind::SoftmaxCrossEntropy, 2}));
  zoo.push_back(build_lfc_composite({{4, 6, 3}, 0.5, Activation::Tanh, LossKind::MeanSquared, 3}).super);
  zoo.push_back(build_low_rank_mlp({{4, 6, 3}, 0.5, Activation::Tanh, LossKind::SoftmaxCrossEntropy, 4}));
  zoo.push_back(build_wide_deep({{4, 6, 3}, Activation::Tanh, LossKind::MeanSquared, 5}).super);
  for (const auto& net : zoo) {
    const ParamVector g = gradient(net.graph, net.params, X, T);
    const ParamVector fd = finite_diff_gradient(
        [&](const ParamVector& p) { return forward(net.graph, p, X, T); }, net.params);
    EXPECT_LT(max_relative_error(g, fd), 1e-6);
  }
}

TEST(FiniteDiff, SquareAtThree) {
  const RealVector x = RealVector::Constant(1, 3.0);
  const auto g = finite_diff_gradient([](const RealVector& v) { return v[0] * v[0]; }, x, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
}

TEST(FiniteDiff, ConstantIsZero) {
  const auto g = finite_diff_gradient([](const RealVector&) { return 4.0; }, RealVector::Ones(3));
  EXPECT_EQ(g.norm(), 0.0);
}

TEST(FiniteDiff, QuadraticDiag) {
  auto f = [](const RealVector& v) { return 0.5 * (v[0] * v[0] + 2.0 * v[1] * v[1]); };
  const auto g = finite_diff_gradient(f, RealVector::Ones(2));
  EXPECT_NEAR(g[0], 1.0, 1e-7);
  EXPECT_NEAR(g[1], 2.0, 1e-7);
}

TEST(FiniteDiff, NonPositiveStepIsContractError) {
  EXPECT_THROW(finite_diff_gradient([](const RealVector&) { return 0.0; }, RealVector::Ones(1), 0.0),
               ContractError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numeric>

#include "repfuse/autodiff.hpp"
#include "repfuse/error.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace ad = repfuse::ad;
using repfuse::Error;
using repfuse::ErrorKind;
using repfuse::Rng;
using repfuse::Shape;
using repfuse::Tensor;
using namespace repfuse::testing;

namespace {

constexpr double kTol = 1e-4;

}  // namespace

TEST(Forward, ZeroWeightLinearLayerGivesZero) {
  Rng rng(1);
  auto x = ad::constant(random_tensor({3, 4}, rng));
  auto w = ad::constant(Tensor({4, 2}, 0.0));
  auto out = ad::matmul(x, w);
  for (double v : out.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, IdentityProgram) {
  auto x = ad::constant(Tensor({1, 1}, 0.37));
  auto out = ad::reshape(ad::permute(x, {1, 0}), {1, 1});
  EXPECT_EQ(out.value()[0], 0.37);
}

TEST(Forward, TwoLayerMlpMatchesHandArithmetic) {
  // x W1 + b1 = [2.6, 0.2, -1.05] -> relu [2.6, 0.2, 0] -> W2 + b2 = [3.5, -3.0]
  auto x = ad::constant(Tensor({1, 2}, {1.0, 2.0}));
  auto w1 = ad::constant(Tensor({2, 3}, {0.5, -1.0, 0.25, 1.0, 0.5, -0.5}));
  auto b1 = ad::constant(Tensor({3}, {0.1, 0.2, -0.3}));
  auto w2 = ad::constant(Tensor({3, 2}, {1.0, -1.0, 2.0, 0.5, 3.0, 1.0}));
  auto b2 = ad::constant(Tensor({2}, {0.5, -0.5}));
  auto h = ad::relu(ad::bias_add(ad::matmul(x, w1), b1));
  auto out = ad::bias_add(ad::matmul(h, w2), b2);
  EXPECT_NEAR(out.value()[0], 3.5, 1e-12);
  EXPECT_NEAR(out.value()[1], -3.0, 1e-12);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(2);
  auto x = ad::variable(random_tensor({2, 3}, rng));
  const ad::Var wrt[] = {x};
  auto g = ad::grad(ad::sum(x), wrt)[0];
  for (double v : g.value().data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, DotWithSelfGivesTwiceInput) {
  Rng rng(3);
  const Tensor xv = random_tensor({5}, rng);
  auto x = ad::variable(xv);
  const ad::Var wrt[] = {x};
  auto g = ad::grad(ad::dot(x, x), wrt)[0];
  for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_DOUBLE_EQ(g.value()[i], 2.0 * xv[i]);
}

TEST(Backward, UnreachedInputGetsZero) {
  auto x = ad::variable(Tensor({2}, 1.0));
  auto y = ad::variable(Tensor({3}, 1.0));
  const ad::Var wrt[] = {x, y};
  auto g = ad::grad(ad::sum(x), wrt);
  EXPECT_EQ(g[1].value(), Tensor({3}, 0.0));
}

// --- first-order finite-difference suite, one case per primitive -------------

class PrimitiveFd : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveFd, FirstOrderMatchesCentralDifferences) {
  Rng rng(11);
  const auto& c = GetParam();
  EXPECT_LE(first_order_error(c.program, c.inputs(rng), rng), kTol) << c.name;
}

TEST_P(PrimitiveFd, SecondOrderMatchesCentralDifferences) {
  Rng rng(12);
  const auto& c = GetParam();
  EXPECT_LE(second_order_error(c.program, c.inputs(rng), rng), kTol) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveFd, ::testing::ValuesIn(primitive_cases()),
                         [](const auto& info) { return std::string(info.param.name); });

// --- network-level checks -------------------------------------------------------

namespace {

ad::Var mlp_loss(const std::vector<ad::Var>& v, std::shared_ptr<const std::vector<int>> y) {
  // v = {x, w1, b1, w2, b2}
  auto h = ad::relu(ad::bias_add(ad::matmul(v[0], v[1]), v[2]));
  return ad::softmax_cross_entropy(ad::bias_add(ad::matmul(h, v[3]), v[4]), std::move(y));
}

std::vector<Tensor> mlp_inputs(Rng& r) {
  return {random_tensor({4, 5}, r), random_tensor({5, 6}, r), random_tensor({6}, r, -0.1, 0.1),
          random_tensor({6, 3}, r), random_tensor({3}, r, -0.1, 0.1)};
}

}  // namespace

TEST(Backward, MlpCrossEntropyMatchesFiniteDifferences) {
  Rng rng(21);
  auto y = labels({0, 2, 1, 2});
  Program p = [y](const auto& v) { return mlp_loss(v, y); };
  EXPECT_LE(first_order_error(p, mlp_inputs(rng), rng), kTol);
}

TEST(GradOfGrad, SquaredGradientNormOfLinearForm) {
  // ||d(x.w)/dw||^2 = ||x||^2, so d/dx = 2x.
  Rng rng(31);
  const Tensor xv = random_tensor({1, 4}, rng);
  auto x = ad::variable(xv);
  auto w = ad::variable(random_tensor({4, 1}, rng));
  const ad::Var wrt_w[] = {w};
  auto gw = ad::grad(ad::sum(ad::matmul(x, w)), wrt_w, true)[0];
  auto gx = ad::grad_of_grad(ad::dot(gw, gw), x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(gx.value()[i], 2.0 * xv[i], 1e-14);
}

TEST(GradOfGrad, MlpGradientMatchingNormMatchesFiniteDifferences) {
  // root(delta) = || d/dw L(w, xbar + delta, y) - t ||_2
  Rng rng(32);
  auto y = labels({1});
  auto params = mlp_inputs(rng);
  const Tensor xbar = random_tensor({1, 5}, rng, 0.0, 1.0);
  const Tensor delta0 = random_tensor({1, 5}, rng, -0.1, 0.1);
  std::vector<Tensor> target;
  for (std::size_t i = 1; i < params.size(); ++i) target.push_back(random_tensor(params[i].shape(), rng, -0.2, 0.2));

  auto root_of = [&](const Tensor& delta, bool record) {
    std::vector<ad::Var> v{ad::add(ad::constant(xbar), ad::variable(delta))};
    for (std::size_t i = 1; i < params.size(); ++i) v.push_back(ad::variable(params[i]));
    std::vector<ad::Var> w(v.begin() + 1, v.end());
    auto gw = ad::grad(mlp_loss(v, y), w, record);
    ad::Var sq = ad::constant(Tensor::scalar(0.0));
    for (std::size_t i = 0; i < gw.size(); ++i) {
      auto d = ad::sub(gw[i], ad::constant(target[i]));
      sq = ad::add(sq, ad::dot(d, d));
    }
    return std::make_pair(ad::sqrt(sq), v[0]);
  };

  auto delta = ad::variable(delta0);
  std::vector<ad::Var> v{ad::add(ad::constant(xbar), delta)};
  for (std::size_t i = 1; i < params.size(); ++i) v.push_back(ad::variable(params[i]));
  std::vector<ad::Var> w(v.begin() + 1, v.end());
  auto gw = ad::grad(mlp_loss(v, y), w, true);
  ad::Var sq = ad::constant(Tensor::scalar(0.0));
  for (std::size_t i = 0; i < gw.size(); ++i) {
    auto d = ad::sub(gw[i], ad::constant(target[i]));
    sq = ad::add(sq, ad::dot(d, d));
  }
  auto analytic = ad::grad_of_grad(ad::sqrt(sq), delta);
  auto numeric = finite_difference([&](const Tensor& d) { return root_of(d, false).first.value().item(); }, delta0);
  EXPECT_LE(max_relative_error(analytic.value(), numeric), kTol);
}

TEST(GradOfGrad, ExactMatchPointGivesZeroGradient) {
  // Target equals the gradient at the evaluation point, so the norm is 0 and
  // the subgradient there is 0.
  Rng rng(33);
  auto y = labels({2});
  auto params = mlp_inputs(rng);
  const Tensor x0 = random_tensor({1, 5}, rng, 0.0, 1.0);
  std::vector<Tensor> target;
  {
    std::vector<ad::Var> v{ad::constant(x0)};
    for (std::size_t i = 1; i < params.size(); ++i) v.push_back(ad::variable(params[i]));
    std::vector<ad::Var> w(v.begin() + 1, v.end());
    for (auto& g : ad::grad(mlp_loss(v, y), w)) target.push_back(g.value());
  }
  auto x = ad::variable(x0);
  std::vector<ad::Var> v{x};
  for (std::size_t i = 1; i < params.size(); ++i) v.push_back(ad::variable(params[i]));
  std::vector<ad::Var> w(v.begin() + 1, v.end());
  auto gw = ad::grad(mlp_loss(v, y), w, true);
  ad::Var sq = ad::constant(Tensor::scalar(0.0));
  for (std::size_t i = 0; i < gw.size(); ++i) {
    auto d = ad::sub(gw[i], ad::constant(target[i]));
    sq = ad::add(sq, ad::dot(d, d));
  }
  auto root = ad::l2_norm(ad::reshape(sq, Shape{1}));
  EXPECT_LE(std::abs(root.value().item()), 1e-10);
  auto gx = ad::grad_of_grad(ad::sqrt(sq), x);
  EXPECT_LE(repfuse::l2_norm(gx.value().data()), 1e-10);
}

// --- convolution against a quadruple-loop oracle --------------------------------

TEST(Conv2d, MatchesQuadrupleLoopOracle) {
  Rng rng(41);
  for (std::size_t pad : {0u, 1u, 2u}) {
    const Tensor xv = random_tensor({2, 3, 6, 6}, rng);
    const Tensor wv = random_tensor({4, 3, 3, 3}, rng);
    auto x = ad::variable(xv);
    auto w = ad::variable(wv);
    auto out = ad::conv2d(x, w, pad);
    const Tensor gv = random_tensor(out.shape(), rng);
    const ad::Var wrt[] = {x, w};
    auto grads = ad::grad(ad::dot(out, ad::constant(gv)), wrt);
    const auto oracle = brute_force_conv(xv, wv, gv, pad);
    EXPECT_LE(max_abs_diff(out.value(), oracle.out), 1e-10) << "pad " << pad;
    EXPECT_LE(max_abs_diff(grads[0].value(), oracle.dx), 1e-10) << "pad " << pad;
    EXPECT_LE(max_abs_diff(grads[1].value(), oracle.dw), 1e-10) << "pad " << pad;
  }
}

// --- algebraic properties -------------------------------------------------------

TEST(Properties, BackwardIsLinearInTheRoot) {
  Rng rng(51);
  auto y = labels({0, 1, 2, 0});
  auto in = mlp_inputs(rng);
  std::vector<ad::Var> v;
  for (auto& t : in) v.push_back(ad::variable(t));
  auto f = mlp_loss(v, y);
  auto g = ad::dot(ad::relu(ad::matmul(v[0], v[1])), ad::constant(random_tensor({4, 6}, rng)));
  auto both = ad::grad(ad::add(f, g), v);
  auto gf = ad::grad(f, v);
  auto gg = ad::grad(g, v);
  for (std::size_t i = 0; i < v.size(); ++i) {
    Tensor s(gf[i].shape());
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = gf[i].value()[k] + gg[i].value()[k];
    EXPECT_LE(max_abs_diff(both[i].value(), s), 1e-12);
  }
}

TEST(Properties, ReplayingAGraphIsBitIdentical) {
  Rng rng(52);
  auto y = labels({1, 1, 0, 2});
  auto in = mlp_inputs(rng);
  std::vector<ad::Var> v;
  for (auto& t : in) v.push_back(ad::variable(t));
  auto loss = mlp_loss(v, y);
  auto a = ad::grad(loss, v);
  auto b = ad::grad(loss, v);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(a[i].value(), b[i].value());
}

// --- error paths ---------------------------------------------------------------------

TEST(Errors, NonScalarRoot) {
  auto x = ad::variable(Tensor({3}, 1.0));
  const ad::Var wrt[] = {x};
  try {
    ad::grad(ad::scale(x, 2.0), wrt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
}

TEST(Errors, RootNotRecorded) {
  auto x = ad::constant(Tensor({3}, 1.0));
  const ad::Var wrt[] = {x};
  try {
    ad::grad(ad::sum(x), wrt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Graph);
  }
}

TEST(Errors, GradOfGradNeedsRecordedFirstPass) {
  auto x = ad::variable(Tensor({1, 2}, {0.3, 0.4}));
  auto w = ad::variable(Tensor({2, 1}, 0.5));
  const ad::Var wrt[] = {w};
  auto gw = ad::grad(ad::sum(ad::matmul(x, w)), wrt, /*create_graph=*/false)[0];
  try {
    ad::grad_of_grad(ad::dot(gw, gw), x);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Graph);
  }
}

TEST(Errors, GradOfGradWrtNotAnInput) {
  auto x = ad::variable(Tensor({1, 2}, {0.3, 0.4}));
  auto w = ad::variable(Tensor({2, 1}, 0.5));
  auto other = ad::variable(Tensor({2}, 1.0));
  const ad::Var wrt[] = {w};
  auto gw = ad::grad(ad::sum(ad::matmul(x, w)), wrt, true)[0];
  EXPECT_THROW(ad::grad_of_grad(ad::dot(gw, gw), other), Error);
  EXPECT_THROW(ad::grad_of_grad(ad::dot(gw, gw), ad::constant(Tensor({2}, 1.0))), Error);
}

TEST(Errors, ShapeMismatchNamesBothShapes) {
  auto a = ad::constant(Tensor({2, 3}));
  auto b = ad::constant(Tensor({3, 2}));
  try {
    ad::add(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[3,2]"), std::string::npos);
  }
}

TEST(Errors, NonFiniteIntermediateIdentifiesOp) {
  auto a = ad::constant(Tensor::scalar(-1.0));
  try {
    ad::sqrt(a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NumericFault);
    EXPECT_NE(std::string(e.what()).find("sqrt"), std::string::npos);
  }
}

TEST(Errors, ThirdOrderThroughCrossEntropyIsRejected) {
  auto z = ad::variable(Tensor({1, 3}, {0.1, 0.2, 0.3}));
  const ad::Var wrt[] = {z};
  auto g1 = ad::grad(ad::softmax_cross_entropy(z, labels({1})), wrt, true)[0];
  auto phi = ad::dot(g1, g1);
  EXPECT_THROW(ad::grad(phi, wrt, /*create_graph=*/true), Error);
  EXPECT_NO_THROW(ad::grad(phi, wrt, false));
}

TEST(Errors, LabelOutOfRange) {
  auto z = ad::variable(Tensor({1, 3}));
  try {
    ad::softmax_cross_entropy(z, labels({3}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidArgument);
  }
}

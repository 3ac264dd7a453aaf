// Copyright 2026 The HRQ Authors. SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <functional>

#include "hrq/ball_ops.hpp"
#include "hrq/nn.hpp"
#include "support/finite_diff.hpp"

namespace {

using hrq::Matrix;
using hrq::Parameter;
using hrq::Vector;
using hrq::testing::numeric_gradient;
using hrq::testing::relative_error;
namespace ad = hrq::ad;

Matrix random_matrix(hrq::Rng& rng, Eigen::Index r, Eigen::Index c, double scale) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = scale * hrq::normal(rng);
  return m;
}

Matrix random_ball_rows(hrq::Rng& rng, Eigen::Index r, Eigen::Index c, double max_radius) {
  Matrix m = random_matrix(rng, r, c, 1.0);
  for (Eigen::Index i = 0; i < r; ++i) m.row(i) *= max_radius * hrq::uniform(rng, 0.05, 1.0) / m.row(i).norm();
  return m;
}

using Builder = std::function<ad::Var(ad::Tape&, ad::Var)>;

// Analytic gradient of sum(w .* f(x)) against central differences, with
// random weights w shaped like f(x).
double check_gradient(const Builder& f, const Matrix& x0, std::uint64_t seed = 99) {
  Matrix weights;
  {
    Parameter q("x", x0);
    ad::Tape t(false);
    const ad::Var out = f(t, t.param(q));
    hrq::Rng rng(seed);
    weights = random_matrix(rng, out.rows(), out.cols(), 1.0);
  }
  Parameter p("x", x0);
  ad::Tape tape;
  const ad::Var out = f(tape, tape.param(p));
  tape.backward(ad::sum(ad::mul(out, tape.constant(weights))));
  const Matrix analytic = p.grad;
  const Matrix numeric = numeric_gradient(
      [&](const Matrix& x) {
        Parameter q("x", x);
        ad::Tape t(false);
        return f(t, t.param(q)).value().cwiseProduct(weights).sum();
      },
      x0);
  return relative_error(analytic, numeric);
}

TEST(Tape, InnerProductGradient) {
  Parameter w("w", Matrix::Constant(1, 3, 0.5));
  Matrix x(1, 3);
  x << 1.0, -2.0, 3.0;
  ad::Tape tape;
  tape.backward(ad::sum(ad::mul(tape.param(w), tape.constant(x))));
  EXPECT_EQ(w.grad, x);
}

TEST(Tape, NonScalarLossRejected) {
  Parameter w("w", Matrix::Ones(2, 2));
  ad::Tape tape;
  EXPECT_THROW(tape.backward(tape.param(w)), hrq::UsageError);
}

TEST(Tape, StopGradientBlocksPath) {
  Parameter e("e", Matrix::Constant(1, 2, 0.3));
  ad::Tape tape;
  const ad::Var v = tape.param(e);
  tape.backward(ad::sum(ad::square(ad::stop_gradient(v))));
  EXPECT_FALSE(e.has_grad());
}

TEST(Tape, StraightThroughPassesIdentity) {
  Parameter x("x", Matrix::Constant(1, 2, 0.1));
  Matrix yv(1, 2);
  yv << 0.7, -0.4;
  ad::Tape tape;
  const ad::Var y = ad::straight_through(tape.param(x), tape.constant(yv));
  EXPECT_EQ(y.value(), yv);
  // L = |y|^2 / 2 -> dL/dx = y
  tape.backward(ad::scale(ad::sum(ad::square(y)), 0.5));
  EXPECT_TRUE(x.grad.isApprox(yv));
}

TEST(Tape, SgPerturbationDoesNotChangeRoutedGradient) {
  Parameter a("a", Matrix::Constant(1, 2, 0.2));
  auto grad_for = [&](double frozen) {
    ad::Tape tape;
    const ad::Var va = tape.param(a);
    const ad::Var f = ad::stop_gradient(tape.constant(Matrix::Constant(1, 2, frozen)));
    tape.backward(ad::sum(ad::add(ad::scale(va, 3.0), f)));
    Matrix g = a.grad;
    a.grad.resize(0, 0);
    return g;
  };
  EXPECT_EQ(grad_for(1.0), grad_for(-5.0));
}

TEST(Primitives, FiniteDifferences) {
  hrq::Rng rng(1);
  const Matrix x = random_matrix(rng, 3, 4, 0.7);
  const Matrix m = random_matrix(rng, 4, 4, 1.0);
  const std::vector<std::pair<const char*, Builder>> cases = {
      {"tanh", [](ad::Tape&, ad::Var v) { return ad::tanh(v); }},
      {"matmul", [&](ad::Tape& t, ad::Var v) { return ad::matmul(v, t.constant(m)); }},
      {"matmul_nt", [&](ad::Tape&, ad::Var v) { return ad::matmul_nt(v, v); }},
      {"row_norm", [](ad::Tape&, ad::Var v) { return ad::scale_rows(v, ad::row_norm(v)); }},
      {"log_softmax", [](ad::Tape&, ad::Var v) { return ad::log_softmax_rows(v); }},
      {"layer_norm", [](ad::Tape&, ad::Var v) { return ad::layer_norm_rows(v); }},
      {"reshape", [](ad::Tape&, ad::Var v) { return ad::reshape(ad::square(v), 4, 3); }},
      {"slice_concat",
       [](ad::Tape&, ad::Var v) { return ad::concat_cols({ad::slice_cols(v, 2, 2), ad::tanh(ad::slice_cols(v, 0, 2))}); }},
      {"artanh", [](ad::Tape&, ad::Var v) { return ad::artanh(ad::scale(ad::tanh(v), 0.9)); }},
  };
  for (const auto& [name, f] : cases) EXPECT_LT(check_gradient(f, x), 1e-6) << name;
}

TEST(Primitives, AttentionFiniteDifferences) {
  hrq::Rng rng(2);
  const Matrix x = random_matrix(rng, 7, 4, 0.8);
  for (bool causal : {false, true}) {
    const Builder f = [causal](ad::Tape&, ad::Var v) {
      // two packed sequences of lengths 3 and 4; each attends to itself
      return ad::attention(ad::scale(v, 1.3), v, ad::tanh(v), {{0, 3}, {3, 4}}, {{0, 3}, {3, 4}}, 2, causal);
    };
    EXPECT_LT(check_gradient(f, x), 1e-6);
  }
}

TEST(BallOps, FiniteDifferences) {
  hrq::Rng rng(3);
  for (double c : {0.5, 1.0, 2.0}) {
    const Matrix x = random_ball_rows(rng, 4, 3, 0.85 / std::sqrt(c));
    const Matrix y = random_ball_rows(rng, 4, 3, 0.85 / std::sqrt(c));
    EXPECT_LT(check_gradient([&](ad::Tape& t, ad::Var v) { return ad::mobius_add(v, t.constant(y), c); }, x), 1e-6);
    EXPECT_LT(check_gradient([&](ad::Tape& t, ad::Var v) { return ad::mobius_add(t.constant(y), v, c); }, x), 1e-6);
    EXPECT_LT(check_gradient([&](ad::Tape& t, ad::Var v) { return ad::distance(v, t.constant(y), c); }, x), 1e-6);
    EXPECT_LT(check_gradient([&](ad::Tape&, ad::Var v) { return ad::logmap0(v, c); }, x), 1e-6);
    EXPECT_LT(check_gradient([&](ad::Tape&, ad::Var v) { return ad::expmap0(v, c); }, x), 1e-6);
    EXPECT_LT(check_gradient([&](ad::Tape&, ad::Var v) { return ad::hrelu(v, c); }, x), 1e-6);
  }
}

TEST(BallOps, MatchScalarGeometry) {
  hrq::Rng rng(4);
  const Matrix x = random_ball_rows(rng, 5, 3, 0.9);
  const Matrix y = random_ball_rows(rng, 5, 3, 0.9);
  ad::Tape t(false);
  const ad::Var vx = t.constant(x), vy = t.constant(y);
  const Matrix s = ad::mobius_add(vx, vy, 1.0).value();
  const Matrix d = ad::distance(vx, vy, 1.0).value();
  for (Eigen::Index i = 0; i < 5; ++i) {
    const Vector a = x.row(i).transpose(), b = y.row(i).transpose();
    EXPECT_LT((s.row(i).transpose() - hrq::geo::mobius_add(a, b, 1.0)).norm(), 1e-14);
    EXPECT_NEAR(d(i, 0), hrq::geo::distance(a, b, 1.0), 1e-12);
  }
}

TEST(LinearForward, Examples) {
  hrq::Rng rng(5);
  hrq::DenseLayer l = hrq::DenseLayer::create({3, 3, hrq::Activation::kNone, hrq::Flavor::kEuclidean}, 1.0, rng, "l");
  l.weight.value = Matrix::Identity(3, 3);
  Matrix x(1, 3);
  x << 0.5, -1.0, 2.0;
  ad::Tape t(false);
  EXPECT_EQ(hrq::linear_forward(t, l, t.constant(x)).value(), x);
  l.spec.activation = hrq::Activation::kRelu;
  EXPECT_EQ(hrq::linear_forward(t, l, t.constant(x)).value()(0, 1), 0.0);
  // explicit-loop oracle
  l.weight.value = random_matrix(rng, 3, 3, 1.0);
  l.bias.value = random_matrix(rng, 1, 3, 1.0);
  l.spec.activation = hrq::Activation::kNone;
  const Matrix out = hrq::linear_forward(t, l, t.constant(x)).value();
  for (int j = 0; j < 3; ++j) {
    double acc = l.bias.value(0, j);
    for (int i = 0; i < 3; ++i) acc += x(0, i) * l.weight.value(i, j);
    EXPECT_NEAR(out(0, j), acc, 1e-14);
  }
}

TEST(HyperbolicLinearForward, Examples) {
  hrq::Rng rng(6);
  hrq::DenseLayer l = hrq::DenseLayer::create({2, 2, hrq::Activation::kNone, hrq::Flavor::kHyperbolic}, 1.0, rng, "h");
  l.weight.value = Matrix::Identity(2, 2);
  Matrix x(1, 2);
  x << 0.3, -0.5;
  ad::Tape t(false);
  EXPECT_LT((hrq::hyperbolic_linear_forward(t, l, t.constant(x)).value() - x).norm(), 1e-14);
  EXPECT_EQ(hrq::hyperbolic_linear_forward(t, l, t.constant(Matrix::Zero(1, 2))).value().norm(), 0.0);
  // diagonal W and nonzero bias vs hand composition
  l.weight.value << 0.5, 0.0, 0.0, -2.0;
  l.bias.value << 0.1, 0.2;
  const Vector xv = x.row(0).transpose();
  const Vector expected = hrq::geo::mobius_add(
      hrq::geo::expmap0(l.weight.value.transpose() * hrq::geo::logmap0(xv, 1.0), 1.0), l.bias.value.row(0).transpose(), 1.0);
  EXPECT_LT((hrq::hyperbolic_linear_forward(t, l, t.constant(x)).value().row(0).transpose() - expected).norm(), 1e-14);
}

TEST(HRelu, Examples) {
  ad::Tape t(false);
  Matrix pos(1, 2), neg(1, 2), mixed(1, 2);
  pos << 0.3, 0.4;
  neg << -0.3, -0.1;
  mixed << 0.5, -0.2;
  EXPECT_LT((ad::hrelu(t.constant(pos), 1.0).value() - pos).norm(), 1e-14);
  EXPECT_EQ(ad::hrelu(t.constant(neg), 1.0).value().norm(), 0.0);
  Vector l = hrq::geo::logmap0(mixed.row(0).transpose(), 1.0);
  l = l.cwiseMax(0.0);
  EXPECT_LT((ad::hrelu(t.constant(mixed), 1.0).value().row(0).transpose() - hrq::geo::expmap0(l, 1.0)).norm(), 1e-14);
}

TEST(LayerSpec, Validation) {
  EXPECT_THROW((hrq::LayerSpec{2, 2, hrq::Activation::kHRelu, hrq::Flavor::kEuclidean}.validate()), hrq::ConfigError);
  EXPECT_THROW((hrq::LayerSpec{0, 2, hrq::Activation::kNone, hrq::Flavor::kEuclidean}.validate()), hrq::ConfigError);
  EXPECT_NO_THROW((hrq::LayerSpec{2, 2, hrq::Activation::kHRelu, hrq::Flavor::kHyperbolic}.validate()));
}

TEST(HyperbolicLayer, GradientMatchesFiniteDifferences) {
  hrq::Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    hrq::DenseLayer l = hrq::DenseLayer::create({4, 3, hrq::Activation::kHRelu, hrq::Flavor::kHyperbolic}, 1.0, rng, "h");
    l.bias.value = random_ball_rows(rng, 1, 3, 0.5);
    const Matrix x = random_ball_rows(rng, 3, 4, 0.8);
    const Matrix w = random_matrix(rng, 3, 3, 1.0);
    auto loss = [&](ad::Tape& t) { return ad::sum(ad::mul(hrq::hyperbolic_linear_forward(t, l, t.constant(x)), t.constant(w))); };
    ad::Tape tape;
    tape.backward(loss(tape));
    for (Parameter* p : l.parameters()) {
      const Matrix analytic = p->grad;
      const Matrix base = p->value;
      const Matrix numeric = numeric_gradient(
          [&](const Matrix& v) {
            p->value = v;
            ad::Tape t(false);
            const double r = loss(t).scalar();
            p->value = base;
            return r;
          },
          base);
      EXPECT_LT(relative_error(analytic, numeric), 1e-4) << p->name;
    }
  }
}

TEST(SgdStep, Examples) {
  Parameter p("p", Matrix::Constant(1, 1, 1.0));
  p.grad = Matrix::Constant(1, 1, 2.0);
  Parameter* ps[] = {&p};
  hrq::sgd_step(ps, 0.5);
  EXPECT_EQ(p.value(0, 0), 0.0);
  EXPECT_FALSE(p.has_grad());
  p.grad = Matrix::Zero(1, 1);
  hrq::sgd_step(ps, 0.5);
  EXPECT_EQ(p.value(0, 0), 0.0);
}

TEST(SgdStep, ConvergesOnQuadratic) {
  // f(p) = (p - 3)^2, minimum at 3.
  Parameter p("p", Matrix::Constant(1, 1, -4.0));
  Parameter* ps[] = {&p};
  int steps = 0;
  while (std::abs(p.value(0, 0) - 3.0) > 1e-6 && steps < 200) {
    p.grad = Matrix::Constant(1, 1, 2.0 * (p.value(0, 0) - 3.0));
    hrq::sgd_step(ps, 0.1);
    ++steps;
  }
  EXPECT_LE(steps, 200);
  EXPECT_NEAR(p.value(0, 0), 3.0, 1e-6);
}

TEST(RsgdStep, Examples) {
  Parameter p("p", Matrix::Zero(1, 2), hrq::Manifold::kBall, 1.0);
  Parameter* ps[] = {&p};
  p.grad = Matrix::Zero(1, 2);
  hrq::rsgd_step(ps, 0.1);
  EXPECT_EQ(p.value.norm(), 0.0);
  Matrix g(1, 2);
  g << 1.0, -2.0;
  p.grad = g;
  hrq::rsgd_step(ps, 0.1);
  const Vector expected = hrq::geo::expmap0(-0.1 * g.row(0).transpose() / 4.0, 1.0);
  EXPECT_LT((p.value.row(0).transpose() - expected).norm(), 1e-15);
  Parameter e("e", Matrix::Zero(1, 2));
  Parameter* es[] = {&e};
  e.grad = g;
  EXPECT_THROW(hrq::rsgd_step(es, 0.1), hrq::UsageError);
}

TEST(RsgdStep, ConvergesToTarget) {
  hrq::Rng rng(8);
  const Vector target = random_ball_rows(rng, 1, 3, 0.7).row(0).transpose();
  Parameter p("p", random_ball_rows(rng, 1, 3, 0.9), hrq::Manifold::kBall, 1.0);
  Parameter* ps[] = {&p};
  int steps = 0;
  for (; steps < 2000; ++steps) {
    ad::Tape tape;
    const ad::Var d = ad::distance(tape.param(p), tape.constant(target.transpose()), 1.0);
    if (d.scalar() < 1e-4) break;
    tape.backward(ad::sum(ad::square(d)));
    hrq::rsgd_step(ps, 0.1);
  }
  EXPECT_LT(hrq::geo::distance(p.value.row(0).transpose(), target, 1.0), 1e-4);
}

TEST(RsgdStep, AdversarialGradientsStayInside) {
  hrq::Rng rng(9);
  Parameter p("p", random_ball_rows(rng, 6, 3, 0.99), hrq::Manifold::kBall, 2.0);
  Parameter* ps[] = {&p};
  for (int i = 0; i < 300; ++i) {
    p.grad = random_matrix(rng, 6, 3, 1e8);
    hrq::rsgd_step(ps, 10.0);
    for (Eigen::Index r = 0; r < 6; ++r) {
      ASSERT_TRUE(p.value.row(r).allFinite());
      ASSERT_LT(2.0 * p.value.row(r).squaredNorm(), 1.0);
    }
  }
}

TEST(RsgdStep, StepRatioMatchesInverseMetricFactor) {
  // With c -> 0 the exp map is a plain translation, so the step equals
  // (1 - c|p|^2)^2 / 4 times the Euclidean SGD step.
  const double c = 1e-8;
  Matrix start(1, 2);
  start << 300.0, -400.0;  // c|p|^2 = 2.5e-3
  Matrix g(1, 2);
  g << 1e-3, 2e-3;
  Parameter r("r", start, hrq::Manifold::kBall, c);
  Parameter e("e", start);
  r.grad = g;
  e.grad = g;
  Parameter* rs[] = {&r};
  Parameter* es[] = {&e};
  hrq::rsgd_step(rs, 1.0);
  hrq::sgd_step(es, 1.0);
  const double f = 1.0 - c * start.squaredNorm();
  const double ratio = (r.value - start).norm() / (e.value - start).norm();
  EXPECT_NEAR(ratio, f * f / 4.0, 1e-6);
}

TEST(Adam, MinimisesQuadratic) {
  Parameter p("p", Matrix::Constant(1, 2, 5.0));
  Parameter* ps[] = {&p};
  hrq::Adam opt(0.1);
  for (int i = 0; i < 500; ++i) {
    p.grad = 2.0 * p.value;
    opt.step(ps);
  }
  EXPECT_LT(p.value.norm(), 1e-2);
}

TEST(Network, JsonRoundTripIsBitExact) {
  hrq::Rng rng(10);
  hrq::Network net = hrq::Network::mlp({5, 4, 3}, hrq::Flavor::kHyperbolic, 0.8, rng, "enc");
  net.layers[0].bias.value = random_ball_rows(rng, 1, 4, 0.5);
  const hrq::Network back = hrq::Network::from_json(hrq::json::parse(net.to_json().dump()));
  ASSERT_EQ(back.layers.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.layers[i].weight.value, net.layers[i].weight.value);
    EXPECT_EQ(back.layers[i].bias.value, net.layers[i].bias.value);
    EXPECT_EQ(back.layers[i].bias.manifold, hrq::Manifold::kBall);
    EXPECT_EQ(back.layers[i].spec.activation, net.layers[i].spec.activation);
  }
}

}  // namespace

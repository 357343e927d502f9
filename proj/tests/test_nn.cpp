#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "coe/nn.hpp"
#include "support.hpp"

using namespace coe;
using namespace coe::nn;
using coe::testing::random_matrix;

namespace {

LogitLoss ce_loss(std::vector<std::size_t> y, std::vector<double> w) {
  return [y = std::move(y), w = std::move(w)](const Matrix& logits) {
    return weighted_cross_entropy(softmax_rows(logits), y, w);
  };
}

Mlp single_layer(Matrix w, std::vector<double> b, Activation a = Activation::none) {
  return Mlp({DenseLayer{std::move(w), std::move(b), a}});
}

}  // namespace

TEST(Mlp, ValidatesShapes) {
  EXPECT_THROW(Mlp(std::vector<DenseLayer>{}), InvalidInput);
  EXPECT_THROW(single_layer(Matrix(2, 3), {0.0}), InvalidInput);
  EXPECT_THROW(Mlp({DenseLayer{Matrix(2, 3), {0, 0}}, DenseLayer{Matrix(1, 3), {0}}}),
               InvalidInput);
  EXPECT_THROW(Mlp::build({4}, 0), InvalidInput);
  EXPECT_THROW(Mlp::build({4, 0, 2}, 0), InvalidInput);
}

TEST(Mlp, BuildIsSeeded) {
  EXPECT_EQ(Mlp::build({5, 7, 3}, 42), Mlp::build({5, 7, 3}, 42));
  EXPECT_FALSE(Mlp::build({5, 7, 3}, 42) == Mlp::build({5, 7, 3}, 43));
  const auto m = Mlp::build({5, 7, 3}, 1);
  EXPECT_EQ(m.parameter_count(), 5u * 7 + 7 + 7 * 3 + 3);
  EXPECT_EQ(m.layers()[0].activation, Activation::relu);
  EXPECT_EQ(m.layers()[1].activation, Activation::none);
}

TEST(Forward, ZeroNetGivesZeroLogits) {
  const auto net = Mlp({DenseLayer{Matrix(4, 3, 0.0), std::vector<double>(4, 0.0), Activation::relu},
                        DenseLayer{Matrix(2, 4, 0.0), std::vector<double>(2, 0.0)}});
  std::mt19937_64 rng(1);
  const auto out = apply(net, random_matrix(5, 3, rng));
  for (double v : out.flat()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, IdentityLayerCopiesInput) {
  Matrix eye(3, 3, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0;
  std::mt19937_64 rng(2);
  const auto x = random_matrix(4, 3, rng);
  EXPECT_EQ(apply(single_layer(eye, {0, 0, 0}), x), x);
}

TEST(Forward, ShapeAndCacheAgreeWithApply) {
  const auto net = Mlp::build({6, 8, 8, 3}, 5);
  std::mt19937_64 rng(3);
  const auto x = random_matrix(7, 6, rng);
  const auto cache = forward(net, x);
  EXPECT_EQ(cache.output.rows(), 7u);
  EXPECT_EQ(cache.output.cols(), 3u);
  EXPECT_EQ(cache.output, apply(net, x));
  EXPECT_THROW(apply(net, random_matrix(2, 5, rng)), InvalidInput);
}

TEST(Forward, OpCounterCountsMultiplies) {
  const auto net = Mlp::build({6, 8, 3}, 5);
  std::mt19937_64 rng(3);
  OpCounter ops;
  apply(net, random_matrix(4, 6, rng), &ops);
  EXPECT_EQ(ops.multiplies, 4u * (6 * 8 + 8 * 3));
}

TEST(Softmax, UniformAndClosedForm) {
  const auto uniform = softmax_rows(Matrix(2, 4, 3.7));
  for (double v : uniform.flat()) EXPECT_DOUBLE_EQ(v, 0.25);
  const auto p = softmax_rows(Matrix{{0.0, std::log(3.0)}});
  EXPECT_NEAR(p(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(p(0, 1), 0.75, 1e-15);
}

TEST(Softmax, ShiftInvariantAndStable) {
  std::mt19937_64 rng(4);
  const auto x = random_matrix(5, 6, rng, -5, 5);
  Matrix shifted = x;
  for (double& v : shifted.flat()) v += 123.25;
  const auto a = softmax_rows(x), b = softmax_rows(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.flat()[i], b.flat()[i], 1e-12);
  const auto big = softmax_rows(Matrix{{1000.0, 0.0}});
  EXPECT_TRUE(std::isfinite(big(0, 1)));
  EXPECT_EQ(big(0, 0), 1.0);
}

TEST(WeightedCe, PerfectPredictionAndUniform) {
  EXPECT_EQ(weighted_cross_entropy(Matrix{{0, 1, 0}}, std::vector<std::size_t>{1},
                                   std::vector<double>{1.0})
                .loss,
            0.0);
  const std::size_t C = 7, m = 5;
  const auto lg = weighted_cross_entropy(Matrix(m, C, 1.0 / C), std::vector<std::size_t>(m, 2),
                                         std::vector<double>(m, 1.0 / m));
  EXPECT_NEAR(lg.loss, std::log(7.0), 1e-12);
}

TEST(WeightedCe, ZeroWeightRowsHaveZeroGradient) {
  std::mt19937_64 rng(8);
  const auto p = coe::testing::random_stochastic(3, 4, rng);
  const auto lg = weighted_cross_entropy(p, std::vector<std::size_t>{0, 1, 2},
                                         std::vector<double>{0.5, 0.0, 0.5});
  for (double g : lg.grad.row(1)) EXPECT_EQ(g, 0.0);
}

TEST(WeightedCe, RejectsBadWeights) {
  const Matrix p(2, 2, 0.5);
  const std::vector<std::size_t> y{0, 1};
  EXPECT_THROW(weighted_cross_entropy(p, y, std::vector<double>{0.0, 0.0}), InvalidInput);
  EXPECT_THROW(weighted_cross_entropy(p, y, std::vector<double>{-1.0, 2.0}), InvalidInput);
  EXPECT_THROW(weighted_cross_entropy(p, std::vector<std::size_t>{0, 2},
                                      std::vector<double>{1.0, 1.0}),
               InvalidInput);
}

TEST(Backward, ZeroUpstreamGivesZeroGrads) {
  const auto net = Mlp::build({4, 5, 3}, 2);
  std::mt19937_64 rng(5);
  const auto cache = forward(net, random_matrix(6, 4, rng));
  EXPECT_TRUE(backward(net, cache, Matrix(6, 3, 0.0)).grads.all_zero());
}

TEST(Backward, LinearLayerWeightGradIsUpstreamTransposeInput) {
  std::mt19937_64 rng(6);
  const auto net = single_layer(random_matrix(3, 4, rng), {0.1, 0.2, 0.3});
  const auto x = random_matrix(5, 4, rng);
  const auto up = random_matrix(5, 3, rng);
  const auto g = backward(net, forward(net, x), up).grads;
  for (std::size_t o = 0; o < 3; ++o) {
    double db = 0.0;
    for (std::size_t r = 0; r < 5; ++r) db += up(r, o);
    EXPECT_NEAR(g.bias[0][o], db, 1e-14);
    for (std::size_t i = 0; i < 4; ++i) {
      double dw = 0.0;
      for (std::size_t r = 0; r < 5; ++r) dw += up(r, o) * x(r, i);
      EXPECT_NEAR(g.weights[0](o, i), dw, 1e-14);
    }
  }
}

TEST(Backward, RejectsStaleCache) {
  auto net = Mlp::build({3, 2}, 1);
  std::mt19937_64 rng(7);
  const auto cache = forward(net, random_matrix(2, 3, rng));
  net.mutable_layers()[0].bias[0] = 1.0;
  EXPECT_THROW(backward(net, cache, Matrix(2, 2, 1.0)), InvalidInput);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  auto net = Mlp::build({3, 4, 2}, 9);
  const auto before = net;
  SgdState st(0.1, 0.9);
  sgd_step(net, Gradients::zeros_like(net), st);
  EXPECT_EQ(net, before);
}

TEST(Sgd, PlainStepWithoutMomentum) {
  auto net = single_layer(Matrix{{1.0, 2.0}}, {0.5});
  auto g = Gradients::zeros_like(net);
  g.weights[0](0, 0) = 0.5;
  g.weights[0](0, 1) = -1.0;
  g.bias[0][0] = 2.0;
  SgdState st(0.25, 0.0);
  sgd_step(net, g, st);
  EXPECT_DOUBLE_EQ(net.layers()[0].weights(0, 0), 0.875);
  EXPECT_DOUBLE_EQ(net.layers()[0].weights(0, 1), 2.25);
  EXPECT_DOUBLE_EQ(net.layers()[0].bias[0], 0.0);
}

TEST(Sgd, MomentumUnrollsOverTwoSteps) {
  auto net = single_layer(Matrix{{0.0}}, {0.0});
  auto g = Gradients::zeros_like(net);
  g.weights[0](0, 0) = 1.0;
  SgdState st(0.1, 0.9);
  sgd_step(net, g, st);
  sgd_step(net, g, st);
  EXPECT_NEAR(net.layers()[0].weights(0, 0), -0.1 * (1.0 + 1.9), 1e-15);
}

TEST(Sgd, RejectsBadHyperparameters) {
  EXPECT_THROW(SgdState(0.0, 0.5), InvalidInput);
  EXPECT_THROW(SgdState(0.1, 1.0), InvalidInput);
}

TEST(GradientCheck, LinearSoftmaxCe) {
  auto net = Mlp::build({3, 4}, 11);
  std::mt19937_64 rng(12);
  const auto x = random_matrix(4, 3, rng);
  EXPECT_LT(gradient_check(net, ce_loss({0, 1, 3, 2}, {0.25, 0.25, 0.25, 0.25}), x), 1e-6);
}

TEST(GradientCheck, TwoHiddenReluLayers) {
  auto net = Mlp::build({5, 8, 8, 3}, 13);
  for (auto& l : net.mutable_layers())
    for (double& b : l.bias) b = 0.3;  // keeps pre-activations away from 0
  std::mt19937_64 rng(14);
  const auto x = random_matrix(6, 5, rng);
  EXPECT_LT(gradient_check(net, ce_loss({0, 1, 2, 0, 1, 2}, {0.1, 0.2, 0.3, 0.1, 0.2, 0.1}), x),
            1e-4);
}

TEST(GradientCheck, BiasOnlyPathWithZeroInput) {
  auto net = Mlp::build({3, 2}, 15);
  const Matrix x(4, 3, 0.0);
  EXPECT_LT(gradient_check(net, ce_loss({0, 1, 1, 0}, {0.25, 0.25, 0.25, 0.25}), x), 1e-8);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto net = Mlp::build({4, 6, 3}, 99);
  net.mutable_layers()[1].bias[2] = -0.1;
  std::stringstream ss;
  save_mlp(ss, net);
  const auto back = load_mlp(ss);
  EXPECT_EQ(back, net);
  EXPECT_EQ(back.seed(), 99u);
}

TEST(Checkpoint, RejectsCorruptInput) {
  std::stringstream bad("coe-mlp 2\n");
  EXPECT_THROW(load_mlp(bad), InvalidInput);
  auto net = Mlp::build({2, 2}, 1);
  std::stringstream ss;
  save_mlp(ss, net);
  std::string text = ss.str();
  text.resize(text.size() / 2);
  std::stringstream cut(text);
  EXPECT_THROW(load_mlp(cut), InvalidInput);
}

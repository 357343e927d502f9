#pragma once

// Finite-difference verification of the joint training objective on a small
// fixed instance. Shared by the CLI `gradcheck` command and the test suites.

#include <cstdint>
#include <random>
#include <vector>

#include "coe/matrix.hpp"
#include "coe/models.hpp"
#include "coe/nn.hpp"
#include "coe/seed.hpp"
#include "coe/train.hpp"

namespace coe::verify {

enum class GradPath { selector, experts, combined };

struct GradCheckInstance {
  models::Architecture arch;
  models::Delegator delegator;
  std::vector<models::Expert> experts;
  Matrix batch;
  std::vector<std::size_t> labels;
};

/// Nonzero biases keep relu pre-activations off the kink at 0, which zero
/// initialization would otherwise hit for samples whose features are all 0.
inline void randomize_biases(nn::Mlp& net, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& l : net.mutable_layers())
    for (double& b : l.bias) b = u(rng);
}

/// 8 samples, 2 experts, 3 classes; everything else small and seeded.
inline GradCheckInstance make_gradcheck_instance(std::uint64_t seed = 7) {
  GradCheckInstance g;
  g.arch.input_dim = 5;
  g.arch.feat_dim = 4;
  g.arch.classes = 3;
  g.arch.n_experts = 2;
  g.arch.expert_hidden = {6, 6};
  g.delegator = models::make_delegator(g.arch, seed);
  for (std::size_t k = 0; k < 2; ++k) g.experts.push_back(models::make_expert(g.arch, k, seed));
  std::mt19937_64 rng(sub_seed(seed, "gradcheck/batch"));
  randomize_biases(g.delegator.extractor, rng);
  randomize_biases(g.delegator.selector, rng);
  for (auto& e : g.experts) randomize_biases(e.network, rng);
  std::normal_distribution<double> gauss(0.0, 1.0);
  g.batch = Matrix(8, g.arch.input_dim);
  for (double& v : g.batch.flat()) v = gauss(rng);
  for (std::size_t j = 0; j < 8; ++j) g.labels.push_back(j % 3);
  return g;
}

/// Max relative error between the analytic gradient of the chosen part of
/// L_total = η·L_S + L_T and central differences. Labels, selection weights
/// and expert weights are frozen at the unperturbed point.
inline double joint_gradient_error(GradCheckInstance& g, GradPath path, double eta = 0.8,
                                   double epsilon = 1e-5) {
  train::TrainConfig cfg;
  cfg.n_experts = g.experts.size();
  cfg.eta = eta;
  const auto f0 = train::joint_forward(g.delegator, g.experts, g.batch);
  const auto targets = train::make_joint_targets(f0, g.labels, cfg, 1, 2);
  const auto analytic = train::joint_loss(g.delegator, g.experts, f0, g.labels, targets, eta);

  auto objective = [&] {
    const auto f = train::joint_forward(g.delegator, g.experts, g.batch);
    const auto l = train::joint_loss(g.delegator, g.experts, f, g.labels, targets, eta);
    switch (path) {
      case GradPath::selector: return eta * l.loss_s;
      case GradPath::experts: return l.loss_t;
      case GradPath::combined: break;
    }
    return l.total;
  };

  std::vector<nn::Mlp*> nets;
  std::vector<nn::Gradients> grads;
  if (path != GradPath::experts) {
    nets.push_back(&g.delegator.selector);
    grads.push_back(analytic.selector);
  }
  if (path != GradPath::selector) {
    for (std::size_t k = 0; k < g.experts.size(); ++k) {
      nets.push_back(&g.experts[k].network);
      grads.push_back(analytic.experts[k]);
    }
  }
  return nn::max_relative_error(nets, objective, grads, epsilon);
}

}  // namespace coe::verify

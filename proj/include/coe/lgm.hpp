#pragma once

// Label generation: turn per-expert true-class probabilities into balanced
// one-hot selection labels for the expert selector, plus per-sample weights
// for the selection loss.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "coe/error.hpp"
#include "coe/matrix.hpp"
#include "coe/onehot.hpp"
#include "coe/transport.hpp"

namespace coe::lgm {

using TcpMatrix = Matrix;          ///< m×n, entries in [0,1]
using SuitabilityMatrix = Matrix;  ///< m×n, column z-scores
using SelectionLabelMatrix = OneHotMatrix;
using SelectionLossWeights = std::vector<double>;

inline constexpr double kStdEpsilon = 1e-8;

/// Population mean and standard deviation of a sequence.
struct Moments {
  double mean = 0.0;
  double std = 0.0;
};

inline Moments population_moments(std::span<const double> xs) {
  Moments mo;
  if (xs.empty()) return mo;
  mo.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mo.mean) * (x - mo.mean);
  mo.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return mo;
}

/// `per_expert[k][j]` is expert k's probability for sample j's true class.
inline TcpMatrix compute_tcp(std::span<const std::vector<double>> per_expert) {
  require(!per_expert.empty(), "compute_tcp: no experts");
  const std::size_t m = per_expert.front().size();
  TcpMatrix t(m, per_expert.size());
  for (std::size_t k = 0; k < per_expert.size(); ++k) {
    require(per_expert[k].size() == m, "compute_tcp: expert vectors differ in length");
    for (std::size_t j = 0; j < m; ++j) {
      const double p = per_expert[k][j];
      require(p >= 0.0 && p <= 1.0, "compute_tcp: probability outside [0,1]");
      t(j, k) = p;
    }
  }
  return t;
}

/// Picks each expert's class-probability row entry at the true label.
inline TcpMatrix compute_tcp(std::span<const Matrix> expert_probs,
                             std::span<const std::size_t> targets) {
  std::vector<std::vector<double>> cols;
  cols.reserve(expert_probs.size());
  for (const Matrix& probs : expert_probs) {
    require(probs.rows() == targets.size(), "compute_tcp: probs/targets row mismatch");
    std::vector<double> c(targets.size());
    for (std::size_t j = 0; j < targets.size(); ++j) {
      require(targets[j] < probs.cols(), "compute_tcp: target out of range");
      c[j] = probs(j, targets[j]);
    }
    cols.push_back(std::move(c));
  }
  return compute_tcp(cols);
}

/// Column-wise z-score with population std and an ε-guarded denominator.
inline SuitabilityMatrix standardize_suitability(const TcpMatrix& t) {
  require(t.rows() >= 2, "standardize_suitability: need at least two samples");
  SuitabilityMatrix s(t.rows(), t.cols());
  std::vector<double> col(t.rows());
  for (std::size_t k = 0; k < t.cols(); ++k) {
    for (std::size_t j = 0; j < t.rows(); ++j) col[j] = t(j, k);
    const Moments mo = population_moments(col);
    for (std::size_t j = 0; j < t.rows(); ++j)
      s(j, k) = (t(j, k) - mo.mean) / (mo.std + kStdEpsilon);
  }
  return s;
}

/// Balanced labels maximizing Σ S·L, via the transportation solver on −S.
inline SelectionLabelMatrix generate_selection_labels(const SuitabilityMatrix& s) {
  for (double v : s.flat()) require(std::isfinite(v), "generate_selection_labels: non-finite S");
  auto a = transport::solve_btp(negated(s), transport::balanced_demands(s.rows(), s.cols()));
  return {std::move(a), s.cols()};
}

/// v_j ∝ population std of row j of S, normalized onto the simplex.
/// All-zero spreads fall back to uniform 1/m.
inline SelectionLossWeights selection_loss_weights(const SuitabilityMatrix& s) {
  require(s.cols() >= 2, "selection_loss_weights: need at least two experts");
  require(s.rows() >= 1, "selection_loss_weights: empty batch");
  SelectionLossWeights v(s.rows());
  for (std::size_t j = 0; j < s.rows(); ++j) v[j] = population_moments(s.row(j)).std;
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  if (total <= 0.0) {
    std::fill(v.begin(), v.end(), 1.0 / static_cast<double>(s.rows()));
    return v;
  }
  for (double& x : v) x /= total;
  return v;
}

/// Ablation: raw TCP argmax per row, no standardization, no balance.
inline SelectionLabelMatrix raw_tcp_labels(const TcpMatrix& t) { return argmax_rows(t); }

}  // namespace coe::lgm

#pragma once

// Weight generation: partition a batch by the selector's probabilities,
// soften the partition with a scheduled α and normalize it into per-expert
// loss weights.

#include <cstddef>
#include <vector>

#include "coe/error.hpp"
#include "coe/matrix.hpp"
#include "coe/onehot.hpp"
#include "coe/transport.hpp"

namespace coe::wgm {

using SelectionProbMatrix = Matrix;  ///< m×n, row-stochastic
using AssignmentMatrix = OneHotMatrix;
using ExpertWeightMatrix = Matrix;  ///< m×n, each column sums to 1

struct SmoothedAssignment {
  Matrix values;
  double alpha = 1.0;
};

inline constexpr double kDefaultAlphaStart = 0.2;
inline constexpr double kDefaultAlphaEnd = 0.8;

inline AssignmentMatrix generate_assignment(const SelectionProbMatrix& p) {
  auto a = transport::solve_btp(negated(p), transport::balanced_demands(p.rows(), p.cols()));
  return {std::move(a), p.cols()};
}

/// Linear ramp from alpha_start at step 0 to alpha_end at total_steps.
inline double alpha_schedule(std::size_t step, std::size_t total_steps,
                             double alpha_start = kDefaultAlphaStart,
                             double alpha_end = kDefaultAlphaEnd) {
  require(total_steps > 0, "alpha_schedule: total_steps must be positive");
  require(step <= total_steps, "alpha_schedule: step beyond total_steps");
  return alpha_start +
         (alpha_end - alpha_start) * static_cast<double>(step) / static_cast<double>(total_steps);
}

inline SmoothedAssignment smooth_assignment(const AssignmentMatrix& a, double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, "smooth_assignment: alpha outside [0,1]");
  const double n = static_cast<double>(a.cols);
  const double off = (1.0 - alpha) / n;
  SmoothedAssignment out{Matrix(a.rows(), a.cols, off), alpha};
  for (std::size_t j = 0; j < a.rows(); ++j) out.values(j, a.index[j]) = alpha + off;
  return out;
}

/// Divides by Z = m/n. When n does not divide m the columns are normalized
/// individually so each still sums to 1.
inline ExpertWeightMatrix normalize_weights(const SmoothedAssignment& abar, std::size_t m,
                                            std::size_t n) {
  require(m > 0, "normalize_weights: m must be positive");
  require(n > 0 && abar.values.rows() == m && abar.values.cols() == n,
          "normalize_weights: shape mismatch");
  ExpertWeightMatrix w = abar.values;
  if (m % n == 0) {
    const double scale = static_cast<double>(n) / static_cast<double>(m);
    for (double& x : w.flat()) x *= scale;
    return w;
  }
  const auto sums = column_sums(w);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t k = 0; k < n; ++k)
      if (sums[k] > 0.0) w(j, k) /= sums[k];
  return w;
}

/// Ablation: partition by the suitability labels instead of the selector.
inline AssignmentMatrix suitability_assignment(const OneHotMatrix& labels) { return labels; }

/// Ablation: per-row argmax of P without the balance constraint.
inline AssignmentMatrix unconstrained_assignment(const SelectionProbMatrix& p) {
  return argmax_rows(p);
}

/// Weights for the unconstrained ablation: the raw one-hot partition scaled
/// by n/m, without smoothing or per-column renormalization.
inline ExpertWeightMatrix unsmoothed_weights(const AssignmentMatrix& a) {
  require(a.rows() > 0, "unsmoothed_weights: empty assignment");
  ExpertWeightMatrix w = a.dense();
  const double scale = static_cast<double>(a.cols) / static_cast<double>(a.rows());
  for (double& x : w.flat()) x *= scale;
  return w;
}

/// Identical weight 1/m for every sample and expert.
inline ExpertWeightMatrix uniform_weights(std::size_t m, std::size_t n) {
  require(m > 0, "uniform_weights: m must be positive");
  return ExpertWeightMatrix(m, n, 1.0 / static_cast<double>(m));
}

}  // namespace coe::wgm

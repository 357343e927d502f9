#pragma once

// Balanced transportation problem (BTP): m unit-supply rows (samples) are
// shipped to n columns (experts) whose integer demands sum to m. The main
// solver is Vogel's approximation method restricted to row penalties; the
// exhaustive solver exists as a test oracle for small instances.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "coe/error.hpp"
#include "coe/matrix.hpp"

namespace coe::transport {

using CostMatrix = Matrix;
using DemandVector = std::vector<std::size_t>;
/// assigned_expert[j] for every row j.
using Assignment = std::vector<std::size_t>;

inline constexpr std::size_t kBruteForceMaxRows = 12;

/// Demands as even as possible: the first (m mod n) columns get one extra.
inline DemandVector balanced_demands(std::size_t m, std::size_t n) {
  require(n >= 1, "balanced_demands: need at least one column");
  require(m >= n, "balanced_demands: need at least as many rows as columns");
  DemandVector d(n, m / n);
  for (std::size_t k = 0; k < m % n; ++k) ++d[k];
  return d;
}

inline void validate_problem(const CostMatrix& costs, const DemandVector& demands) {
  require(costs.cols() >= 1, "BTP: cost matrix has no columns");
  require(costs.rows() >= costs.cols(), "BTP: need at least as many rows as columns");
  require(demands.size() == costs.cols(), "BTP: demand vector length != column count");
  const std::size_t total = std::accumulate(demands.begin(), demands.end(), std::size_t{0});
  require(total == costs.rows(), "BTP: demands sum to " + std::to_string(total) +
                                     " but there are " + std::to_string(costs.rows()) + " rows");
  for (double c : costs.flat()) require(std::isfinite(c), "BTP: non-finite cost");
}

/// Gap between the two cheapest active costs of each active row (0 when a
/// single active column remains).
inline std::vector<double> row_penalties(const CostMatrix& costs,
                                         std::span<const std::size_t> active_rows,
                                         std::span<const std::size_t> active_cols) {
  require(!active_rows.empty() && !active_cols.empty(), "row_penalties: empty active set");
  std::vector<double> out;
  out.reserve(active_rows.size());
  for (std::size_t j : active_rows) {
    require(j < costs.rows(), "row_penalties: row out of range");
    if (active_cols.size() == 1) {
      out.push_back(0.0);
      continue;
    }
    double lowest = std::numeric_limits<double>::infinity();
    double second = std::numeric_limits<double>::infinity();
    for (std::size_t k : active_cols) {
      require(k < costs.cols(), "row_penalties: column out of range");
      const double c = costs(j, k);
      if (c < lowest) {
        second = lowest;
        lowest = c;
      } else if (c < second) {
        second = c;
      }
    }
    out.push_back(second - lowest);
  }
  return out;
}

/// Modified Vogel approximation: repeatedly take the active row with the
/// largest penalty (ties: smallest row) and ship it to its cheapest active
/// column (ties: smallest column). Column penalties are never computed.
inline Assignment solve_btp(const CostMatrix& costs, const DemandVector& demands) {
  validate_problem(costs, demands);
  const std::size_t m = costs.rows();
  const std::size_t n = costs.cols();

  DemandVector remaining = demands;
  std::vector<std::size_t> active_cols;
  for (std::size_t k = 0; k < n; ++k)
    if (remaining[k] > 0) active_cols.push_back(k);

  std::vector<std::size_t> active_rows(m);
  std::iota(active_rows.begin(), active_rows.end(), std::size_t{0});

  Assignment result(m, n);
  // Penalties and argmins only change when a column closes, so they are
  // cached per row and refreshed at most n times.
  std::vector<double> penalty(m);
  std::vector<std::size_t> cheapest(m);
  auto refresh = [&] {
    const auto pens = row_penalties(costs, active_rows, active_cols);
    for (std::size_t i = 0; i < active_rows.size(); ++i) {
      const std::size_t j = active_rows[i];
      penalty[j] = pens[i];
      std::size_t best = active_cols.front();
      for (std::size_t k : active_cols)
        if (costs(j, k) < costs(j, best)) best = k;
      cheapest[j] = best;
    }
  };
  refresh();

  while (!active_rows.empty()) {
    std::size_t pick = 0;
    for (std::size_t i = 1; i < active_rows.size(); ++i)
      if (penalty[active_rows[i]] > penalty[active_rows[pick]]) pick = i;
    const std::size_t row = active_rows[pick];
    const std::size_t col = cheapest[row];
    result[row] = col;
    active_rows.erase(active_rows.begin() + static_cast<std::ptrdiff_t>(pick));
    if (--remaining[col] == 0) {
      active_cols.erase(std::find(active_cols.begin(), active_cols.end(), col));
      if (!active_rows.empty()) refresh();
    }
  }
  return result;
}

/// Σ_j costs[j][a_j].
inline double assignment_objective(const CostMatrix& costs, const Assignment& a) {
  require(a.size() == costs.rows(), "assignment_objective: assignment length != rows");
  double total = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    require(a[j] < costs.cols(), "assignment_objective: column index out of range");
    total += costs(j, a[j]);
  }
  return total;
}

/// Visits every assignment meeting the demands exactly, in lexicographic
/// order. Used by the exhaustive oracle and by tests that need the worst case.
inline void for_each_balanced_assignment(const DemandVector& demands,
                                         const std::function<void(const Assignment&)>& visit) {
  Assignment a;
  for (std::size_t k = 0; k < demands.size(); ++k) a.insert(a.end(), demands[k], k);
  require(a.size() <= kBruteForceMaxRows,
          "brute force limited to " + std::to_string(kBruteForceMaxRows) + " rows");
  do {
    visit(a);
  } while (std::next_permutation(a.begin(), a.end()));
}

/// Exact minimum by enumeration. Ties resolve to the lexicographically
/// smallest assignment.
inline Assignment brute_force_btp(const CostMatrix& costs, const DemandVector& demands) {
  require(costs.rows() <= kBruteForceMaxRows,
          "brute_force_btp: m=" + std::to_string(costs.rows()) + " exceeds " +
              std::to_string(kBruteForceMaxRows));
  validate_problem(costs, demands);
  Assignment best;
  double best_obj = std::numeric_limits<double>::infinity();
  for_each_balanced_assignment(demands, [&](const Assignment& a) {
    const double obj = assignment_objective(costs, a);
    if (obj < best_obj) {
      best_obj = obj;
      best = a;
    }
  });
  return best;
}

}  // namespace coe::transport

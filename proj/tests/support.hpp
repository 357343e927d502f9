#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "coe/matrix.hpp"

namespace coe::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (double& x : m.flat()) x = u(rng);
  return m;
}

inline Matrix random_stochastic(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  Matrix m = random_matrix(r, c, rng, 0.01, 1.0);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (double x : m.row(i)) s += x;
    for (double& x : m.row(i)) x /= s;
  }
  return m;
}

// Every assignment of m rows to columns whose column counts equal `demands`,
// by plain recursion over rows.
inline void enumerate_assignments(const std::vector<std::size_t>& demands, std::size_t m,
                                  const std::function<void(const std::vector<std::size_t>&)>& f) {
  std::vector<std::size_t> left = demands, a(m);
  std::function<void(std::size_t)> rec = [&](std::size_t j) {
    if (j == m) {
      f(a);
      return;
    }
    for (std::size_t k = 0; k < left.size(); ++k) {
      if (left[k] == 0) continue;
      --left[k];
      a[j] = k;
      rec(j + 1);
      ++left[k];
    }
  };
  rec(0);
}

inline double contraction(const Matrix& c, const std::vector<std::size_t>& a) {
  double s = 0.0;
  for (std::size_t j = 0; j < c.rows(); ++j)
    for (std::size_t k = 0; k < c.cols(); ++k) s += c(j, k) * (a[j] == k ? 1.0 : 0.0);
  return s;
}

struct Extremes {
  double best = INFINITY;
  double worst = -INFINITY;
};

inline Extremes objective_extremes(const Matrix& c, const std::vector<std::size_t>& demands) {
  Extremes e;
  enumerate_assignments(demands, c.rows(), [&](const std::vector<std::size_t>& a) {
    const double v = contraction(c, a);
    e.best = std::min(e.best, v);
    e.worst = std::max(e.worst, v);
  });
  return e;
}

inline std::vector<std::size_t> even_demands(std::size_t m, std::size_t n) {
  std::vector<std::size_t> d(n, m / n);
  for (std::size_t k = 0; k < m % n; ++k) ++d[k];
  return d;
}

}  // namespace coe::testing

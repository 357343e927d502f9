#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "coe/lgm.hpp"
#include "support.hpp"

using namespace coe;
using namespace coe::lgm;
using coe::testing::random_matrix;

namespace {

// Two-pass moments in long double, independent of population_moments.
std::pair<double, double> column_moments(const Matrix& s, std::size_t k) {
  long double mean = 0.0L, ss = 0.0L;
  for (std::size_t j = 0; j < s.rows(); ++j) mean += s(j, k);
  mean /= s.rows();
  for (std::size_t j = 0; j < s.rows(); ++j) ss += (s(j, k) - mean) * (s(j, k) - mean);
  return {static_cast<double>(mean), static_cast<double>(std::sqrt(ss / s.rows()))};
}

}  // namespace

TEST(ComputeTcp, UniformExpertsGiveOneOverC) {
  const std::size_t C = 5;
  std::vector<Matrix> probs(3, Matrix(4, C, 1.0 / C));
  const std::vector<std::size_t> y{0, 4, 2, 1};
  const auto t = compute_tcp(probs, y);
  for (double v : t.flat()) EXPECT_DOUBLE_EQ(v, 1.0 / C);
}

TEST(ComputeTcp, ConfidentCorrectExpertGivesOne) {
  Matrix p{{0, 1, 0}, {1, 0, 0}};
  std::vector<Matrix> probs{p};
  const auto t = compute_tcp(probs, std::vector<std::size_t>{1, 0});
  EXPECT_EQ(t(0, 0), 1.0);
  EXPECT_EQ(t(1, 0), 1.0);
}

TEST(ComputeTcp, PicksTrueClassComponents) {
  std::vector<Matrix> probs{Matrix{{0.1, 0.6, 0.3}, {0.2, 0.2, 0.6}, {0.7, 0.2, 0.1}},
                            Matrix{{0.5, 0.25, 0.25}, {0.3, 0.4, 0.3}, {0.05, 0.05, 0.9}}};
  const std::vector<std::size_t> y{1, 2, 0};
  const auto t = compute_tcp(probs, y);
  ASSERT_EQ(t.rows(), 3u);
  ASSERT_EQ(t.cols(), 2u);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(t(j, k), probs[k](j, y[j]));
}

TEST(ComputeTcp, RejectsBadInput) {
  std::vector<std::vector<double>> bad{{0.5, 1.5}};
  EXPECT_THROW(compute_tcp(bad), InvalidInput);
  std::vector<std::vector<double>> ragged{{0.5, 0.5}, {0.5}};
  EXPECT_THROW(compute_tcp(ragged), InvalidInput);
  std::vector<Matrix> probs{Matrix(2, 3, 1.0 / 3)};
  EXPECT_THROW(compute_tcp(probs, std::vector<std::size_t>{0, 3}), InvalidInput);
}

TEST(Standardize, SpecColumn) {
  const auto s = standardize_suitability(Matrix{{0.2}, {0.4}, {0.6}});
  EXPECT_NEAR(s(0, 0), -1.2247, 1e-4);
  EXPECT_NEAR(s(1, 0), 0.0, 1e-12);
  EXPECT_NEAR(s(2, 0), 1.2247, 1e-4);
}

TEST(Standardize, ConstantColumnIsZero) {
  const auto s = standardize_suitability(Matrix{{0.5, 0.1}, {0.5, 0.9}, {0.5, 0.3}});
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(s(j, 0), 0.0);
}

TEST(Standardize, ColumnsHaveZeroMeanUnitStd) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    const auto t0 = random_matrix(2 + rng() % 60, 1 + rng() % 6, rng, 0, 1);
    const auto s = standardize_suitability(t0);
    for (std::size_t k = 0; k < s.cols(); ++k) {
      const auto [mean, sd] = column_moments(s, k);
      const double in_sd = column_moments(t0, k).second;
      EXPECT_NEAR(mean, 0.0, 1e-6);
      EXPECT_NEAR(sd, in_sd / (in_sd + 1e-8), 1e-12);
      if (in_sd >= 0.01) {
        EXPECT_NEAR(sd, 1.0, 1e-6);
      }
    }
  }
}

TEST(Standardize, RejectsSingleRow) {
  EXPECT_THROW(standardize_suitability(Matrix{{0.3, 0.4}}), InvalidInput);
}

TEST(SelectionLabels, DiagonalDominance) {
  const auto l = generate_selection_labels(Matrix{{1, -1}, {-1, 1}});
  EXPECT_EQ(l.index, (std::vector<std::size_t>{0, 1}));
}

TEST(SelectionLabels, BalancedColumns) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    const auto l = generate_selection_labels(random_matrix(8, 2, rng));
    EXPECT_EQ(l.column_counts(), (std::vector<std::size_t>{4, 4}));
  }
  const auto l = generate_selection_labels(random_matrix(10, 3, rng));
  EXPECT_EQ(l.column_counts(), (std::vector<std::size_t>{4, 3, 3}));
}

TEST(SelectionLabels, NearOptimalAgainstEnumeration) {
  std::mt19937_64 rng(99);
  double gap = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng() % 3, m = std::max<std::size_t>(n, 4 + rng() % 9);
    const auto s = random_matrix(m, n, rng, -2, 2);
    const auto d = coe::testing::even_demands(m, n);
    const auto ex = coe::testing::objective_extremes(negated(s), d);
    const double got = -coe::testing::contraction(s, generate_selection_labels(s).index);
    gap += ex.worst > ex.best ? (got - ex.best) / (ex.worst - ex.best) : 0.0;
  }
  EXPECT_LE(gap / 100.0, 0.10);
}

TEST(SelectionLabels, RejectsNonFinite) {
  EXPECT_THROW(generate_selection_labels(Matrix{{NAN, 0}, {0, 1}}), InvalidInput);
}

TEST(LossWeights, IdenticalRowsGiveUniform) {
  const auto v = selection_loss_weights(Matrix{{1, 2, 3}, {1, 2, 3}, {1, 2, 3}, {1, 2, 3}});
  for (double x : v) EXPECT_DOUBLE_EQ(x, 0.25);
}

TEST(LossWeights, RowSpreadExample) {
  const auto v = selection_loss_weights(Matrix{{1, -1}, {0, 0}});
  EXPECT_DOUBLE_EQ(v[0], 1.0);
  EXPECT_DOUBLE_EQ(v[1], 0.0);
}

TEST(LossWeights, AllFlatRowsFallBackToUniform) {
  const auto v = selection_loss_weights(Matrix(3, 2, 0.7));
  for (double x : v) EXPECT_DOUBLE_EQ(x, 1.0 / 3);
}

TEST(LossWeights, SumToOneAndProportionalToRowStd) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 100; ++t) {
    const auto s = random_matrix(1 + rng() % 50, 2 + rng() % 5, rng, -3, 3);
    const auto v = selection_loss_weights(s);
    EXPECT_NEAR(std::accumulate(v.begin(), v.end(), 0.0), 1.0, 1e-9);
    // Ratios against row 0 must match the ratios of row spreads.
    const auto spread = [&](std::size_t j) {
      long double mean = 0.0L, ss = 0.0L;
      for (double x : s.row(j)) mean += x;
      mean /= s.cols();
      for (double x : s.row(j)) ss += (x - mean) * (x - mean);
      return static_cast<double>(std::sqrt(ss / s.cols()));
    };
    for (std::size_t j = 1; j < s.rows(); ++j)
      EXPECT_NEAR(v[j] * spread(0), v[0] * spread(j), 1e-12);
  }
}

TEST(LossWeights, RejectsSingleExpert) {
  EXPECT_THROW(selection_loss_weights(Matrix{{1}, {2}}), InvalidInput);
}

TEST(RawTcpLabels, ArgmaxWithTies) {
  EXPECT_EQ(raw_tcp_labels(Matrix{{0.9, 0.1}, {0.8, 0.2}}).index,
            (std::vector<std::size_t>{0, 0}));
  EXPECT_EQ(raw_tcp_labels(Matrix(3, 4, 0.25)).index, (std::vector<std::size_t>{0, 0, 0}));
  std::mt19937_64 rng(1);
  const auto t = random_matrix(20, 3, rng, 0, 1);
  const auto l = raw_tcp_labels(t);
  const auto dense = l.dense();
  for (std::size_t j = 0; j < 20; ++j) {
    EXPECT_EQ(std::accumulate(dense.row(j).begin(), dense.row(j).end(), 0.0), 1.0);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_LE(t(j, k), t(j, l.index[j]));
  }
}

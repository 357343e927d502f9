#pragma once

#include <cstddef>
#include <vector>

#include "coe/error.hpp"
#include "coe/matrix.hpp"

namespace coe {

/// Binary matrix with exactly one 1 per row, stored as the column index of
/// that 1. Selection labels (L) and assignments (A) both use it.
struct OneHotMatrix {
  std::vector<std::size_t> index;
  std::size_t cols = 0;

  OneHotMatrix() = default;
  OneHotMatrix(std::vector<std::size_t> idx, std::size_t n) : index(std::move(idx)), cols(n) {
    for (std::size_t k : index) require(k < cols, "one-hot index out of range");
  }

  [[nodiscard]] std::size_t rows() const noexcept { return index.size(); }

  [[nodiscard]] Matrix dense() const {
    Matrix out(rows(), cols, 0.0);
    for (std::size_t j = 0; j < rows(); ++j) out(j, index[j]) = 1.0;
    return out;
  }

  [[nodiscard]] std::vector<std::size_t> column_counts() const {
    std::vector<std::size_t> counts(cols, 0);
    for (std::size_t k : index) ++counts[k];
    return counts;
  }

  friend bool operator==(const OneHotMatrix&, const OneHotMatrix&) = default;
};

/// Row-wise argmax of a real matrix (ties: smallest column).
inline OneHotMatrix argmax_rows(const Matrix& m) {
  std::vector<std::size_t> idx(m.rows());
  for (std::size_t j = 0; j < m.rows(); ++j) idx[j] = argmax(m.row(j));
  return {std::move(idx), m.cols()};
}

}  // namespace coe

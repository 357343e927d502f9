#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "coe/error.hpp"

namespace coe {

/// Dense row-major matrix. Thin value type; all numerics live in free
/// functions elsewhere.
template <class T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  BasicMatrix(std::initializer_list<std::initializer_list<T>> init) {
    rows_ = init.size();
    cols_ = rows_ == 0 ? 0 : init.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      require(row.size() == cols_, "ragged matrix initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const BasicMatrix& a, const BasicMatrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;

template <class T>
BasicMatrix<T> negated(const BasicMatrix<T>& m) {
  BasicMatrix<T> out(m.rows(), m.cols());
  std::transform(m.flat().begin(), m.flat().end(), out.flat().begin(),
                 [](T v) { return -v; });
  return out;
}

/// Copies the listed rows of `m` into a new matrix, in the given order.
template <class T>
BasicMatrix<T> gather_rows(const BasicMatrix<T>& m, std::span<const std::size_t> rows) {
  BasicMatrix<T> out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < m.rows(), "gather_rows: row index out of range");
    std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
  }
  return out;
}

template <class T>
std::vector<T> column_sums(const BasicMatrix<T>& m) {
  std::vector<T> sums(m.cols(), T{});
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) sums[c] += m(r, c);
  return sums;
}

template <class T>
std::vector<T> row_sums(const BasicMatrix<T>& m) {
  std::vector<T> sums(m.rows(), T{});
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) sums[r] += m(r, c);
  return sums;
}

/// Index of the largest entry; ties go to the smallest index.
inline std::size_t argmax(std::span<const double> values) {
  require(!values.empty(), "argmax of empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

}  // namespace coe

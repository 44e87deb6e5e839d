// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "spell/error.hpp"

namespace spell {

/// Dense row-major matrix. `T` is float for production runs and double for
/// the gradient-check suites.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      fail(ErrorKind::kDimension,
           "matrix data length " + std::to_string(data_.size()) +
               " does not match " + shape_string(rows, cols));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  std::string shape() const { return shape_string(rows_, cols_); }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) {
      out.data()[i] = static_cast<U>(data_[i]);
    }
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename T>
Matrix<T> Matrix<T>::from_rows(
    std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Matrix out(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) {
      fail(ErrorKind::kDimension, "ragged initializer for matrix");
    }
    std::size_t j = 0;
    for (T v : row) out(i, j++) = v;
    ++i;
  }
  return out;
}

/// A learnable tensor with its accumulated gradient.
template <typename T>
struct ParamTensor {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;

  ParamTensor() = default;
  ParamTensor(std::string n, std::size_t rows, std::size_t cols)
      : name(std::move(n)), value(rows, cols), grad(rows, cols) {}

  void zero_grad() { grad.fill(T{0}); }
  std::size_t size() const noexcept { return value.size(); }
};

// Plain dense products used by the layers. All accumulate in a fixed loop
// order so results are bit-reproducible.

/// out = a * b
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);

/// out = a^T * b
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b);

/// out = a * b^T
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b);

/// Rows [begin, begin + count) of m as a new matrix.
template <typename T>
Matrix<T> slice_rows(const Matrix<T>& m, std::size_t begin, std::size_t count);

/// Columns [begin, begin + count) of m as a new matrix.
template <typename T>
Matrix<T> slice_cols(const Matrix<T>& m, std::size_t begin, std::size_t count);

/// [a | b] column-wise.
template <typename T>
Matrix<T> hconcat(const Matrix<T>& a, const Matrix<T>& b);

template <typename T>
void add_inplace(Matrix<T>& dst, const Matrix<T>& src);

template <typename T>
bool all_finite(const Matrix<T>& m) noexcept;

}  // namespace spell

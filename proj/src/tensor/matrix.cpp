// SPDX-License-Identifier: Apache-2.0
#include "spell/matrix.hpp"

#include <cmath>

namespace spell {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kState: return "state error";
    case ErrorKind::kValidation: return "validation error";
    case ErrorKind::kDegenerateBatch: return "degenerate batch";
    case ErrorKind::kUndefinedMetric: return "undefined metric";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kIo: return "io error";
    case ErrorKind::kFormat: return "format error";
  }
  return "error";
}

namespace {

[[noreturn]] void shape_mismatch(const char* op, const std::string& a,
                                 const std::string& b) {
  fail(ErrorKind::kDimension,
       std::string(op) + ": incompatible shapes " + a + " and " + b);
}

}  // namespace

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Matrix<T> out(n, m);
  // Four output rows per pass share each load of a row of b. Every output
  // element still sums over p in ascending order.
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    T* o0 = out.row(i).data();
    T* o1 = out.row(i + 1).data();
    T* o2 = out.row(i + 2).data();
    T* o3 = out.row(i + 3).data();
    const T* a0 = a.row(i).data();
    const T* a1 = a.row(i + 1).data();
    const T* a2 = a.row(i + 2).data();
    const T* a3 = a.row(i + 3).data();
    for (std::size_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const T* br = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) {
        const T bv = br[j];
        o0[j] += v0 * bv;
        o1[j] += v1 * bv;
        o2[j] += v2 * bv;
        o3[j] += v3 * bv;
      }
    }
  }
  for (; i < n; ++i) {
    T* o = out.row(i).data();
    const T* ar = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) shape_mismatch("matmul_tn", a.shape(), b.shape());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Matrix<T> out(k, m);
  // Rows of a and b are consumed four at a time; each output element still
  // accumulates in ascending row order.
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const T* a0 = a.row(i).data();
    const T* a1 = a.row(i + 1).data();
    const T* a2 = a.row(i + 2).data();
    const T* a3 = a.row(i + 3).data();
    const T* b0 = b.row(i).data();
    const T* b1 = b.row(i + 1).data();
    const T* b2 = b.row(i + 2).data();
    const T* b3 = b.row(i + 3).data();
    for (std::size_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      T* o = out.row(p).data();
      for (std::size_t j = 0; j < m; ++j) {
        T acc = o[j];
        acc += v0 * b0[j];
        acc += v1 * b1[j];
        acc += v2 * b2[j];
        acc += v3 * b3[j];
        o[j] = acc;
      }
    }
  }
  for (; i < n; ++i) {
    const T* ar = a.row(i).data();
    const T* br = b.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      T* o = out.row(p).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) shape_mismatch("matmul_nt", a.shape(), b.shape());
  // Transpose once so the inner loop runs over contiguous rows.
  Matrix<T> bt(b.cols(), b.rows());
  for (std::size_t r = 0; r < b.rows(); ++r) {
    const T* br = b.row(r).data();
    for (std::size_t c = 0; c < b.cols(); ++c) bt.row(c)[r] = br[c];
  }
  return matmul(a, bt);
}

template <typename T>
Matrix<T> slice_rows(const Matrix<T>& m, std::size_t begin, std::size_t count) {
  if (begin + count > m.rows()) {
    fail(ErrorKind::kDimension, "slice_rows out of range for " + m.shape());
  }
  Matrix<T> out(count, m.cols());
  std::copy_n(m.data().begin() + begin * m.cols(), count * m.cols(),
              out.data().begin());
  return out;
}

template <typename T>
Matrix<T> slice_cols(const Matrix<T>& m, std::size_t begin, std::size_t count) {
  if (begin + count > m.cols()) {
    fail(ErrorKind::kDimension, "slice_cols out of range for " + m.shape());
  }
  Matrix<T> out(m.rows(), count);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::copy_n(m.row(i).begin() + begin, count, out.row(i).begin());
  }
  return out;
}

template <typename T>
Matrix<T> hconcat(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) shape_mismatch("hconcat", a.shape(), b.shape());
  Matrix<T> out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    std::copy(a.row(i).begin(), a.row(i).end(), o.begin());
    std::copy(b.row(i).begin(), b.row(i).end(), o.begin() + a.cols());
  }
  return out;
}

template <typename T>
void add_inplace(Matrix<T>& dst, const Matrix<T>& src) {
  if (!dst.same_shape(src)) shape_mismatch("add", dst.shape(), src.shape());
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T>
bool all_finite(const Matrix<T>& m) noexcept {
  for (T v : m.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

#define SPELL_INSTANTIATE(T)                                                  \
  template Matrix<T> matmul(const Matrix<T>&, const Matrix<T>&);              \
  template Matrix<T> matmul_tn(const Matrix<T>&, const Matrix<T>&);           \
  template Matrix<T> matmul_nt(const Matrix<T>&, const Matrix<T>&);           \
  template Matrix<T> slice_rows(const Matrix<T>&, std::size_t, std::size_t);  \
  template Matrix<T> slice_cols(const Matrix<T>&, std::size_t, std::size_t);  \
  template Matrix<T> hconcat(const Matrix<T>&, const Matrix<T>&);             \
  template void add_inplace(Matrix<T>&, const Matrix<T>&);                    \
  template bool all_finite(const Matrix<T>&) noexcept;

SPELL_INSTANTIATE(float)
SPELL_INSTANTIATE(double)

#undef SPELL_INSTANTIATE

}  // namespace spell

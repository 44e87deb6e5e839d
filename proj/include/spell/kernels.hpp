// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "spell/matrix.hpp"

namespace spell {

enum class Mode { kTrain, kEval };

// ---------------------------------------------------------------------------
// Linear

/// Input saved by linear_forward for the matching linear_backward.
template <typename T>
struct LinearCache {
  std::optional<Matrix<T>> input;
};

/// out = x * w + b, with w stored [in x out] and b [1 x out].
template <typename T>
Matrix<T> linear_forward(const Matrix<T>& x, const ParamTensor<T>& w,
                         const ParamTensor<T>& b,
                         LinearCache<T>* cache = nullptr);

/// Accumulates x^T * g into w.grad and column sums of g into b.grad, and
/// returns g * w^T. Consumes the cache. Only input columns from
/// `input_grad_from` on get a gradient (the result has that many fewer
/// columns); pass the input width to skip it entirely.
template <typename T>
Matrix<T> linear_backward(const Matrix<T>& grad_out, LinearCache<T>& cache,
                          ParamTensor<T>& w, ParamTensor<T>& b,
                          std::size_t input_grad_from = 0);

// ---------------------------------------------------------------------------
// Activations

template <typename T>
struct ReluCache {
  std::optional<Matrix<T>> input;
};

template <typename T>
Matrix<T> relu(const Matrix<T>& x, ReluCache<T>* cache = nullptr);

/// Gradient passes where the cached input is > 0; zero at and below the kink.
template <typename T>
Matrix<T> relu_backward(const Matrix<T>& grad_out, ReluCache<T>& cache);

template <typename T>
T sigmoid(T x) noexcept;

template <typename T>
Matrix<T> sigmoid(const Matrix<T>& x);

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BatchNormState {
  ParamTensor<T> gamma;  // [1 x d]
  ParamTensor<T> beta;   // [1 x d]
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormState() = default;
  BatchNormState(const std::string& prefix, std::size_t features);

  std::size_t features() const noexcept { return running_mean.size(); }
};

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::kEval;
  std::optional<Matrix<T>> normalized;
  std::vector<T> inv_std;
};

/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into the running estimates (unbiased variance, as torch does).
/// Eval mode reads only the running estimates.
template <typename T>
Matrix<T> batchnorm_forward(const Matrix<T>& x, BatchNormState<T>& state,
                            Mode mode, BatchNormCache<T>* cache = nullptr);

/// Eval-mode forward that leaves the state untouched.
template <typename T>
Matrix<T> batchnorm_infer(const Matrix<T>& x, const BatchNormState<T>& state);

template <typename T>
Matrix<T> batchnorm_backward(const Matrix<T>& grad_out,
                             BatchNormCache<T>& cache,
                             BatchNormState<T>& state);

// ---------------------------------------------------------------------------
// Loss

inline constexpr double kBceClamp = 1e-7;

template <typename T>
struct BceResult {
  double loss = 0.0;
  std::vector<T> grad;  // d loss / d p
};

/// Mean binary cross-entropy over the batch. Probabilities are clamped to
/// [1e-7, 1 - 1e-7] before the log; labels must be 0 or 1.
template <typename T>
BceResult<T> bce_loss(std::span<const T> probs, std::span<const T> labels);

}  // namespace spell

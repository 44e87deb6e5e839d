// SPDX-License-Identifier: Apache-2.0
#include "spell/kernels.hpp"

#include <cmath>

namespace spell {

template <typename T>
Matrix<T> linear_forward(const Matrix<T>& x, const ParamTensor<T>& w,
                         const ParamTensor<T>& b, LinearCache<T>* cache) {
  if (x.cols() != w.value.rows()) {
    fail(ErrorKind::kDimension, "linear '" + w.name + "': input " + x.shape() +
                                    " does not match weight " +
                                    w.value.shape());
  }
  if (b.value.rows() != 1 || b.value.cols() != w.value.cols()) {
    fail(ErrorKind::kDimension, "linear '" + b.name + "': bias " +
                                    b.value.shape() + " does not match weight " +
                                    w.value.shape());
  }
  Matrix<T> out = matmul(x, w.value);
  const auto bias = b.value.row(0);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  if (cache) cache->input = x;
  return out;
}

template <typename T>
Matrix<T> linear_backward(const Matrix<T>& grad_out, LinearCache<T>& cache,
                          ParamTensor<T>& w, ParamTensor<T>& b,
                          std::size_t input_grad_from) {
  if (!cache.input) {
    fail(ErrorKind::kState,
         "linear '" + w.name + "': backward called without a cached forward");
  }
  const Matrix<T>& x = *cache.input;
  if (grad_out.rows() != x.rows() || grad_out.cols() != w.value.cols()) {
    fail(ErrorKind::kDimension, "linear '" + w.name + "': grad " +
                                    grad_out.shape() + " vs input " +
                                    x.shape() + " and weight " +
                                    w.value.shape());
  }
  add_inplace(w.grad, matmul_tn(x, grad_out));
  auto gb = b.grad.row(0);
  for (std::size_t i = 0; i < grad_out.rows(); ++i) {
    auto g = grad_out.row(i);
    for (std::size_t j = 0; j < g.size(); ++j) gb[j] += g[j];
  }
  const std::size_t in = w.value.rows();
  if (input_grad_from > in) {
    fail(ErrorKind::kDimension, "linear '" + w.name + "': input gradient offset " +
                                    std::to_string(input_grad_from) + " beyond " +
                                    std::to_string(in) + " inputs");
  }
  Matrix<T> grad_x =
      input_grad_from == 0
          ? matmul_nt(grad_out, w.value)
          : (input_grad_from == in
                 ? Matrix<T>(grad_out.rows(), 0)
                 : matmul_nt(grad_out, slice_rows(w.value, input_grad_from,
                                                  in - input_grad_from)));
  cache.input.reset();
  return grad_x;
}

template <typename T>
Matrix<T> relu(const Matrix<T>& x, ReluCache<T>* cache) {
  Matrix<T> out(x.rows(), x.cols());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = src[i] > T{0} ? src[i] : T{0};
  }
  if (cache) cache->input = x;
  return out;
}

template <typename T>
Matrix<T> relu_backward(const Matrix<T>& grad_out, ReluCache<T>& cache) {
  if (!cache.input) {
    fail(ErrorKind::kState, "relu: backward called without a cached forward");
  }
  const Matrix<T>& x = *cache.input;
  if (!x.same_shape(grad_out)) {
    fail(ErrorKind::kDimension,
         "relu: grad " + grad_out.shape() + " vs input " + x.shape());
  }
  Matrix<T> grad(x.rows(), x.cols());
  auto g = grad_out.data();
  auto in = x.data();
  auto dst = grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    dst[i] = in[i] > T{0} ? g[i] : T{0};
  }
  cache.input.reset();
  return grad;
}

template <typename T>
T sigmoid(T x) noexcept {
  if (x >= T{0}) {
    return T{1} / (T{1} + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
Matrix<T> sigmoid(const Matrix<T>& x) {
  Matrix<T> out(x.rows(), x.cols());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = sigmoid(src[i]);
  return out;
}

template <typename T>
BatchNormState<T>::BatchNormState(const std::string& prefix,
                                  std::size_t features)
    : gamma(prefix + ".gamma", 1, features),
      beta(prefix + ".beta", 1, features),
      running_mean(features, T{0}),
      running_var(features, T{1}) {
  gamma.value.fill(T{1});
}

namespace {

template <typename T>
void check_bn_input(const Matrix<T>& x, const BatchNormState<T>& state) {
  if (x.cols() != state.features()) {
    fail(ErrorKind::kDimension, "batch norm '" + state.gamma.name +
                                    "': input " + x.shape() + " has " +
                                    std::to_string(x.cols()) +
                                    " features, expected " +
                                    std::to_string(state.features()));
  }
}

}  // namespace

template <typename T>
Matrix<T> batchnorm_infer(const Matrix<T>& x, const BatchNormState<T>& state) {
  check_bn_input(x, state);
  const std::size_t d = x.cols();
  std::vector<T> scale(d), shift(d);
  for (std::size_t j = 0; j < d; ++j) {
    const T inv = T{1} / std::sqrt(state.running_var[j] + state.eps);
    scale[j] = state.gamma.value(0, j) * inv;
    shift[j] = state.beta.value(0, j) - state.running_mean[j] * scale[j];
  }
  Matrix<T> out(x.rows(), d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    for (std::size_t j = 0; j < d; ++j) o[j] = in[j] * scale[j] + shift[j];
  }
  return out;
}

template <typename T>
Matrix<T> batchnorm_forward(const Matrix<T>& x, BatchNormState<T>& state,
                            Mode mode, BatchNormCache<T>* cache) {
  check_bn_input(x, state);
  if (mode == Mode::kEval) {
    if (cache) {
      const std::size_t d = state.features();
      cache->mode = Mode::kEval;
      cache->inv_std.resize(d);
      for (std::size_t j = 0; j < d; ++j) {
        cache->inv_std[j] = T{1} / std::sqrt(state.running_var[j] + state.eps);
      }
      Matrix<T> normalized(x.rows(), d);
      for (std::size_t i = 0; i < x.rows(); ++i) {
        auto in = x.row(i);
        auto nr = normalized.row(i);
        for (std::size_t j = 0; j < d; ++j) {
          nr[j] = (in[j] - state.running_mean[j]) * cache->inv_std[j];
        }
      }
      cache->normalized = std::move(normalized);
    }
    return batchnorm_infer(x, state);
  }

  const std::size_t n = x.rows(), d = x.cols();
  if (n < 2) {
    fail(ErrorKind::kDegenerateBatch,
         "batch norm '" + state.gamma.name +
             "': training needs at least 2 rows, got " + std::to_string(n));
  }
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < d; ++j) mean[j] += r[j];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      const double c = r[j] - mean[j];
      var[j] += c * c;
    }
  }
  for (double& v : var) v /= static_cast<double>(n);

  std::vector<T> inv_std(d);
  for (std::size_t j = 0; j < d; ++j) {
    inv_std[j] = static_cast<T>(1.0 / std::sqrt(var[j] + double(state.eps)));
  }

  Matrix<T> normalized(n, d);
  Matrix<T> out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto in = x.row(i);
    auto nr = normalized.row(i);
    auto o = out.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      nr[j] = static_cast<T>((in[j] - mean[j]) * inv_std[j]);
      o[j] = state.gamma.value(0, j) * nr[j] + state.beta.value(0, j);
    }
  }

  const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
  const T m = state.momentum;
  for (std::size_t j = 0; j < d; ++j) {
    state.running_mean[j] =
        (T{1} - m) * state.running_mean[j] + m * static_cast<T>(mean[j]);
    state.running_var[j] =
        (T{1} - m) * state.running_var[j] + m * static_cast<T>(var[j] * unbias);
  }

  if (cache) {
    cache->mode = Mode::kTrain;
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename T>
Matrix<T> batchnorm_backward(const Matrix<T>& grad_out,
                             BatchNormCache<T>& cache,
                             BatchNormState<T>& state) {
  if (!cache.normalized) {
    fail(ErrorKind::kState, "batch norm '" + state.gamma.name +
                                "': backward called without a cached forward");
  }
  const std::size_t d = state.features();
  if (grad_out.cols() != d) {
    fail(ErrorKind::kDimension,
         "batch norm '" + state.gamma.name + "': grad " + grad_out.shape());
  }
  const std::size_t n = grad_out.rows();
  Matrix<T> grad_x(n, d);

  const Matrix<T>& xhat = *cache.normalized;
  if (xhat.rows() != n) {
    fail(ErrorKind::kDimension,
         "batch norm '" + state.gamma.name + "': grad " + grad_out.shape() +
             " vs cached " + xhat.shape());
  }
  std::vector<double> sum_g(d, 0.0), sum_gx(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto g = grad_out.row(i);
    auto xr = xhat.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      sum_g[j] += g[j];
      sum_gx[j] += double(g[j]) * xr[j];
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    state.gamma.grad(0, j) += static_cast<T>(sum_gx[j]);
    state.beta.grad(0, j) += static_cast<T>(sum_g[j]);
  }
  if (cache.mode == Mode::kEval) {
    // Running statistics are constants: the input gradient is a plain scale.
    for (std::size_t i = 0; i < n; ++i) {
      auto g = grad_out.row(i);
      auto gx = grad_x.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        gx[j] = g[j] * state.gamma.value(0, j) * cache.inv_std[j];
      }
    }
    cache.normalized.reset();
    return grad_x;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto g = grad_out.row(i);
    auto xr = xhat.row(i);
    auto gx = grad_x.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      const double k = double(state.gamma.value(0, j)) * cache.inv_std[j];
      gx[j] = static_cast<T>(
          k * (g[j] - inv_n * sum_g[j] - xr[j] * inv_n * sum_gx[j]));
    }
  }
  cache.normalized.reset();
  return grad_x;
}

template <typename T>
BceResult<T> bce_loss(std::span<const T> probs, std::span<const T> labels) {
  if (probs.size() != labels.size()) {
    fail(ErrorKind::kDimension,
         "bce: " + std::to_string(probs.size()) + " probabilities vs " +
             std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = probs.size();
  if (n == 0) fail(ErrorKind::kValidation, "bce: empty batch");
  BceResult<T> result;
  result.grad.resize(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = labels[i];
    if (y != 0.0 && y != 1.0) {
      fail(ErrorKind::kValidation, "bce: label at index " + std::to_string(i) +
                                       " is " + std::to_string(y) +
                                       ", expected 0 or 1");
    }
    const double p =
        std::clamp(static_cast<double>(probs[i]), kBceClamp, 1.0 - kBceClamp);
    total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    result.grad[i] = static_cast<T>(inv_n * (p - y) / (p * (1.0 - p)));
  }
  result.loss = total * inv_n;
  return result;
}

#define SPELL_INSTANTIATE(T)                                                   \
  template Matrix<T> linear_forward(const Matrix<T>&, const ParamTensor<T>&,   \
                                    const ParamTensor<T>&, LinearCache<T>*);   \
  template Matrix<T> linear_backward(const Matrix<T>&, LinearCache<T>&,        \
                                     ParamTensor<T>&, ParamTensor<T>&,         \
                                     std::size_t);                             \
  template Matrix<T> relu(const Matrix<T>&, ReluCache<T>*);                    \
  template Matrix<T> relu_backward(const Matrix<T>&, ReluCache<T>&);           \
  template T sigmoid(T) noexcept;                                              \
  template Matrix<T> sigmoid(const Matrix<T>&);                                \
  template struct BatchNormState<T>;                                           \
  template Matrix<T> batchnorm_forward(const Matrix<T>&, BatchNormState<T>&,   \
                                       Mode, BatchNormCache<T>*);              \
  template Matrix<T> batchnorm_infer(const Matrix<T>&,                         \
                                     const BatchNormState<T>&);                \
  template Matrix<T> batchnorm_backward(const Matrix<T>&, BatchNormCache<T>&,  \
                                        BatchNormState<T>&);                   \
  template BceResult<T> bce_loss(std::span<const T>, std::span<const T>);

SPELL_INSTANTIATE(float)
SPELL_INSTANTIATE(double)

#undef SPELL_INSTANTIATE

}  // namespace spell

// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the unit suites: random inputs and finite differences.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <unistd.h>

#include "doctest.h"
#include "spell/error.hpp"
#include "spell/matrix.hpp"

namespace testutil {

template <typename T>
spell::Matrix<T> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng,
                               double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  spell::Matrix<T> m(r, c);
  for (T& v : m.data()) v = static_cast<T>(normal(rng));
  return m;
}

inline double rel_error(double analytic, double numeric, double floor = 1e-8) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

/// Central difference of `loss` w.r.t. `value`, restoring the entry.
template <typename T, typename Loss>
double central_difference(T& value, double h, const Loss& loss) {
  const T saved = value;
  value = static_cast<T>(saved + h);
  const double up = loss();
  value = static_cast<T>(saved - h);
  const double down = loss();
  value = saved;
  return (up - down) / (2.0 * h);
}

/// Max relative error between `grad` and finite differences over every
/// entry of `value`.
template <typename T, typename Loss>
double max_fd_error(spell::Matrix<T>& value, const spell::Matrix<T>& grad, double h,
                    const Loss& loss) {
  double worst = 0.0;
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double numeric = central_difference(value.data()[i], h, loss);
    worst = std::max(worst, rel_error(grad.data()[i], numeric));
  }
  return worst;
}

/// Kind of the spell::Error thrown by `f`; fails the test if none is.
inline spell::ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const spell::Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return spell::ErrorKind::kState;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("spell_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil

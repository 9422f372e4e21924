// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <string>

namespace tokentune {

/// Dense row-major matrix. Row-major so that one row is one token's hidden
/// state and row gathers are contiguous copies.
template <class Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Real>
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic, Eigen::RowMajor>;

/// Storable element types. long double exists only for extended-precision
/// loss evaluation inside the gradient checker.
template <class T>
concept RealScalar = std::same_as<T, float> || std::same_as<T, double> || std::same_as<T, long double>;

enum class DType { kFloat32, kFloat64 };

inline std::size_t dtype_bytes(DType dtype) { return dtype == DType::kFloat32 ? 4 : 8; }

inline const char* dtype_name(DType dtype) {
  return dtype == DType::kFloat32 ? "float32" : "float64";
}

template <RealScalar Real>
constexpr DType dtype_of() {
  static_assert(!std::is_same_v<Real, long double>, "long double has no storage dtype");
  return sizeof(Real) == 4 ? DType::kFloat32 : DType::kFloat64;
}

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <class Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

template <RealScalar Real>
std::size_t element_count(const Matrix<Real>& m) {
  return static_cast<std::size_t>(m.size());
}

template <RealScalar Real>
std::size_t byte_count(const Matrix<Real>& m) {
  return element_count(m) * sizeof(Real);
}

/// Largest |a-b| / max(|a|, |b|, floor) over all entries; 0 for empty inputs.
template <RealScalar Real>
double max_relative_error(const Matrix<Real>& a, const Matrix<Real>& b, double floor = 1e-8) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a.data()[i]);
    const double y = static_cast<double>(b.data()[i]);
    const double scale = std::max({std::abs(x), std::abs(y), floor});
    worst = std::max(worst, std::abs(x - y) / scale);
  }
  return worst;
}

template <RealScalar Real>
double max_abs_difference(const Matrix<Real>& a, const Matrix<Real>& b) {
  if (a.size() == 0) return 0.0;
  return static_cast<double>((a - b).cwiseAbs().maxCoeff());
}

}  // namespace tokentune

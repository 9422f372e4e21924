// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "tokentune/autodiff.hpp"
#include "tokentune/transformer.hpp"

namespace tokentune {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled

  void validate() const;
};

/// First and second moments for trainable parameters only.
template <RealScalar Real>
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::map<std::string, Matrix<Real>> m;
  std::map<std::string, Matrix<Real>> v;

  AdamState() = default;
  AdamState(const TransformerModel<Real>& model, AdamConfig config);

  std::size_t element_count() const;
  std::size_t byte_count() const { return element_count() * sizeof(Real); }
};

/// Bias-corrected Adam. Trainable parameters without an entry in `grads`
/// see a zero gradient; frozen parameters are never touched. A non-finite
/// gradient aborts before any parameter changes, naming the parameter.
template <RealScalar Real>
void adam_step(TransformerModel<Real>& model, const GradStore<Real>& grads, AdamState<Real>& state);

extern template struct AdamState<float>;
extern template struct AdamState<double>;

}  // namespace tokentune

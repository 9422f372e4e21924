// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokentune/transformer.hpp"

namespace tokentune {

struct AdapterConfig {
  /// Per-layer weight names ("W1", "W2", "W_Q", "W_K", "W_V", "W_O").
  std::vector<std::string> targets{"W1", "W2"};
  Index rank = 8;
  double alpha = 16.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adds A (normal, std 0.02) and B (zeros) for every target in every layer,
/// then freezes everything except the new factors. The adapted forward is
/// therefore bit-identical to the base forward until B moves.
template <RealScalar Real>
void attach(TransformerModel<Real>& model, const AdapterConfig& config);

/// Folds scaling * A * B into each target weight. Throws StateError when
/// there is nothing left to merge.
template <RealScalar Real>
void merge(TransformerModel<Real>& model);

/// Copy of a merged model without the adapter factors or records.
template <RealScalar Real>
TransformerModel<Real> strip_adapters(const TransformerModel<Real>& model);

}  // namespace tokentune

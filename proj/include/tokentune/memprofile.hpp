// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

// Engine-accounted memory of one training step, split into parameters,
// gradients, optimizer moments and cached activations. Bytes come from the
// engine's own allocation ledger, not from the process.

#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tokentune/train.hpp"

namespace tokentune {

struct MemoryReport {
  Regime regime = Regime::kFull;
  Index n = 0;
  Index k = 0;
  Index batch = 0;
  std::size_t params_bytes = 0;
  std::size_t grads_bytes = 0;
  std::size_t optimizer_bytes = 0;
  std::size_t activations_bytes = 0;  // cached for backward, whole batch
  std::size_t peak_bytes = 0;         // resident state plus the ledger's high-water mark
  std::size_t activations_after_backward = 0;
  std::map<int, std::size_t> activations_by_layer;  // -1: embedding and head
  std::map<std::string, std::size_t> activations_by_op;
};

/// One full training step (forward of the whole batch with every tape alive,
/// backward, optimizer update) on a copy of `model` prepared for the regime.
template <RealScalar Real>
MemoryReport profile_step(const TransformerModel<Real>& model, std::span<const Example> batch,
                          const TrainConfig& config);

struct SweepGrid {
  std::vector<Regime> regimes;
  std::vector<Index> lengths;
  std::vector<SelectionSize> selections;  // ignored by full and lora, which select every row
  std::vector<Index> batches;

  bool empty() const {
    return regimes.empty() || lengths.empty() || batches.empty() ||
           (selections.empty() && std::all_of(regimes.begin(), regimes.end(),
                                              [](Regime r) { return uses_selection(r); }));
  }
};

/// Profiles every grid point on synthetic classification sequences of each
/// length, using `model_config` with max_positions raised as needed.
std::vector<MemoryReport> sweep_report(const ModelConfig& model_config, const SweepGrid& grid,
                                       const TrainConfig& train_config, DType dtype,
                                       std::uint64_t seed);

inline constexpr const char* kSweepHeader =
    "regime,n,k,batch,params_bytes,grads_bytes,optimizer_bytes,activations_bytes,peak_bytes";

void write_sweep_csv(std::ostream& out, const std::vector<MemoryReport>& rows);
void write_sweep_csv(const std::filesystem::path& path, const std::vector<MemoryReport>& rows);

/// Report as a JSON object (breakdowns included).
std::string memory_report_json(const MemoryReport& report);

}  // namespace tokentune

// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/memprofile.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace tokentune {

template <RealScalar Real>
MemoryReport profile_step(const TransformerModel<Real>& model, std::span<const Example> batch,
                          const TrainConfig& config) {
  if (batch.empty()) throw RangeError("profile_step: empty batch");
  TransformerModel<Real> working = model;
  prepare_model(working, config);
  AdamState<Real> optimizer(working, config.adam);

  MemoryReport r;
  r.regime = config.regime;
  r.batch = static_cast<Index>(batch.size());
  r.n = static_cast<Index>(batch.front().seq.size());
  r.params_bytes = working.parameter_elements() * sizeof(Real);
  r.grads_bytes = working.trainable_elements() * sizeof(Real);
  r.optimizer_bytes = optimizer.byte_count();

  auto ledger = std::make_shared<MemoryLedger>();
  std::vector<std::unique_ptr<ExampleRun<Real>>> runs;
  Index terms = 0;
  for (const auto& ex : batch) {
    const TokenPartition partition = partition_for(ex, config, 0);
    r.k = std::max(r.k, partition.k);
    terms += loss_terms(ex, partition, config.task);
    runs.push_back(run_example(working, ex, partition, config.regime, config.task, config.mutation, ledger));
    const Tape<Real>& tape = runs.back()->tape;
    r.activations_bytes += tape.cached_activation_elements() * sizeof(Real);
    for (int layer = -1; layer < static_cast<int>(working.config().n_layers); ++layer) {
      r.activations_by_layer[layer] += tape.cached_elements_for_layer(layer) * sizeof(Real);
    }
    for (std::size_t op = 0; op < kOpKindCount; ++op) {
      const auto kind = static_cast<OpKind>(op);
      if (const std::size_t e = tape.cached_elements_for_op(kind)) {
        r.activations_by_op[op_name(kind)] += e * sizeof(Real);
      }
    }
  }

  GradStore<Real> accum;
  for (auto& run : runs) {
    GradStore<Real> grads = run->tape.backward(run->loss.loss);
    grads.scale(static_cast<Real>(1.0 / static_cast<double>(terms)));
    for (const auto& [name, g] : grads) accum.accumulate(name, g);
    r.activations_after_backward += run->tape.cached_activation_elements() * sizeof(Real);
  }
  adam_step(working, accum, optimizer);
  r.peak_bytes = r.params_bytes + r.grads_bytes + r.optimizer_bytes + ledger->peak_bytes();
  return r;
}

std::vector<MemoryReport> sweep_report(const ModelConfig& model_config, const SweepGrid& grid,
                                       const TrainConfig& train_config, DType dtype,
                                       std::uint64_t seed) {
  std::vector<MemoryReport> rows;
  if (grid.empty()) return rows;
  ModelConfig mc = model_config;
  mc.causal = false;
  for (Index n : grid.lengths) mc.max_positions = std::max(mc.max_positions, n);
  mc.validate();
  const auto f32 = TransformerModel<float>::initialize(mc, seed);
  const auto f64 = dtype == DType::kFloat64 ? f32.cast<double>() : TransformerModel<double>{};

  for (Index n : grid.lengths) {
    Index max_batch = 0;
    for (Index b : grid.batches) max_batch = std::max(max_batch, b);
    ClassificationSpec spec;
    spec.n_examples = max_batch;
    spec.seq_len = n;
    spec.n_classes = mc.n_classes;
    spec.vocab_size = mc.vocab_size;
    spec.seed = mix_seed(seed, static_cast<std::uint64_t>(n));
    const Dataset data = gen_classification(spec);
    for (Regime regime : grid.regimes) {
      std::vector<SelectionSize> selections = grid.selections;
      if (!uses_selection(regime)) selections = {SelectionSize::fraction(1.0)};
      for (const SelectionSize& sel : selections) {
        for (Index b : grid.batches) {
          TrainConfig tc = train_config;
          tc.task = TaskMode::kClassification;
          tc.regime = regime;
          tc.selection = sel;
          const std::span<const Example> batch(data.data(), static_cast<std::size_t>(b));
          rows.push_back(dtype == DType::kFloat64 ? profile_step(f64, batch, tc)
                                                  : profile_step(f32, batch, tc));
        }
      }
    }
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<MemoryReport>& rows) {
  out << kSweepHeader << '\n';
  for (const auto& r : rows) {
    out << to_string(r.regime) << ',' << r.n << ',' << r.k << ',' << r.batch << ','
        << r.params_bytes << ',' << r.grads_bytes << ',' << r.optimizer_bytes << ','
        << r.activations_bytes << ',' << r.peak_bytes << '\n';
  }
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<MemoryReport>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_sweep_csv(out, rows);
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::string memory_report_json(const MemoryReport& r) {
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [layer, bytes] : r.activations_by_layer) {
    layers[layer < 0 ? std::string("outside") : std::to_string(layer)] = bytes;
  }
  return nlohmann::json{{"regime", to_string(r.regime)},
                        {"n", r.n},
                        {"k", r.k},
                        {"batch", r.batch},
                        {"params_bytes", r.params_bytes},
                        {"grads_bytes", r.grads_bytes},
                        {"optimizer_bytes", r.optimizer_bytes},
                        {"activations_bytes", r.activations_bytes},
                        {"peak_bytes", r.peak_bytes},
                        {"activations_after_backward", r.activations_after_backward},
                        {"activations_by_layer", layers},
                        {"activations_by_op", r.activations_by_op}}
      .dump(2);
}

template MemoryReport profile_step(const TransformerModel<float>&, std::span<const Example>,
                                   const TrainConfig&);
template MemoryReport profile_step(const TransformerModel<double>&, std::span<const Example>,
                                   const TrainConfig&);

}  // namespace tokentune

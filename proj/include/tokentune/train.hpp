// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tokentune/adapters.hpp"
#include "tokentune/data.hpp"
#include "tokentune/optim.hpp"
#include "tokentune/tokentune.hpp"

namespace tokentune {

enum class Regime { kFull, kTokenTune, kLora, kTokenTuneLora };

const char* to_string(Regime regime);
Regime parse_regime(const std::string& name);
inline bool uses_selection(Regime r) { return r == Regime::kTokenTune || r == Regime::kTokenTuneLora; }
inline bool uses_adapters(Regime r) { return r == Regime::kLora || r == Regime::kTokenTuneLora; }

struct TrainConfig {
  Regime regime = Regime::kTokenTune;
  TaskMode task = TaskMode::kClassification;
  SelectionSize selection = SelectionSize::fraction(0.25);
  Index batch_size = 8;
  Index accumulation_steps = 1;
  Index epochs = 1;
  Index max_steps = 0;  // 0: run every epoch to the end
  AdamConfig adam;
  AdapterConfig lora;
  std::uint64_t seed = 0;
  DType dtype = DType::kFloat32;
  Mutation mutation = Mutation::kNone;

  void validate() const;
};

/// splitmix64 finalizer over the pair.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Fresh selection seed per example and epoch.
std::uint64_t partition_seed(std::uint64_t run_seed, std::uint64_t serial, Index epoch);

/// Attaches adapters for the LoRA regimes (classifier head stays trainable)
/// or unfreezes everything for the others.
template <RealScalar Real>
void prepare_model(TransformerModel<Real>& model, const TrainConfig& config);

/// Rows that have something to predict (LM) or are real tokens
/// (classification).
std::vector<std::uint8_t> eligible_rows(const Example& example, TaskMode task);

/// Selection for one example under `config`: a sampled partition for the
/// TokenTune regimes, every eligible row otherwise.
TokenPartition partition_for(const Example& example, const TrainConfig& config, Index epoch);

/// Number of loss terms the example contributes (1, or predicted tokens).
Index loss_terms(const Example& example, const TokenPartition& partition, TaskMode task);

/// Forward and unnormalized loss of one example on its own tape.
template <RealScalar Real>
struct ExampleRun {
  explicit ExampleRun(std::shared_ptr<MemoryLedger> ledger) : tape(std::move(ledger)) {}

  Tape<Real> tape;
  LossOutput<Real> loss;
  TokenPartition partition;
  std::size_t cached_elements = 0;
};

template <RealScalar Real>
std::unique_ptr<ExampleRun<Real>> run_example(const TransformerModel<Real>& model,
                                              const Example& example,
                                              const TokenPartition& partition, Regime regime,
                                              TaskMode task, Mutation mutation,
                                              std::shared_ptr<MemoryLedger> ledger);

struct StepMetrics {
  std::int64_t step = 0;
  Index epoch = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::size_t cached_elements = 0;
  std::size_t peak_bytes = 0;
  double wall_ms = 0.0;
};

/// The deterministic part of a step record.
std::string metrics_record(const StepMetrics& m);
std::string timing_record(const StepMetrics& m);

template <RealScalar Real>
class Trainer {
 public:
  using StepCallback = std::function<void(const StepMetrics&)>;

  /// `model` must already be prepared for the regime.
  Trainer(TransformerModel<Real>& model, TrainConfig config);

  /// One optimizer update over `window`, processed as consecutive
  /// micro-batches of batch_size. Loss is the mean over examples
  /// (classification) or over predicted tokens (LM) of the whole window.
  StepMetrics train_step(std::span<const Example> window, Index epoch);

  /// Shuffled epochs of windows of batch_size * accumulation_steps.
  std::vector<StepMetrics> fit(const Dataset& train, const StepCallback& on_step = {});

  const AdamState<Real>& optimizer() const noexcept { return optimizer_; }
  const GradStore<Real>& last_gradients() const noexcept { return last_grads_; }
  std::int64_t steps() const noexcept { return optimizer_.step; }
  const TrainConfig& config() const noexcept { return config_; }

  /// Parameters, trainable gradients and optimizer moments.
  std::size_t resident_bytes() const;

 private:
  TransformerModel<Real>& model_;
  TrainConfig config_;
  AdamState<Real> optimizer_;
  GradStore<Real> last_grads_;
};

struct EvalMetrics {
  TaskMode task = TaskMode::kClassification;
  Index examples = 0;
  Index tokens = 0;
  double loss = 0.0;  // mean per example (classification) or per token (LM)
  double accuracy = 0.0;
  double perplexity = 0.0;
};

/// Classification pools over all unpadded rows; LM scores every row with a
/// target. No selection, no caching.
template <RealScalar Real>
EvalMetrics evaluate(const TransformerModel<Real>& model, std::span<const Example> data,
                     TaskMode task);

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace tokentune

// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

namespace tokentune {

const char* to_string(Regime regime) {
  switch (regime) {
    case Regime::kFull: return "full";
    case Regime::kTokenTune: return "tokentune";
    case Regime::kLora: return "lora";
    case Regime::kTokenTuneLora: return "tokentune+lora";
  }
  return "unknown";
}

Regime parse_regime(const std::string& name) {
  for (Regime r : {Regime::kFull, Regime::kTokenTune, Regime::kLora, Regime::kTokenTuneLora}) {
    if (name == to_string(r)) return r;
  }
  throw ConfigError("regime", "unknown regime '" + name + "'");
}

void TrainConfig::validate() const {
  if (selection.count && *selection.count < 1) throw ConfigError("k", "must be >= 1");
  if (selection.ratio && !(*selection.ratio > 0.0 && *selection.ratio <= 1.0)) {
    throw ConfigError("selection_ratio", "must lie in (0, 1]");
  }
  if (uses_selection(regime) && !selection.count && !selection.ratio) {
    throw ConfigError("k", "TokenTune regimes need k or selection_ratio");
  }
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  if (accumulation_steps < 1) throw ConfigError("train.accumulation_steps", "must be >= 1");
  if (epochs < 1) throw ConfigError("train.epochs", "must be >= 1");
  if (max_steps < 0) throw ConfigError("train.max_steps", "must be >= 0");
  adam.validate();
  if (uses_adapters(regime)) lora.validate();
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t partition_seed(std::uint64_t run_seed, std::uint64_t serial, Index epoch) {
  return mix_seed(mix_seed(run_seed, serial), static_cast<std::uint64_t>(epoch));
}

template <RealScalar Real>
void prepare_model(TransformerModel<Real>& model, const TrainConfig& config) {
  if (!uses_adapters(config.regime)) {
    if (!model.adapters().empty()) {
      throw ConfigError("regime", std::string(to_string(config.regime)) +
                                      " cannot train a model that carries adapters");
    }
    model.set_all_frozen(false);
    return;
  }
  if (model.adapters().empty()) attach(model, config.lora);
  // The task head is freshly initialized, so it trains alongside the adapters.
  for (auto& p : model.params()) {
    if (p.name.starts_with("cls.")) p.frozen = false;
  }
}

std::vector<std::uint8_t> eligible_rows(const Example& example, TaskMode task) {
  std::vector<std::uint8_t> out = example.seq.pad_mask;
  if (task == TaskMode::kLanguageModel) {
    if (example.targets.size() != example.seq.size()) {
      throw ShapeError("LM example " + std::to_string(example.serial) + " has " +
                       std::to_string(example.targets.size()) + " targets for " +
                       std::to_string(example.seq.size()) + " rows");
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (example.targets[i] < 0) out[i] = 0;
    }
  }
  return out;
}

TokenPartition partition_for(const Example& example, const TrainConfig& config, Index epoch) {
  const std::vector<std::uint8_t> eligible = eligible_rows(example, config.task);
  const auto candidates = static_cast<Index>(std::count(eligible.begin(), eligible.end(), 1));
  if (candidates == 0) {
    throw RangeError("example " + std::to_string(example.serial) + " has no trainable row");
  }
  const Index k = uses_selection(config.regime) ? config.selection.resolve(candidates) : candidates;
  std::span<const std::uint8_t> eligibility;
  if (config.task == TaskMode::kLanguageModel) eligibility = eligible;
  return select_positions(example.seq.pad_mask, k, config.task,
                          partition_seed(config.seed, example.serial, epoch), eligibility);
}

Index loss_terms(const Example&, const TokenPartition& partition, TaskMode task) {
  return task == TaskMode::kClassification ? 1 : static_cast<Index>(partition.selected.size());
}

template <RealScalar Real>
std::unique_ptr<ExampleRun<Real>> run_example(const TransformerModel<Real>& model,
                                              const Example& example,
                                              const TokenPartition& partition, Regime regime,
                                              TaskMode task, Mutation mutation,
                                              std::shared_ptr<MemoryLedger> ledger) {
  auto run = std::make_unique<ExampleRun<Real>>(std::move(ledger));
  run->partition = partition;
  Tape<Real>& tape = run->tape;
  if (uses_selection(regime)) {
    const SplitHidden<Real> split =
        tokentune_forward(tape, model, example.seq, partition, TokenTuneOptions{mutation});
    run->loss = task == TaskMode::kClassification
                    ? loss_classification(tape, model, split, example.label)
                    : loss_lm(tape, model, split, example.targets);
  } else {
    // Plain forward, every row tracked; the loss reads the same rows the
    // partition lists as selected.
    const Var<Real> h = forward(tape, model, example.seq);
    if (task == TaskMode::kClassification) {
      const Index classes = model.config().n_classes;
      if (example.label < 0 || example.label >= classes) {
        throw RangeError("label " + std::to_string(example.label) + " outside [0, " +
                         std::to_string(classes) + ")");
      }
      const ClassOutput<Real> out = classify_pool_eval(tape, model, h, example.seq.pad_mask);
      const std::array<Index, 1> target{example.label};
      run->loss.loss = tape.cross_entropy(out.logits, target);
      run->loss.count = 1;
    } else {
      std::vector<Index> targets;
      for (Index r : partition.selected) targets.push_back(example.targets[static_cast<std::size_t>(r)]);
      const Var<Real> rows = tape.select_rows(h, partition.selected);
      run->loss.loss = tape.cross_entropy(lm_logits(tape, model, rows), targets);
      run->loss.count = static_cast<Index>(targets.size());
    }
    run->loss.value = static_cast<double>(run->loss.loss.value()(0, 0));
  }
  run->cached_elements = tape.cached_activation_elements();
  return run;
}

std::string metrics_record(const StepMetrics& m) {
  return nlohmann::json{{"step", m.step},
                        {"epoch", m.epoch},
                        {"loss", m.loss},
                        {"grad_norm", m.grad_norm},
                        {"cached_elements", m.cached_elements},
                        {"peak_bytes", m.peak_bytes}}
      .dump();
}

std::string timing_record(const StepMetrics& m) {
  return nlohmann::json{{"step", m.step}, {"wall_ms", m.wall_ms}}.dump();
}

template <RealScalar Real>
Trainer<Real>::Trainer(TransformerModel<Real>& model, TrainConfig config)
    : model_(model), config_(std::move(config)) {
  config_.validate();
  if (config_.task == TaskMode::kLanguageModel && !model_.has_lm_head()) {
    throw ConfigError("model.causal", "LM training needs a causal model with an LM head");
  }
  if (config_.task == TaskMode::kClassification && model_.has_lm_head()) {
    throw ConfigError("model.causal", "classification needs a bidirectional model");
  }
  if (uses_adapters(config_.regime) && model_.adapters().empty()) {
    throw StateError("Trainer: LoRA regime on a model without adapters; call prepare_model");
  }
  optimizer_ = AdamState<Real>(model_, config_.adam);
}

template <RealScalar Real>
std::size_t Trainer<Real>::resident_bytes() const {
  return (model_.parameter_elements() + model_.trainable_elements()) * sizeof(Real) +
         optimizer_.byte_count();
}

template <RealScalar Real>
StepMetrics Trainer<Real>::train_step(std::span<const Example> window, Index epoch) {
  if (window.empty()) throw RangeError("train_step: empty batch");
  const auto start = std::chrono::steady_clock::now();

  std::vector<TokenPartition> partitions;
  partitions.reserve(window.size());
  Index total_terms = 0;
  for (const auto& ex : window) {
    partitions.push_back(partition_for(ex, config_, epoch));
    total_terms += loss_terms(ex, partitions.back(), config_.task);
  }
  const double weight = 1.0 / static_cast<double>(total_terms);

  auto ledger = std::make_shared<MemoryLedger>();
  GradStore<Real> accum;
  StepMetrics metrics;
  metrics.epoch = epoch;
  double loss_sum = 0.0;
  const auto batch = static_cast<std::size_t>(config_.batch_size);
  for (std::size_t begin = 0; begin < window.size(); begin += batch) {
    const std::size_t end = std::min(window.size(), begin + batch);
    // Forward the whole micro-batch first so its caches coexist, as they
    // would in a batched implementation.
    std::vector<std::unique_ptr<ExampleRun<Real>>> runs;
    for (std::size_t i = begin; i < end; ++i) {
      try {
        runs.push_back(run_example(model_, window[i], partitions[i], config_.regime, config_.task,
                                   config_.mutation, ledger));
      } catch (const NumericError& e) {
        throw NumericError("example " + std::to_string(window[i].serial) + ": " + e.what());
      }
      if (!std::isfinite(runs.back()->loss.value)) {
        throw NumericError("example " + std::to_string(window[i].serial) + ": non-finite loss");
      }
      metrics.cached_elements += runs.back()->cached_elements;
    }
    for (auto& run : runs) {
      GradStore<Real> grads = run->tape.backward(run->loss.loss);
      grads.scale(static_cast<Real>(weight));
      for (const auto& [name, g] : grads) accum.accumulate(name, g);
      loss_sum += run->loss.value;
      run.reset();
    }
  }

  adam_step(model_, accum, optimizer_);
  metrics.step = optimizer_.step;
  metrics.loss = loss_sum * weight;
  metrics.grad_norm = accum.l2_norm();
  metrics.peak_bytes = resident_bytes() + ledger->peak_bytes();
  metrics.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  last_grads_ = std::move(accum);
  return metrics;
}

template <RealScalar Real>
std::vector<StepMetrics> Trainer<Real>::fit(const Dataset& train, const StepCallback& on_step) {
  if (train.empty()) throw RangeError("fit: empty training set");
  const auto window = static_cast<std::size_t>(config_.batch_size * config_.accumulation_steps);
  std::vector<StepMetrics> history;
  std::vector<std::size_t> order(train.size());
  std::vector<Example> buffer;
  for (Index epoch = 0; epoch < config_.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(config_.seed, 0x5eedULL + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += window) {
      if (config_.max_steps > 0 && optimizer_.step >= config_.max_steps) return history;
      buffer.clear();
      for (std::size_t i = begin; i < std::min(order.size(), begin + window); ++i) {
        buffer.push_back(train[order[i]]);
      }
      history.push_back(train_step(buffer, epoch));
      if (on_step) on_step(history.back());
    }
  }
  return history;
}

template <RealScalar Real>
EvalMetrics evaluate(const TransformerModel<Real>& model, std::span<const Example> data,
                     TaskMode task) {
  if (data.empty()) throw RangeError("evaluate: empty dataset");
  EvalMetrics out;
  out.task = task;
  double total = 0.0;
  Index correct = 0;
  for (const auto& ex : data) {
    Tape<Real> tape;
    NoGradGuard<Real> no_grad(tape);
    const Var<Real> h = forward(tape, model, ex.seq);
    if (task == TaskMode::kClassification) {
      const ClassOutput<Real> cls = classify_pool_eval(tape, model, h, ex.seq.pad_mask);
      Index best = 0;
      cls.log_probs.row(0).maxCoeff(&best);
      if (best == ex.label) ++correct;
      total -= static_cast<double>(cls.log_probs(0, ex.label));
      ++out.tokens;
    } else {
      std::vector<Index> rows;
      std::vector<Index> targets;
      for (std::size_t i = 0; i < ex.targets.size(); ++i) {
        if (ex.targets[i] >= 0 && ex.seq.pad_mask[i]) {
          rows.push_back(static_cast<Index>(i));
          targets.push_back(ex.targets[i]);
        }
      }
      if (rows.empty()) continue;
      const Var<Real> logits = lm_logits(tape, model, tape.select_rows(h, rows));
      total += static_cast<double>(tape.cross_entropy(logits, targets).value()(0, 0));
      out.tokens += static_cast<Index>(rows.size());
    }
    ++out.examples;
  }
  if (out.tokens == 0) throw RangeError("evaluate: nothing to score");
  out.loss = total / static_cast<double>(out.tokens);
  if (task == TaskMode::kClassification) {
    out.accuracy = static_cast<double>(correct) / static_cast<double>(out.examples);
  } else {
    out.perplexity = std::exp(out.loss);
  }
  return out;
}

template class Trainer<float>;
template class Trainer<double>;
template void prepare_model(TransformerModel<float>&, const TrainConfig&);
template void prepare_model(TransformerModel<double>&, const TrainConfig&);
template std::unique_ptr<ExampleRun<float>> run_example(const TransformerModel<float>&,
                                                        const Example&, const TokenPartition&,
                                                        Regime, TaskMode, Mutation,
                                                        std::shared_ptr<MemoryLedger>);
template std::unique_ptr<ExampleRun<double>> run_example(const TransformerModel<double>&,
                                                         const Example&, const TokenPartition&,
                                                         Regime, TaskMode, Mutation,
                                                         std::shared_ptr<MemoryLedger>);
template EvalMetrics evaluate(const TransformerModel<float>&, std::span<const Example>, TaskMode);
template EvalMetrics evaluate(const TransformerModel<double>&, std::span<const Example>, TaskMode);

}  // namespace tokentune

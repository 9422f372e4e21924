// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

// Oracles for the selective gradient.
//
// The stop-gradient reference runs the ordinary forward in storage order
// and, after every sub-step, replaces the rows outside G by constants. It
// builds its own embedding, attention and feed-forward from tape primitives
// so that it shares nothing with the two-group forward it checks.
//
// In snapshot mode the constants are the values recorded at the current
// parameters. Perturbing parameters then moves only the G path, which
// makes the surrogate loss a function whose exact gradient is the
// selective gradient, so central differences can check it.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tokentune/train.hpp"

namespace tokentune {

/// Target of the loss: a class label or per-row next tokens.
struct LossSpec {
  TaskMode task = TaskMode::kClassification;
  Index label = -1;
  std::vector<Index> targets;

  static LossSpec of(const Example& example, TaskMode task);
};

/// Values of the rows outside G recorded by the oracle, in recording order.
struct StopGradSnapshot {
  std::vector<Matrix<long double>> tensors;
};

enum class StopGradMode { kDetach, kRecord, kReplay };

struct OracleResult {
  GradStore<double> grads;
  double loss = 0.0;
  Matrix<double> hidden;  // final hidden rows, storage order
};

/// Gradients of the loss with every tensor on the unselected path wrapped
/// in a stop-gradient.
OracleResult stopgrad_reference_backward(const TransformerModel<double>& model,
                                         const TokenSequence& seq, const TokenPartition& partition,
                                         const LossSpec& loss);

/// Unselected-path values at the model's current parameters. Recorded and
/// replayed in extended precision: float64 central differences with step
/// 1e-5 carry about 1e-11 of round-off, which is already 1e-5 relative on a
/// gradient coordinate of 1e-6.
StopGradSnapshot record_stopgrad_snapshot(const TransformerModel<double>& model,
                                          const TokenSequence& seq,
                                          const TokenPartition& partition, const LossSpec& loss);

/// Loss with the unselected path pinned to `snapshot`.
long double stopgrad_surrogate_loss(const TransformerModel<double>& model, const TokenSequence& seq,
                                    const TokenPartition& partition, const LossSpec& loss,
                                    const StopGradSnapshot& snapshot);

struct FdOptions {
  double step = 1e-5;
  Index subsample_threshold = 4096;  // parameters larger than this are subsampled
  Index subsample_count = 256;
  std::uint64_t seed = 0;
};

struct NumericGradient {
  std::vector<Index> coords;  // flat row-major indices
  std::vector<double> values;
};

/// Central differences (L(t + h e) - L(t - h e)) / 2h per coordinate,
/// perturbing each named matrix in place and restoring it afterwards.
std::map<std::string, NumericGradient> finite_diff_grad(
    const std::function<long double()>& loss,
    const std::vector<std::pair<std::string, Matrix<double>*>>& params,
    const FdOptions& options = {});

/// Every parameter of `model`, frozen ones included.
std::map<std::string, NumericGradient> finite_diff_grad(const std::function<long double()>& loss,
                                                        TransformerModel<double>& model,
                                                        const FdOptions& options = {});

/// |a - b| / max(|a|, |b|, 1e-8)
double relative_error(double a, double b);

struct ParamCheck {
  std::string name;
  bool frozen = false;
  Index coords_checked = 0;
  double max_rel_err = 0.0;
  Index argmax = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  bool pass = true;
};

/// Frozen parameters are listed with their numeric gradient against an
/// analytic value of 0 (they have no entry); only trainable ones decide
/// `pass`.
struct GradCheckReport {
  std::vector<ParamCheck> params;
  double tolerance = 0.0;
  double step = 0.0;
  bool pass = true;

  double max_rel_err() const;
  std::string summary() const;
};

GradCheckReport compare_gradients(const TransformerModel<double>& model,
                                  const std::map<std::string, NumericGradient>& numeric,
                                  const GradStore<double>& analytic, double tolerance, double step);

/// Absolute difference below which two analytic float64 gradients agree to
/// round-off. Needed for coordinates whose exact value is 0 (a key bias
/// when every visible key is tracked), where the relative floor of 1e-8
/// would turn 1e-17 noise into a 1e-9 "error".
inline constexpr double kRoundoff = 1e-14;

/// relative_error, capped at the absolute difference when that is within
/// kRoundoff.
double gradient_error(double a, double b);

/// Maximum element-wise gradient_error over the union of names; a name in
/// only one store counts as error 1.
double max_relative_error(const GradStore<double>& a, const GradStore<double>& b);

// Equivalence suite -------------------------------------------------------------

struct GridPoint {
  Index index = 0;
  Index n = 0;         // rows, padding included
  Index padding = 0;   // trailing pad rows
  Index k = 0;         // requested selection
  Index layers = 1;
  bool causal = false;
  bool lora = false;
  std::uint64_t seed = 0;

  std::string describe() const;
};

struct EquivalenceOptions {
  Index points = 60;
  std::uint64_t seed = 0;
  Index min_n = 4;
  Index max_n = 16;
  Index max_layers = 3;
  Index d_model = 8;
  Index n_heads = 2;
  Index d_ff = 16;
  Index vocab_size = 16;
  double init_std = 0.3;
  double value_tolerance = 1e-12;
  double gradient_tolerance = 1e-10;
  Mutation mutation = Mutation::kNone;
};

struct PropertyRecord {
  Index grid_point = 0;
  std::string property;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct EquivalenceReport {
  std::vector<GridPoint> grid;
  std::vector<PropertyRecord> records;
  bool pass = true;
  std::optional<PropertyRecord> first_failure;

  /// Names of properties with at least one failing record, in first-seen order.
  std::vector<std::string> failed_properties() const;
  double worst(const std::string& property) const;
  void write_jsonl(const std::filesystem::path& path) const;
};

/// Random grid over n, k, depth, causality and adapters; every point checks
/// value-preservation, stopgrad-equivalence and cache-scaling, and points
/// with k covering every candidate row also check full-equivalence.
std::vector<GridPoint> sample_grid(const EquivalenceOptions& options);
EquivalenceReport equivalence_suite(const EquivalenceOptions& options);
EquivalenceReport equivalence_suite(const EquivalenceOptions& options,
                                    const std::vector<GridPoint>& grid);

/// Model and example a grid point describes, reproducible from the point alone.
struct GridCase {
  TransformerModel<double> model;
  Example example;
  TrainConfig config;
  TokenPartition partition;
};

GridCase build_grid_case(const GridPoint& point, const EquivalenceOptions& options);

}  // namespace tokentune

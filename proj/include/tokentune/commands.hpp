// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

// The four subcommands behind the `tokentune` executable. Each returns a
// process exit status:
//   0  success
//   1  gradcheck failure or any unexpected error
//   2  bad config, unreadable file, or a checkpoint that does not fit
//   3  numeric abort (NaN/Inf during training)

#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tokentune/config.hpp"
#include "tokentune/data.hpp"
#include "tokentune/verify.hpp"

namespace tokentune {

struct CommandOptions {
  std::filesystem::path config;
  std::vector<std::string> overrides;  // "a.b=value"
  std::optional<std::string> out;
  std::optional<std::string> checkpoint;   // eval
  std::optional<std::string> inject_bug;   // gradcheck
  bool merge_adapters = false;             // eval
};

int cmd_train(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_eval(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_memsweep(const CommandOptions& options, std::ostream& out, std::ostream& err);

/// Dispatches by name and turns exceptions into exit statuses.
int run_command(const std::string& name, const CommandOptions& options, std::ostream& out,
                std::ostream& err);

/// Resolves config, --set overrides, TOKENTUNE_SEED and --out.
RunConfig resolve_config(const CommandOptions& options);

struct TaskData {
  Dataset train;
  Dataset test;
};

/// Builds the train/test split a config describes. For the LM task a
/// missing corpus file is generated (and written when a path is given).
TaskData build_task_data(const RunConfig& config);

/// The sequence the finite-difference check runs on: n random tokens (CLS
/// first for classification, next-token targets for LM).
Example gradcheck_example(const RunConfig& config, const ModelConfig& model);

/// Central differences of the stop-gradient surrogate loss against the
/// engine's backward, float64, on `model` with n_layers = gradcheck.layers.
GradCheckReport finite_difference_check(const RunConfig& config);

}  // namespace tokentune

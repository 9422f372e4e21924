// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

// Run configuration: one JSON document, dot-path overrides, seed from the
// environment. Unknown keys are rejected with the offending path.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tokentune/memprofile.hpp"
#include "tokentune/verify.hpp"

namespace tokentune {

struct TaskConfig {
  TaskMode kind = TaskMode::kClassification;
  // classification
  Index n_train = 5000;
  Index n_test = 1000;
  Index min_len = 0;
  double difficulty = 0.2;
  // LM
  std::string corpus;                  // byte file; generated when absent and corpus_bytes > 0
  std::size_t corpus_bytes = 1 << 20;  // size of the generated corpus
  Index stride = 0;                    // 0: seq_len
  double eval_fraction = 0.05;         // trailing windows held out
  Index eval_windows = 64;             // cap on held-out windows scored
  // both
  Index seq_len = 128;
};

struct GradcheckConfig {
  Index points = 60;
  Index n = 6;
  Index k = 2;
  Index layers = 1;
  double tolerance = 1e-6;
  double gradient_tolerance = 1e-10;
  double value_tolerance = 1e-12;
  double step = 1e-5;
  std::string inject_bug = "none";
};

struct MemsweepConfig {
  std::vector<std::string> regimes{"full", "tokentune", "lora", "tokentune+lora"};
  std::vector<Index> lengths{512};
  std::vector<Index> k;
  std::vector<double> ratios{0.125, 0.25, 0.5, 0.75, 1.0};
  std::vector<Index> batches{8};
};

struct RunConfig {
  std::uint64_t seed = 0;
  DType dtype = DType::kFloat32;
  std::string regime = "tokentune";
  std::optional<Index> k;
  double selection_ratio = 0.25;
  std::string out = "runs/default";
  std::string checkpoint;
  Index eval_every = 0;  // 0: evaluate once at the end

  ModelConfig model;
  TaskConfig task;
  Index batch_size = 8;
  Index accumulation_steps = 1;
  Index epochs = 1;
  Index max_steps = 0;
  double lr = 1e-3;
  double weight_decay = 0.0;
  AdapterConfig lora;
  GradcheckConfig gradcheck;
  MemsweepConfig memsweep;

  TrainConfig train_config() const;
  SelectionSize selection() const;
  void validate() const;
};

nlohmann::json default_config_json();
nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

/// `key=value` with a dot path key; the value is parsed as JSON when it
/// parses, otherwise taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Reads `path`, applies overrides in order, then TOKENTUNE_SEED if set.
/// Throws ConfigError (field-level) or IoError (unreadable file).
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides);

std::string version_string();

}  // namespace tokentune

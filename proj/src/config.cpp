// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/config.hpp"

#include <cstdlib>
#include <fstream>

#include "tokentune/checkpoint.hpp"

#ifndef TOKENTUNE_VERSION
#define TOKENTUNE_VERSION "unknown"
#endif

namespace tokentune {

using nlohmann::json;

std::string version_string() { return std::string("tokentune ") + TOKENTUNE_VERSION; }

namespace {

std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

void merge_strict(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = join(prefix, key);
    if (!base.contains(key)) throw ConfigError(path, "unknown key");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, path);
    } else {
      slot = value;
    }
  }
}

template <class T>
T read(const json& j, const std::string& path) {
  const json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    node = &node->at(path.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    return node->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path, "has the wrong type (" + node->dump() + ")");
  }
}

DType parse_dtype(const std::string& s) {
  if (s == "float32") return DType::kFloat32;
  if (s == "float64") return DType::kFloat64;
  throw ConfigError("dtype", "must be float32 or float64, got '" + s + "'");
}

TaskMode parse_task(const std::string& s) {
  if (s == "classification") return TaskMode::kClassification;
  if (s == "lm") return TaskMode::kLanguageModel;
  throw ConfigError("task.kind", "must be classification or lm, got '" + s + "'");
}

}  // namespace

json default_config_json() { return to_json(RunConfig{}); }

json to_json(const RunConfig& c) {
  json model;
  tokentune::to_json(model, c.model);
  return json{
      {"seed", c.seed},
      {"dtype", dtype_name(c.dtype)},
      {"regime", c.regime},
      {"k", c.k ? json(*c.k) : json(nullptr)},
      {"selection_ratio", c.selection_ratio},
      {"out", c.out},
      {"checkpoint", c.checkpoint},
      {"eval_every", c.eval_every},
      {"model", model},
      {"task",
       {{"kind", to_string(c.task.kind)},
        {"n_train", c.task.n_train},
        {"n_test", c.task.n_test},
        {"min_len", c.task.min_len},
        {"difficulty", c.task.difficulty},
        {"corpus", c.task.corpus},
        {"corpus_bytes", c.task.corpus_bytes},
        {"stride", c.task.stride},
        {"eval_fraction", c.task.eval_fraction},
        {"eval_windows", c.task.eval_windows},
        {"seq_len", c.task.seq_len}}},
      {"train",
       {{"batch_size", c.batch_size},
        {"accumulation_steps", c.accumulation_steps},
        {"epochs", c.epochs},
        {"max_steps", c.max_steps},
        {"lr", c.lr},
        {"weight_decay", c.weight_decay}}},
      {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"targets", c.lora.targets}}},
      {"gradcheck",
       {{"points", c.gradcheck.points},
        {"n", c.gradcheck.n},
        {"k", c.gradcheck.k},
        {"layers", c.gradcheck.layers},
        {"tolerance", c.gradcheck.tolerance},
        {"gradient_tolerance", c.gradcheck.gradient_tolerance},
        {"value_tolerance", c.gradcheck.value_tolerance},
        {"step", c.gradcheck.step},
        {"inject_bug", c.gradcheck.inject_bug}}},
      {"memsweep",
       {{"regimes", c.memsweep.regimes},
        {"lengths", c.memsweep.lengths},
        {"k", c.memsweep.k},
        {"ratios", c.memsweep.ratios},
        {"batches", c.memsweep.batches}}},
  };
}

RunConfig run_config_from_json(const json& user) {
  json j = default_config_json();
  merge_strict(j, user, "");

  RunConfig c;
  c.seed = read<std::uint64_t>(j, "seed");
  c.dtype = parse_dtype(read<std::string>(j, "dtype"));
  c.regime = read<std::string>(j, "regime");
  if (!j["k"].is_null()) c.k = read<Index>(j, "k");
  c.selection_ratio = read<double>(j, "selection_ratio");
  c.out = read<std::string>(j, "out");
  c.checkpoint = read<std::string>(j, "checkpoint");
  c.eval_every = read<Index>(j, "eval_every");
  from_json(j["model"], c.model);

  c.task.kind = parse_task(read<std::string>(j, "task.kind"));
  c.task.n_train = read<Index>(j, "task.n_train");
  c.task.n_test = read<Index>(j, "task.n_test");
  c.task.min_len = read<Index>(j, "task.min_len");
  c.task.difficulty = read<double>(j, "task.difficulty");
  c.task.corpus = read<std::string>(j, "task.corpus");
  c.task.corpus_bytes = read<std::size_t>(j, "task.corpus_bytes");
  c.task.stride = read<Index>(j, "task.stride");
  c.task.eval_fraction = read<double>(j, "task.eval_fraction");
  c.task.eval_windows = read<Index>(j, "task.eval_windows");
  c.task.seq_len = read<Index>(j, "task.seq_len");

  c.batch_size = read<Index>(j, "train.batch_size");
  c.accumulation_steps = read<Index>(j, "train.accumulation_steps");
  c.epochs = read<Index>(j, "train.epochs");
  c.max_steps = read<Index>(j, "train.max_steps");
  c.lr = read<double>(j, "train.lr");
  c.weight_decay = read<double>(j, "train.weight_decay");

  c.lora.rank = read<Index>(j, "lora.rank");
  c.lora.alpha = read<double>(j, "lora.alpha");
  c.lora.targets = read<std::vector<std::string>>(j, "lora.targets");
  c.lora.seed = c.seed;

  c.gradcheck.points = read<Index>(j, "gradcheck.points");
  c.gradcheck.n = read<Index>(j, "gradcheck.n");
  c.gradcheck.k = read<Index>(j, "gradcheck.k");
  c.gradcheck.layers = read<Index>(j, "gradcheck.layers");
  c.gradcheck.tolerance = read<double>(j, "gradcheck.tolerance");
  c.gradcheck.gradient_tolerance = read<double>(j, "gradcheck.gradient_tolerance");
  c.gradcheck.value_tolerance = read<double>(j, "gradcheck.value_tolerance");
  c.gradcheck.step = read<double>(j, "gradcheck.step");
  c.gradcheck.inject_bug = read<std::string>(j, "gradcheck.inject_bug");

  c.memsweep.regimes = read<std::vector<std::string>>(j, "memsweep.regimes");
  c.memsweep.lengths = read<std::vector<Index>>(j, "memsweep.lengths");
  c.memsweep.k = read<std::vector<Index>>(j, "memsweep.k");
  c.memsweep.ratios = read<std::vector<double>>(j, "memsweep.ratios");
  c.memsweep.batches = read<std::vector<Index>>(j, "memsweep.batches");
  c.validate();
  return c;
}

SelectionSize RunConfig::selection() const {
  return k ? SelectionSize::absolute(*k) : SelectionSize::fraction(selection_ratio);
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.regime = parse_regime(regime);
  t.task = task.kind;
  t.selection = selection();
  t.batch_size = batch_size;
  t.accumulation_steps = accumulation_steps;
  t.epochs = epochs;
  t.max_steps = max_steps;
  t.adam.learning_rate = lr;
  t.adam.weight_decay = weight_decay;
  t.lora = lora;
  t.seed = seed;
  t.dtype = dtype;
  t.mutation = parse_mutation(gradcheck.inject_bug);
  return t;
}

void RunConfig::validate() const {
  model.validate();
  parse_regime(regime);
  parse_mutation(gradcheck.inject_bug);
  if (k && *k < 1) throw ConfigError("k", "must be >= 1");
  if (!(selection_ratio > 0.0 && selection_ratio <= 1.0)) {
    throw ConfigError("selection_ratio", "must lie in (0, 1]");
  }
  if (eval_every < 0) throw ConfigError("eval_every", "must be >= 0");
  if (task.seq_len < 2) throw ConfigError("task.seq_len", "must be >= 2");
  if (task.seq_len > model.max_positions) {
    throw ConfigError("task.seq_len", "exceeds model.max_positions");
  }
  if (task.kind == TaskMode::kLanguageModel) {
    if (!model.causal) throw ConfigError("model.causal", "must be true for the lm task");
    if (model.vocab_size < ByteTokenizer::kVocabSize) {
      throw ConfigError("model.vocab_size", "must be >= 257 for byte-level LM");
    }
    if (task.stride < 0) throw ConfigError("task.stride", "must be >= 0");
    if (!(task.eval_fraction > 0.0 && task.eval_fraction < 1.0)) {
      throw ConfigError("task.eval_fraction", "must lie in (0, 1)");
    }
    if (task.eval_windows < 1) throw ConfigError("task.eval_windows", "must be >= 1");
  } else {
    if (model.causal) throw ConfigError("model.causal", "must be false for classification");
    if (task.n_train < 1) throw ConfigError("task.n_train", "must be >= 1");
    if (task.n_test < 1) throw ConfigError("task.n_test", "must be >= 1");
  }
  train_config().validate();
  if (gradcheck.n < 3 || gradcheck.k < 1 || gradcheck.layers < 1 || gradcheck.points < 1) {
    throw ConfigError("gradcheck", "n >= 3, k >= 1, layers >= 1 and points >= 1 are required");
  }
  for (const auto& r : memsweep.regimes) parse_regime(r);
  for (double r : memsweep.ratios) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("memsweep.ratios", "entries must lie in (0, 1]");
  }
  for (Index v : memsweep.k) if (v < 1) throw ConfigError("memsweep.k", "entries must be >= 1");
  for (Index v : memsweep.lengths) if (v < 2) throw ConfigError("memsweep.lengths", "entries must be >= 2");
  for (Index v : memsweep.batches) if (v < 1) throw ConfigError("memsweep.batches", "entries must be >= 1");
}

void apply_override(json& j, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError(key, "empty path component");
    if (node->is_null()) *node = json::object();  // section absent from the file
    if (!node->is_object()) throw ConfigError(key, "does not name a config field");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path.string() + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path.string(), "is not valid JSON");
  if (!j.is_object()) throw ConfigError(path.string(), "top level must be an object");
  for (const auto& o : overrides) apply_override(j, o);
  if (const char* env = std::getenv("TOKENTUNE_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const unsigned long long seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument("trailing");
      j["seed"] = seed;
    } catch (const std::exception&) {
      throw ConfigError("TOKENTUNE_SEED", "must be a non-negative integer, got '" + std::string(env) + "'");
    }
  }
  return run_config_from_json(j);
}

}  // namespace tokentune

// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

// Checkpoint files.
//
//   TOKENTUNE-CKPT 1\n
//   header-bytes <N>\n
//   <N bytes of JSON header>\n
//   <payload: little-endian IEEE floats, tensors back to back>
//
// The header holds "kind" ("model" or "adapters"), "dtype" ("float32" or
// "float64"), "config" (the ModelConfig), "tensors" (name, rows, cols,
// frozen, offset in elements) and "adapters" (target, rank, alpha,
// scaling, merged). Payload floats are written verbatim, so a round trip is
// bit-exact.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tokentune/transformer.hpp"

namespace tokentune {

void to_json(nlohmann::json& j, const ModelConfig& config);
/// Unknown keys and wrong types throw ConfigError naming "model.<key>".
void from_json(const nlohmann::json& j, ModelConfig& config);

struct TensorEntry {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  bool frozen = false;
  std::size_t offset = 0;  // elements from payload start
};

struct CheckpointHeader {
  std::string kind;
  DType dtype = DType::kFloat32;
  ModelConfig config;
  std::vector<TensorEntry> tensors;
  std::vector<LoraAdapter> adapters;
};

/// Parses and validates the header only. Throws IoError on anything
/// malformed, including a payload shorter than the header promises.
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

template <RealScalar Real>
void save_checkpoint(const std::filesystem::path& path, const TransformerModel<Real>& model);

/// Loads a model checkpoint, converting precision when the stored dtype
/// differs from Real.
template <RealScalar Real>
TransformerModel<Real> load_checkpoint(const std::filesystem::path& path);

/// Loads a checkpoint and checks it against an expected config; a mismatch
/// throws ShapeError naming the first differing field.
template <RealScalar Real>
TransformerModel<Real> load_checkpoint(const std::filesystem::path& path,
                                       const ModelConfig& expected);

/// Adapter factors and records only.
template <RealScalar Real>
void save_adapters(const std::filesystem::path& path, const TransformerModel<Real>& model);

/// Attaches the stored factors onto `base`, which must have the same
/// config and no adapters yet. Base weights end up frozen.
template <RealScalar Real>
void load_adapters(const std::filesystem::path& path, TransformerModel<Real>& base);

}  // namespace tokentune

// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokentune/transformer.hpp"

namespace tokentune {

/// One training or evaluation example. Classification sets `label`; LM sets
/// `targets`, where targets[i] is the token row i predicts (-1 for none).
struct Example {
  TokenSequence seq;
  Index label = -1;
  std::vector<Index> targets;
  std::uint64_t serial = 0;  // stable index, feeds per-example partition seeds
};

using Dataset = std::vector<Example>;

class ByteTokenizer {
 public:
  static constexpr Index kPad = 256;
  static constexpr Index kVocabSize = 257;

  static std::vector<Index> encode(std::string_view bytes);
  /// Throws RangeError on ids outside [0, 256) (padding included).
  static std::string decode(std::span<const Index> ids);
};

/// Token layout: 0 = CLS, 1 = PAD, 2 .. n_classes + 1 = class markers, the
/// rest filler.
struct ClassificationSpec {
  Index n_examples = 1000;
  Index seq_len = 128;
  Index min_len = 0;  // 0: every sequence has seq_len real tokens
  Index n_classes = 2;
  Index vocab_size = 32;
  double difficulty = 0.2;
  std::uint64_t seed = 0;

  static constexpr Index kCls = 0;
  static constexpr Index kPad = 1;
  static constexpr Index kFirstMarker = 2;

  Index markers_per_sequence(Index length) const;
  void validate() const;
};

/// The label's marker is a strict majority among planted markers; the
/// difficulty knob sets how many markers of other classes are mixed in.
Dataset gen_classification(const ClassificationSpec& spec);

/// Label by counting marker tokens, the bag-of-tokens baseline.
Index majority_marker(const TokenSequence& seq, const ClassificationSpec& spec);

/// Windows of `seq_len` bytes every `stride` bytes; row i predicts byte i + 1
/// of its window, the last row predicts nothing.
Dataset load_lm_corpus(const std::filesystem::path& path, Index seq_len, Index stride);
Dataset lm_windows(std::string_view bytes, Index seq_len, Index stride);

/// Deterministic pseudo-English prose of exactly `bytes` bytes.
std::string generate_text_corpus(std::size_t bytes, std::uint64_t seed);

/// {"ids": [...], "label": y} per line.
void dump_classification_jsonl(const std::filesystem::path& path, const Dataset& data);

}  // namespace tokentune

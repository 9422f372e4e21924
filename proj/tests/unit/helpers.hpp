// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "tokentune/data.hpp"
#include "tokentune/transformer.hpp"

namespace tokentune::testing {

template <RealScalar Real = double>
Matrix<Real> random_matrix(Index rows, Index cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  Matrix<Real> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(normal(rng));
  return m;
}

inline ModelConfig tiny_config(bool causal = false, Index layers = 1) {
  return ModelConfig{.vocab_size = causal ? 257 : 16, .max_positions = 16, .d_model = 8,
                     .n_heads = 2, .d_ff = 16, .n_layers = layers, .causal = causal,
                     .n_classes = 3, .init_std = 0.3};
}

inline Example cls_example(std::vector<Index> ids, Index label, Index padding = 0) {
  Example ex;
  for (Index i = 0; i < padding; ++i) ids.push_back(1);
  ex.seq = TokenSequence::from_ids(ids);
  for (Index i = 0; i < padding; ++i) ex.seq.pad_mask[ex.seq.size() - 1 - i] = 0;
  ex.label = label;
  return ex;
}

inline Example lm_example(std::string_view text) {
  return lm_windows(text, static_cast<Index>(text.size()), static_cast<Index>(text.size())).at(0);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("tokentune-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace tokentune::testing

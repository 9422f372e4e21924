// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

// Token-selective backpropagation.
//
// The rows of every hidden matrix are split into a tracked group G (k
// sampled positions) and an untracked remainder. The remainder is computed
// inside a grad-disabled scope at every layer, so the tape never retains
// anything proportional to n - k except the keys/values that G's queries
// attend over. Forward values are unchanged; only which rows carry
// gradient differs.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokentune/autodiff.hpp"
#include "tokentune/transformer.hpp"

namespace tokentune {

enum class TaskMode { kClassification, kLanguageModel };

const char* to_string(TaskMode mode);

/// k either as an absolute count or as a fraction of the unpadded length.
struct SelectionSize {
  std::optional<Index> count;
  std::optional<double> ratio;

  static SelectionSize absolute(Index k) { return {k, std::nullopt}; }
  static SelectionSize fraction(double r) { return {std::nullopt, r}; }

  /// Ratio rounds half-up with a floor of 1.
  Index resolve(Index unpadded) const;
};

/// Row indices of the tracked group G and its complement. Indices refer to
/// rows of the sequence as stored; `padded` rows belong to neither group but
/// still flow through the untracked path so restore_order is exact.
struct TokenPartition {
  std::vector<Index> selected;
  std::vector<Index> unselected;
  std::vector<Index> padded;
  Index k = 0;
  Index requested_k = 0;
  bool clamped = false;
  std::uint64_t seed = 0;
  TaskMode mode = TaskMode::kClassification;

  Index size() const {
    return static_cast<Index>(selected.size() + unselected.size() + padded.size());
  }
  /// Every row selected, nothing left for the untracked path.
  static TokenPartition all(Index n, TaskMode mode);
};

/// Uniform sample without replacement of k rows among the unpadded (and,
/// when `eligible` is given, eligible) ones. Classification always keeps row
/// 0. k beyond the candidate count is clamped and flagged.
TokenPartition select_positions(std::span<const std::uint8_t> pad_mask, Index k, TaskMode mode,
                                std::uint64_t seed, std::span<const std::uint8_t> eligible = {});

/// Hidden rows split into the tracked group and the untracked remainder,
/// each with its original positions and pad flags.
template <RealScalar Real>
struct SplitHidden {
  Var<Real> selected;
  Var<Real> rest;
  std::vector<Index> rows_selected;
  std::vector<Index> rows_rest;
  std::vector<Index> positions_selected;
  std::vector<Index> positions_rest;
  std::vector<std::uint8_t> pad_selected;
  std::vector<std::uint8_t> pad_rest;

  Index n() const { return static_cast<Index>(rows_selected.size() + rows_rest.size()); }
};

/// Deliberate defects for checking that the verification suite notices
/// them. Never enabled outside gradcheck's mutation harness.
enum class Mutation {
  kNone,
  kTrackUnselectedKeyValues,
  kCacheUnselectedRows,
  kMaskFromStorageOrder,
};

const char* to_string(Mutation mutation);
Mutation parse_mutation(const std::string& name);

struct TokenTuneOptions {
  Mutation mutation = Mutation::kNone;
};

template <RealScalar Real>
SplitHidden<Real> split_reorder(Tape<Real>& tape, const Var<Real>& h, const TokenSequence& seq,
                                const TokenPartition& partition);

/// Inverse of split_reorder: rows back in the sequence's storage order.
template <RealScalar Real>
Var<Real> restore_order(Tape<Real>& tape, const SplitHidden<Real>& split);

/// Pre-norm attention sub-block (norm1, attention, residual) on both groups.
template <RealScalar Real>
SplitHidden<Real> tokentune_attention(Tape<Real>& tape, const TransformerModel<Real>& model,
                                      Index layer, const SplitHidden<Real>& split,
                                      const TokenTuneOptions& options = {});

/// Pre-norm feed-forward sub-block (norm2, FFN, residual) on both groups.
template <RealScalar Real>
SplitHidden<Real> tokentune_ffn(Tape<Real>& tape, const TransformerModel<Real>& model, Index layer,
                                const SplitHidden<Real>& split,
                                const TokenTuneOptions& options = {});

template <RealScalar Real>
SplitHidden<Real> tokentune_forward(Tape<Real>& tape, const TransformerModel<Real>& model,
                                    const TokenSequence& seq, const TokenPartition& partition,
                                    const TokenTuneOptions& options = {});

/// A summed loss over `count` terms (examples or predicted tokens).
template <RealScalar Real>
struct LossOutput {
  Var<Real> loss;
  double value = 0.0;
  Index count = 0;

  double mean() const { return count > 0 ? value / static_cast<double>(count) : 0.0; }
};

/// -log p(label) with the classifier pooled over the tracked rows only.
template <RealScalar Real>
LossOutput<Real> loss_classification(Tape<Real>& tape, const TransformerModel<Real>& model,
                                     const SplitHidden<Real>& split, Index label);

/// Sum over tracked rows i of -log p(targets[i]); `targets` is indexed by
/// storage row and holds -1 where no next token exists.
template <RealScalar Real>
LossOutput<Real> loss_lm(Tape<Real>& tape, const TransformerModel<Real>& model,
                         const SplitHidden<Real>& split, std::span<const Index> targets);

}  // namespace tokentune

// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/tokentune.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

namespace tokentune {

const char* to_string(TaskMode mode) {
  return mode == TaskMode::kClassification ? "classification" : "lm";
}

const char* to_string(Mutation mutation) {
  switch (mutation) {
    case Mutation::kNone: return "none";
    case Mutation::kTrackUnselectedKeyValues: return "track-unselected-kv";
    case Mutation::kCacheUnselectedRows: return "cache-unselected-rows";
    case Mutation::kMaskFromStorageOrder: return "mask-from-storage-order";
  }
  return "unknown";
}

Mutation parse_mutation(const std::string& name) {
  for (Mutation m : {Mutation::kNone, Mutation::kTrackUnselectedKeyValues,
                     Mutation::kCacheUnselectedRows, Mutation::kMaskFromStorageOrder}) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError("inject-bug", "unknown mutation '" + name + "'");
}

Index SelectionSize::resolve(Index unpadded) const {
  if (count) {
    if (*count < 1) throw ConfigError("k", "must be >= 1 (the loss needs a selected token)");
    return *count;
  }
  if (ratio) {
    if (!(*ratio > 0.0 && *ratio <= 1.0)) throw ConfigError("selection_ratio", "must lie in (0, 1]");
    const auto k = static_cast<Index>(std::floor(*ratio * static_cast<double>(unpadded) + 0.5));
    return std::max<Index>(1, k);
  }
  throw ConfigError("k", "neither an absolute k nor a selection ratio was given");
}

TokenPartition TokenPartition::all(Index n, TaskMode mode) {
  TokenPartition p;
  p.selected.resize(static_cast<std::size_t>(n));
  std::iota(p.selected.begin(), p.selected.end(), Index{0});
  p.k = n;
  p.requested_k = n;
  p.mode = mode;
  return p;
}

TokenPartition select_positions(std::span<const std::uint8_t> pad_mask, Index k, TaskMode mode,
                                std::uint64_t seed, std::span<const std::uint8_t> eligible) {
  if (k < 1) throw ConfigError("k", "must be >= 1 (the loss needs a selected token)");
  if (!eligible.empty() && eligible.size() != pad_mask.size()) {
    throw ShapeError("select_positions: eligibility mask length differs from pad mask");
  }
  const auto n = static_cast<Index>(pad_mask.size());
  TokenPartition p;
  p.requested_k = k;
  p.seed = seed;
  p.mode = mode;

  std::vector<Index> candidates;
  std::vector<Index> ineligible;
  for (Index i = 0; i < n; ++i) {
    if (!pad_mask[static_cast<std::size_t>(i)]) {
      p.padded.push_back(i);
    } else if (!eligible.empty() && !eligible[static_cast<std::size_t>(i)]) {
      ineligible.push_back(i);
    } else {
      candidates.push_back(i);
    }
  }
  if (candidates.empty()) throw RangeError("select_positions: no selectable (unpadded) position");

  std::mt19937_64 rng(seed);
  std::size_t forced = 0;
  if (mode == TaskMode::kClassification) {
    if (candidates.front() != 0) {
      throw RangeError("select_positions: classification needs an unpadded first (CLS) position");
    }
    forced = 1;
  }
  const auto available = static_cast<Index>(candidates.size());
  if (k > available) {
    p.clamped = true;
    k = available;
  }
  p.k = k;
  // Partial Fisher-Yates over the non-forced candidates.
  const auto take = static_cast<std::size_t>(k);
  for (std::size_t i = forced; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
    std::swap(candidates[i], candidates[pick(rng)]);
  }
  p.selected.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take));
  p.unselected.assign(candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end());
  p.unselected.insert(p.unselected.end(), ineligible.begin(), ineligible.end());
  std::sort(p.selected.begin(), p.selected.end());
  std::sort(p.unselected.begin(), p.unselected.end());
  return p;
}

namespace {

template <class T>
std::vector<T> gather(std::span<const T> values, std::span<const Index> rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(values[static_cast<std::size_t>(r)]);
  return out;
}

template <class T>
std::vector<T> joined(const std::vector<T>& first, const std::vector<T>& second) {
  std::vector<T> out = first;
  out.insert(out.end(), second.begin(), second.end());
  return out;
}

template <RealScalar Real>
Var<Real> cat_rows(Tape<Real>& tape, const Var<Real>& first, const Var<Real>& second) {
  const std::array<Var<Real>, 2> parts{first, second};
  return tape.concat_rows(std::span<const Var<Real>>(parts));
}

/// Query/key positions used for the masks. Keys are laid out as
/// [rest, selected], mirroring the concatenation of key/value rows.
struct MaskLayout {
  std::vector<Index> selected_queries;
  std::vector<Index> rest_queries;
  std::vector<Index> keys;
};

template <RealScalar Real>
MaskLayout mask_layout(const SplitHidden<Real>& split, Mutation mutation) {
  MaskLayout layout;
  if (mutation == Mutation::kMaskFromStorageOrder) {
    // Defect: indices into the concatenated storage instead of positions.
    const auto rest = static_cast<Index>(split.rows_rest.size());
    const auto sel = static_cast<Index>(split.rows_selected.size());
    for (Index i = 0; i < rest; ++i) layout.rest_queries.push_back(i);
    for (Index i = 0; i < sel; ++i) layout.selected_queries.push_back(rest + i);
    layout.keys = joined(layout.rest_queries, layout.selected_queries);
    return layout;
  }
  layout.selected_queries = split.positions_selected;
  layout.rest_queries = split.positions_rest;
  layout.keys = joined(split.positions_rest, split.positions_selected);
  return layout;
}

}  // namespace

template <RealScalar Real>
SplitHidden<Real> split_reorder(Tape<Real>& tape, const Var<Real>& h, const TokenSequence& seq,
                                const TokenPartition& partition) {
  seq.validate();
  if (partition.selected.empty()) {
    throw RangeError("split_reorder: k = 0, the selected group must be non-empty");
  }
  if (partition.size() != h.rows() || static_cast<Index>(seq.size()) != h.rows()) {
    throw ShapeError("split_reorder: partition covers " + std::to_string(partition.size()) +
                     " rows, sequence has " + std::to_string(seq.size()) + ", hidden is " +
                     shape_string(h.value()));
  }
  SplitHidden<Real> split;
  split.rows_selected = partition.selected;
  split.rows_rest = joined(partition.unselected, partition.padded);
  split.positions_selected = gather<Index>(seq.positions, split.rows_selected);
  split.positions_rest = gather<Index>(seq.positions, split.rows_rest);
  split.pad_selected = gather<std::uint8_t>(seq.pad_mask, split.rows_selected);
  split.pad_rest = gather<std::uint8_t>(seq.pad_mask, split.rows_rest);
  split.selected = tape.select_rows(h, split.rows_selected);
  {
    NoGradGuard<Real> no_grad(tape);
    split.rest = tape.select_rows(h, split.rows_rest);
  }
  return split;
}

template <RealScalar Real>
Var<Real> restore_order(Tape<Real>& tape, const SplitHidden<Real>& split) {
  const Index n = split.n();
  std::vector<Index> inverse(static_cast<std::size_t>(n), -1);
  Index slot = 0;
  for (Index r : split.rows_selected) inverse.at(static_cast<std::size_t>(r)) = slot++;
  for (Index r : split.rows_rest) inverse.at(static_cast<std::size_t>(r)) = slot++;
  if (std::find(inverse.begin(), inverse.end(), Index{-1}) != inverse.end()) {
    throw ShapeError("restore_order: split rows do not cover 0.." + std::to_string(n - 1));
  }
  return tape.select_rows(cat_rows(tape, split.selected, split.rest), inverse);
}

template <RealScalar Real>
SplitHidden<Real> tokentune_attention(Tape<Real>& tape, const TransformerModel<Real>& model,
                                      Index layer, const SplitHidden<Real>& split,
                                      const TokenTuneOptions& options) {
  auto name = [layer](std::string_view suffix) { return param_names::layer(layer, suffix); };
  const ModelConfig& c = model.config();
  const Mutation mutation = options.mutation;
  const MaskLayout layout = mask_layout(split, mutation);
  const std::vector<std::uint8_t> key_pad = joined(split.pad_rest, split.pad_selected);

  // Tracked projections of the selected rows.
  Var<Real> x_sel = norm(tape, model, layer, 1, split.selected);
  Var<Real> q_sel = dense(tape, model, x_sel, name("W_Q"), name("b_Q"));
  Var<Real> k_sel = dense(tape, model, x_sel, name("W_K"), name("b_K"));
  Var<Real> v_sel = dense(tape, model, x_sel, name("W_V"), name("b_V"));

  // Untracked projections of the remainder; they enter the selected rows'
  // attention as constants.
  Var<Real> q_rest, k_rest, v_rest, x_rest;
  {
    NoGradGuard<Real> no_grad(tape);
    std::optional<EnableGradGuard<Real>> cache_bug;
    if (mutation == Mutation::kCacheUnselectedRows) cache_bug.emplace(tape);
    x_rest = norm(tape, model, layer, 1, split.rest);
    q_rest = dense(tape, model, x_rest, name("W_Q"), name("b_Q"));
    std::optional<EnableGradGuard<Real>> track_bug;
    if (mutation == Mutation::kTrackUnselectedKeyValues) track_bug.emplace(tape);
    k_rest = dense(tape, model, x_rest, name("W_K"), name("b_K"));
    v_rest = dense(tape, model, x_rest, name("W_V"), name("b_V"));
  }
  if (mutation == Mutation::kCacheUnselectedRows) {
    k_rest = tape.detach(k_rest);
    v_rest = tape.detach(v_rest);
  }

  Var<Real> keys = cat_rows(tape, k_rest, k_sel);
  Var<Real> values = cat_rows(tape, v_rest, v_sel);

  SplitHidden<Real> out = split;
  auto mask_sel = attention_mask(layout.selected_queries, layout.keys, key_pad, c.causal);
  Var<Real> attended = multi_head_attend(tape, c.n_heads, q_sel, keys, values, mask_sel);
  out.selected = tape.add(split.selected, dense(tape, model, attended, name("W_O"), name("b_O")));

  {
    NoGradGuard<Real> no_grad(tape);
    std::optional<EnableGradGuard<Real>> cache_bug;
    if (mutation == Mutation::kCacheUnselectedRows) cache_bug.emplace(tape);
    auto mask_rest = attention_mask(layout.rest_queries, layout.keys, key_pad, c.causal);
    Var<Real> attended_rest = multi_head_attend(tape, c.n_heads, q_rest, keys, values, mask_rest);
    out.rest = tape.add(split.rest, dense(tape, model, attended_rest, name("W_O"), name("b_O")));
  }
  if (mutation == Mutation::kCacheUnselectedRows) out.rest = tape.detach(out.rest);
  return out;
}

template <RealScalar Real>
SplitHidden<Real> tokentune_ffn(Tape<Real>& tape, const TransformerModel<Real>& model, Index layer,
                                const SplitHidden<Real>& split, const TokenTuneOptions& options) {
  SplitHidden<Real> out = split;
  out.selected =
      tape.add(split.selected, feed_forward(tape, model, layer, norm(tape, model, layer, 2, split.selected)));
  {
    NoGradGuard<Real> no_grad(tape);
    std::optional<EnableGradGuard<Real>> cache_bug;
    if (options.mutation == Mutation::kCacheUnselectedRows) cache_bug.emplace(tape);
    out.rest = tape.add(split.rest, feed_forward(tape, model, layer, norm(tape, model, layer, 2, split.rest)));
  }
  if (options.mutation == Mutation::kCacheUnselectedRows) out.rest = tape.detach(out.rest);
  return out;
}

template <RealScalar Real>
SplitHidden<Real> tokentune_forward(Tape<Real>& tape, const TransformerModel<Real>& model,
                                    const TokenSequence& seq, const TokenPartition& partition,
                                    const TokenTuneOptions& options) {
  SplitHidden<Real> split = split_reorder(tape, embed(tape, model, seq), seq, partition);
  for (Index l = 0; l < model.config().n_layers; ++l) {
    LayerTagScope<Real> tag(tape, static_cast<int>(l));
    split = tokentune_attention(tape, model, l, split, options);
    split = tokentune_ffn(tape, model, l, split, options);
  }
  return split;
}

template <RealScalar Real>
LossOutput<Real> loss_classification(Tape<Real>& tape, const TransformerModel<Real>& model,
                                     const SplitHidden<Real>& split, Index label) {
  const Index classes = model.config().n_classes;
  if (label < 0 || label >= classes) {
    throw RangeError("loss_classification: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(classes) + ")");
  }
  ClassOutput<Real> out = classify_pool_train(tape, model, split.selected);
  const std::array<Index, 1> target{label};
  LossOutput<Real> loss;
  loss.loss = tape.cross_entropy(out.logits, target);
  loss.value = static_cast<double>(loss.loss.value()(0, 0));
  loss.count = 1;
  return loss;
}

template <RealScalar Real>
LossOutput<Real> loss_lm(Tape<Real>& tape, const TransformerModel<Real>& model,
                         const SplitHidden<Real>& split, std::span<const Index> targets) {
  if (static_cast<Index>(targets.size()) != split.n()) {
    throw ShapeError("loss_lm: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(split.n()) + " rows");
  }
  std::vector<Index> selected_targets;
  selected_targets.reserve(split.rows_selected.size());
  for (Index r : split.rows_selected) {
    const Index t = targets[static_cast<std::size_t>(r)];
    if (t < 0) {
      throw RangeError("loss_lm: selected row " + std::to_string(r) + " has no next token");
    }
    selected_targets.push_back(t);
  }
  if (selected_targets.empty()) throw RangeError("loss_lm: empty selection");
  LossOutput<Real> loss;
  loss.loss = tape.cross_entropy(lm_logits(tape, model, split.selected), selected_targets);
  loss.value = static_cast<double>(loss.loss.value()(0, 0));
  loss.count = static_cast<Index>(selected_targets.size());
  return loss;
}

#define TOKENTUNE_INSTANTIATE(Real)                                                                \
  template SplitHidden<Real> split_reorder(Tape<Real>&, const Var<Real>&, const TokenSequence&,    \
                                           const TokenPartition&);                                 \
  template Var<Real> restore_order(Tape<Real>&, const SplitHidden<Real>&);                         \
  template SplitHidden<Real> tokentune_attention(Tape<Real>&, const TransformerModel<Real>&, Index, \
                                                 const SplitHidden<Real>&, const TokenTuneOptions&); \
  template SplitHidden<Real> tokentune_ffn(Tape<Real>&, const TransformerModel<Real>&, Index,      \
                                           const SplitHidden<Real>&, const TokenTuneOptions&);     \
  template SplitHidden<Real> tokentune_forward(Tape<Real>&, const TransformerModel<Real>&,         \
                                               const TokenSequence&, const TokenPartition&,        \
                                               const TokenTuneOptions&);                           \
  template LossOutput<Real> loss_classification(Tape<Real>&, const TransformerModel<Real>&,        \
                                                const SplitHidden<Real>&, Index);                  \
  template LossOutput<Real> loss_lm(Tape<Real>&, const TransformerModel<Real>&,                    \
                                    const SplitHidden<Real>&, std::span<const Index>);

TOKENTUNE_INSTANTIATE(float)
TOKENTUNE_INSTANTIATE(double)
#undef TOKENTUNE_INSTANTIATE

}  // namespace tokentune

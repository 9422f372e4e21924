// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "helpers.hpp"
#include "tokentune/tokentune.hpp"
#include "tokentune/train.hpp"

namespace tokentune {
namespace {

using testing::cls_example;
using testing::random_matrix;
using testing::tiny_config;
using M = Matrix<double>;

std::vector<std::uint8_t> ones(Index n) { return std::vector<std::uint8_t>(static_cast<std::size_t>(n), 1); }

TEST(Selection, KEqualsNSelectsEverything) {
  const auto p = select_positions(ones(5), 5, TaskMode::kClassification, 1);
  EXPECT_EQ(p.selected, (std::vector<Index>{0, 1, 2, 3, 4}));
  EXPECT_TRUE(p.unselected.empty());
  EXPECT_FALSE(p.clamped);
}

TEST(Selection, ClassificationAlwaysKeepsTheClsPosition) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto p = select_positions(ones(10), 3, TaskMode::kClassification, seed);
    ASSERT_EQ(p.selected.size(), 3u);
    ASSERT_EQ(p.selected.front(), 0);
  }
}

TEST(Selection, PartitionCoversUnpaddedPositionsDisjointly) {
  std::vector<std::uint8_t> pad = ones(9);
  pad[7] = pad[8] = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto p = select_positions(pad, 3, TaskMode::kLanguageModel, seed);
    std::set<Index> sel(p.selected.begin(), p.selected.end());
    std::set<Index> rest(p.unselected.begin(), p.unselected.end());
    EXPECT_EQ(sel.size(), 3u);
    for (Index i : sel) EXPECT_FALSE(rest.contains(i));
    std::set<Index> all = sel;
    all.insert(rest.begin(), rest.end());
    EXPECT_EQ(all, (std::set<Index>{0, 1, 2, 3, 4, 5, 6}));
    EXPECT_EQ(p.padded, (std::vector<Index>{7, 8}));
  }
}

TEST(Selection, LanguageModelFrequenciesAreUniform) {
  constexpr int kDraws = 100000;
  std::vector<double> counts(10, 0.0);
  for (int s = 0; s < kDraws; ++s) {
    for (Index i : select_positions(ones(10), 3, TaskMode::kLanguageModel, mix_seed(99, s)).selected) {
      counts[static_cast<std::size_t>(i)] += 1.0;
    }
  }
  // Per position: selected with probability 0.3. The chi-square statistic
  // for "selected" counts has 9 degrees of freedom; p > 0.001 => < 27.88.
  const double expected = 0.3 * kDraws;
  double chi2 = 0.0;
  for (double c : counts) {
    EXPECT_NEAR(c / kDraws, 0.3, 0.01);
    chi2 += (c - expected) * (c - expected) / expected;
  }
  EXPECT_LT(chi2, 27.88);
}

TEST(Selection, ClampsAndRejects) {
  std::vector<std::uint8_t> pad = ones(6);
  pad[4] = pad[5] = 0;
  const auto p = select_positions(pad, 9, TaskMode::kLanguageModel, 3);
  EXPECT_TRUE(p.clamped);
  EXPECT_EQ(p.k, 4);
  EXPECT_EQ(p.requested_k, 9);
  EXPECT_THROW(select_positions(ones(4), 0, TaskMode::kLanguageModel, 3), ConfigError);
  EXPECT_THROW(select_positions(std::vector<std::uint8_t>(4, 0), 1, TaskMode::kLanguageModel, 3),
               RangeError);
}

TEST(Selection, RatioRoundsHalfUpWithFloorOne) {
  EXPECT_EQ(SelectionSize::fraction(0.25).resolve(10), 3);  // 2.5 -> 3
  EXPECT_EQ(SelectionSize::fraction(0.25).resolve(128), 32);
  EXPECT_EQ(SelectionSize::fraction(0.01).resolve(10), 1);
  EXPECT_EQ(SelectionSize::absolute(16).resolve(128), 16);
}

TEST(Split, RoundTripIsBitwiseAndIdentityPartitionLeavesRestEmpty) {
  const TokenSequence seq = TokenSequence::from_ids({0, 2, 3, 4, 5, 6});
  const M h = random_matrix(6, 4, 1);
  for (Index k : {1, 3, 6}) {
    Tape<double> tape;
    const auto part = select_positions(seq.pad_mask, k, TaskMode::kClassification, 7);
    const auto split = split_reorder(tape, tape.constant(h), seq, part);
    EXPECT_EQ(split.selected.rows(), k);
    EXPECT_EQ(restore_order(tape, split).value(), h);
    if (k == 6) EXPECT_EQ(split.rest.rows(), 0);
  }
  Tape<double> tape;
  const auto part = select_positions(seq.pad_mask, 2, TaskMode::kClassification, 7);
  EXPECT_THROW(split_reorder(tape, tape.constant(random_matrix(5, 4, 2)), seq, part), ShapeError);
}

struct ForwardCase {
  TransformerModel<double> model;
  Example ex;
  TaskMode task;
};

ForwardCase make_case(bool causal, Index layers, std::uint64_t seed) {
  ForwardCase c{TransformerModel<double>::initialize(tiny_config(causal, layers), seed), {},
                causal ? TaskMode::kLanguageModel : TaskMode::kClassification};
  c.ex = causal ? testing::lm_example("the cat sat.")
                : cls_example({0, 3, 5, 7, 2, 9, 4, 11, 6, 8}, 1, 2);
  return c;
}

TEST(TokenTuneForward, RestoredValuesEqualPlainForwardForEveryK) {
  for (bool causal : {false, true}) {
    auto c = make_case(causal, 2, 3);
    Tape<double> plain;
    const M reference = forward(plain, c.model, c.ex.seq).value();
    const auto eligible = eligible_rows(c.ex, c.task);
    const Index candidates = std::count(eligible.begin(), eligible.end(), 1);
    for (Index k = 1; k <= candidates; ++k) {
      Tape<double> tape;
      const auto part = select_positions(c.ex.seq.pad_mask, k, c.task, 10 + k, eligible);
      const auto split = tokentune_forward(tape, c.model, c.ex.seq, part);
      EXPECT_LT(max_abs_difference(restore_order(tape, split).value(), reference), 1e-12)
          << "causal " << causal << " k " << k;
    }
  }
}

TEST(TokenTuneForward, ZeroLayerModelReturnsSplitEmbeddings) {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 0;
  const auto model = TransformerModel<double>::initialize(cfg, 4);
  const auto ex = cls_example({0, 3, 5, 7}, 0);
  Tape<double> tape;
  const auto part = select_positions(ex.seq.pad_mask, 2, TaskMode::kClassification, 5);
  const auto split = tokentune_forward(tape, model, ex.seq, part);
  EXPECT_EQ(restore_order(tape, split).value(), embed(tape, model, ex.seq).value());
}

TEST(TokenTuneForward, FullSelectionGradientsEqualFullFineTuning) {
  for (bool causal : {false, true}) {
    auto c = make_case(causal, 2, 5);
    TrainConfig full{.regime = Regime::kFull, .task = c.task};
    TrainConfig all = full;
    all.regime = Regime::kTokenTune;
    all.selection = SelectionSize::fraction(1.0);
    auto ledger = std::make_shared<MemoryLedger>();
    auto a = run_example(c.model, c.ex, partition_for(c.ex, full, 0), full.regime, c.task,
                         Mutation::kNone, ledger);
    auto b = run_example(c.model, c.ex, partition_for(c.ex, all, 0), all.regime, c.task,
                         Mutation::kNone, ledger);
    EXPECT_NEAR(a->loss.value, b->loss.value, 1e-12);
    const auto ga = a->tape.backward(a->loss.loss);
    const auto gb = b->tape.backward(b->loss.loss);
    ASSERT_EQ(ga.names(), gb.names());
    for (const auto& [name, g] : ga) {
      EXPECT_LT(max_abs_difference(g, gb.at(name)), 1e-12) << name;
    }
  }
}

std::size_t ops_cached(const Tape<double>& tape, std::initializer_list<OpKind> ops) {
  std::size_t total = 0;
  for (OpKind op : ops) total += tape.cached_elements_for_op(op);
  return total;
}

struct CacheCounts {
  std::size_t total, norm_and_nonlinearity, attention;
};

CacheCounts cache_counts(const TransformerModel<double>& model, Index n, Index k) {
  std::vector<Index> ids{0};
  for (Index i = 1; i < n; ++i) ids.push_back(2 + (i * 5) % 13);
  const auto ex = cls_example(ids, 0);
  Tape<double> tape;
  const auto part = select_positions(ex.seq.pad_mask, k, TaskMode::kClassification, 3);
  const auto split = tokentune_forward(tape, model, ex.seq, part);
  loss_classification(tape, model, split, 0);
  return {tape.cached_activation_elements(),
          ops_cached(tape, {OpKind::kLayerNorm, OpKind::kNonlinearity}),
          ops_cached(tape, {OpKind::kMatmul, OpKind::kSoftmaxRows})};
}

TEST(CacheScaling, SelectiveLayerCachesLessThanFullSelection) {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 4;
  cfg.n_heads = 1;
  const auto model = TransformerModel<double>::initialize(cfg, 6);
  EXPECT_LT(cache_counts(model, 8, 2).total, cache_counts(model, 8, 8).total);
}

TEST(CacheScaling, AffineInKAndNormCachesIndependentOfUnselectedCount) {
  const auto model = TransformerModel<double>::initialize(tiny_config(false, 2), 7);
  // Fixed n: equal increments in k.
  std::vector<std::size_t> totals;
  for (Index k = 1; k <= 5; ++k) totals.push_back(cache_counts(model, 10, k).total);
  for (std::size_t i = 2; i < totals.size(); ++i) {
    EXPECT_EQ(totals[i] - totals[i - 1], totals[1] - totals[0]);
    EXPECT_GT(totals[i], totals[i - 1]);
  }
  // Fixed k: norm and nonlinearity caches do not see the unselected rows;
  // the attention cache grows linearly in n (k x n scores), not n^2.
  const auto a = cache_counts(model, 6, 3), b = cache_counts(model, 9, 3),
             c = cache_counts(model, 12, 3);
  EXPECT_EQ(a.norm_and_nonlinearity, b.norm_and_nonlinearity);
  EXPECT_EQ(b.norm_and_nonlinearity, c.norm_and_nonlinearity);
  EXPECT_EQ(c.attention - b.attention, b.attention - a.attention);
  EXPECT_GT(b.attention, a.attention);
}

TEST(Losses, ZeroLogitClassificationLossIsLogTwo) {
  ModelConfig cfg = tiny_config();
  cfg.n_classes = 2;
  auto model = TransformerModel<double>::initialize(cfg, 8);
  model.param(param_names::kClsW2).value.setZero();
  const auto ex = cls_example({0, 3, 5, 7}, 1);
  Tape<double> tape;
  const auto part = select_positions(ex.seq.pad_mask, 2, TaskMode::kClassification, 1);
  const auto split = tokentune_forward(tape, model, ex.seq, part);
  EXPECT_NEAR(loss_classification(tape, model, split, 1).value, std::log(2.0), 1e-15);
  EXPECT_THROW(loss_classification(tape, model, split, 2), Error);
}

TEST(Losses, FullSelectionClassificationLossEqualsPooledEvalLoss) {
  const auto model = TransformerModel<double>::initialize(tiny_config(false, 2), 9);
  const auto ex = cls_example({0, 3, 5, 7, 9, 4}, 2);
  Tape<double> tape;
  const auto part = select_positions(ex.seq.pad_mask, 6, TaskMode::kClassification, 1);
  const double loss = loss_classification(tape, model, tokentune_forward(tape, model, ex.seq, part), 2).value;
  const auto pooled = classify_pool_eval(tape, model, forward(tape, model, ex.seq), ex.seq.pad_mask);
  EXPECT_NEAR(loss, -pooled.log_probs(0, 2), 1e-13);
}

TEST(Losses, LargerCorrectMarginLowersTheLoss) {
  ModelConfig cfg = tiny_config();
  cfg.n_classes = 2;
  auto model = TransformerModel<double>::initialize(cfg, 10);
  const auto ex = cls_example({0, 3, 5}, 0);
  double previous = INFINITY;
  for (double margin : {0.0, 1.0, 4.0, 16.0, 64.0}) {
    model.param(param_names::kClsB2).value << margin, 0.0;
    Tape<double> tape;
    const auto part = select_positions(ex.seq.pad_mask, 2, TaskMode::kClassification, 1);
    const double loss =
        loss_classification(tape, model, tokentune_forward(tape, model, ex.seq, part), 0).value;
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-20);
}

TEST(Losses, UniformLanguageModelLossIsKLogV) {
  auto model = TransformerModel<double>::initialize(tiny_config(true), 11);
  model.param(param_names::kLmHead).value.setZero();
  const auto ex = testing::lm_example("hello world");
  const auto eligible = eligible_rows(ex, TaskMode::kLanguageModel);
  Tape<double> tape;
  const auto part = select_positions(ex.seq.pad_mask, 4, TaskMode::kLanguageModel, 2, eligible);
  const auto loss = loss_lm(tape, model, tokentune_forward(tape, model, ex.seq, part), ex.targets);
  EXPECT_EQ(loss.count, 4);
  EXPECT_NEAR(loss.value, 4.0 * std::log(257.0), 1e-12);
}

TEST(Losses, AllPredictablePositionsGiveTheStandardCausalLoss) {
  const auto model = TransformerModel<double>::initialize(tiny_config(true, 2), 12);
  const auto ex = testing::lm_example("abcabcab");
  const auto eligible = eligible_rows(ex, TaskMode::kLanguageModel);
  const Index n = static_cast<Index>(ex.seq.size());
  Tape<double> tape;
  const auto part = select_positions(ex.seq.pad_mask, n - 1, TaskMode::kLanguageModel, 2, eligible);
  const double loss = loss_lm(tape, model, tokentune_forward(tape, model, ex.seq, part), ex.targets).value;

  std::vector<Index> rows, targets;
  for (Index i = 0; i + 1 < n; ++i) {
    rows.push_back(i);
    targets.push_back(ex.targets[static_cast<std::size_t>(i)]);
  }
  const auto logits = lm_logits(tape, model, tape.select_rows(forward(tape, model, ex.seq), rows));
  EXPECT_NEAR(loss, tape.cross_entropy(logits, targets).value()(0, 0), 1e-12);
}

TEST(Losses, HeadGradientSumsOnlySelectedRows) {
  const auto model = TransformerModel<double>::initialize(tiny_config(true, 1), 13);
  const auto ex = testing::lm_example("gradient");
  const auto eligible = eligible_rows(ex, TaskMode::kLanguageModel);
  Tape<double> tape;
  const auto part = select_positions(ex.seq.pad_mask, 3, TaskMode::kLanguageModel, 4, eligible);
  const auto loss = loss_lm(tape, model, tokentune_forward(tape, model, ex.seq, part), ex.targets);
  const M grad = tape.backward(loss.loss).at(param_names::kLmHead);

  Tape<double> plain;
  const M h = forward(plain, model, ex.seq).value();
  const M& w = model.param(param_names::kLmHead).value;
  M expected = M::Zero(w.rows(), w.cols());
  for (Index r : part.selected) {
    const M logits = h.row(r) * w;
    M p = (logits.array() - logits.maxCoeff()).exp();
    p /= p.sum();
    p(0, ex.targets[static_cast<std::size_t>(r)]) -= 1.0;
    expected += h.row(r).transpose() * p;
  }
  EXPECT_LT(max_abs_difference(grad, expected), 1e-12);
}

TEST(Losses, LanguageModelRejectsEmptySelection) {
  const auto model = TransformerModel<double>::initialize(tiny_config(true), 14);
  auto ex = testing::lm_example("ab");
  std::fill(ex.targets.begin(), ex.targets.end(), -1);
  Tape<double> tape;
  const auto part = select_positions(ex.seq.pad_mask, 1, TaskMode::kLanguageModel, 1);
  EXPECT_THROW(loss_lm(tape, model, tokentune_forward(tape, model, ex.seq, part), ex.targets),
               RangeError);
}

}  // namespace
}  // namespace tokentune

// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
// the process exits non-zero if any requested criterion fails.
//
//   acceptance --criterion N [--tokentune PATH] [--configs DIR]

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tokentune/adapters.hpp"
#include "tokentune/commands.hpp"
#include "tokentune/memprofile.hpp"
#include "tokentune/train.hpp"
#include "tokentune/verify.hpp"

namespace fs = std::filesystem;
using namespace tokentune;

namespace {

// Tolerances and thresholds.
constexpr double kStopGradTol = 1e-10;
constexpr Index kMinGridPoints = 50;
constexpr double kFdTol = 1e-6;
constexpr double kFdStep = 1e-5;
constexpr double kIdentityTol = 1e-10;
// Adam turns round-off-level gradients (b_K's is structurally zero) into
// updates of this order; below it updates are compared absolutely.
constexpr double kUpdateRoundoff = 1e-12;
constexpr double kValueTol = 1e-12;
constexpr double kActivationRatioMax = 0.5;
constexpr double kFullAccuracyMin = 0.95;
constexpr double kK16GapMax = 0.03;
constexpr double kMonotoneSlack = 0.01;
constexpr double kUniformPerplexity = 257.0;
constexpr double kUniformSlack = 1.0;
constexpr double kPerplexityReduction = 0.5;
constexpr Index kLmSteps = 2000;
constexpr Index kTrajectorySteps = 200;
constexpr double kTrajectoryTol = 1e-10;

struct Context {
  fs::path tokentune;
  fs::path configs;
  fs::path scratch;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

struct Proc {
  int status = -1;
  std::string output;
};

Proc run_process(const std::string& command) {
  Proc p;
  FILE* pipe = popen((command + " 2>&1").c_str(), "r");
  if (!pipe) return p;
  char buf[4096];
  while (std::size_t got = std::fread(buf, 1, sizeof buf, pipe)) p.output.append(buf, got);
  const int raw = pclose(pipe);
  p.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return p;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 1 ----------------------------------------------------------------------------

Outcome stopgrad_equivalence(const Context&) {
  EquivalenceOptions options;
  options.points = 60;
  options.seed = 20240611;
  options.gradient_tolerance = kStopGradTol;
  const EquivalenceReport report = equivalence_suite(options);

  bool causal = false, bidirectional = false, lora = false, plain = false;
  Index max_n = 0, max_layers = 0;
  for (const auto& p : report.grid) {
    (p.causal ? causal : bidirectional) = true;
    (p.lora ? lora : plain) = true;
    max_n = std::max(max_n, p.n);
    max_layers = std::max(max_layers, p.layers);
  }
  const double worst = report.worst("stopgrad-equivalence");
  Index checked = 0;
  bool all_pass = true;
  for (const auto& r : report.records) {
    if (r.property != "stopgrad-equivalence") continue;
    ++checked;
    all_pass = all_pass && r.pass;
  }
  const bool coverage = causal && bidirectional && lora && plain && max_n <= 16 && max_layers <= 3;
  return {all_pass && worst < kStopGradTol && checked >= kMinGridPoints && coverage,
          std::to_string(checked) + " configurations, worst rel err " + fmt(worst) +
              (coverage ? "" : " (grid coverage incomplete)")};
}

// 2 ----------------------------------------------------------------------------

Outcome finite_differences(const Context&) {
  RunConfig config;
  config.seed = 1;
  config.dtype = DType::kFloat64;
  config.regime = "tokentune";
  config.model = ModelConfig{.vocab_size = 16, .max_positions = 8, .d_model = 8, .n_heads = 2,
                             .d_ff = 32, .n_layers = 1, .causal = false, .n_classes = 2,
                             .init_std = 0.3};
  config.task.seq_len = 8;
  config.gradcheck.n = 6;
  config.gradcheck.k = 2;
  config.gradcheck.layers = 1;
  config.gradcheck.tolerance = kFdTol;
  config.gradcheck.step = kFdStep;
  const GradCheckReport report = finite_difference_check(config);

  const auto model = TransformerModel<double>::initialize(config.model, config.seed);
  std::size_t trainable = 0;
  for (const auto& p : model.params()) trainable += p.frozen ? 0 : 1;
  std::size_t checked = 0;
  for (const auto& p : report.params) checked += p.frozen ? 0 : 1;
  return {report.pass && checked == trainable && report.max_rel_err() < kFdTol,
          std::to_string(checked) + "/" + std::to_string(trainable) +
              " trainable parameters, worst rel err " + fmt(report.max_rel_err())};
}

// 3 ----------------------------------------------------------------------------

Dataset small_lm_data(Index count, Index seq_len) {
  const std::string text = generate_text_corpus(static_cast<std::size_t>(count * seq_len), 3);
  return lm_windows(text, seq_len, seq_len);
}

Dataset small_cls_data(Index count, Index seq_len) {
  ClassificationSpec spec;
  spec.n_examples = count;
  spec.seq_len = seq_len;
  spec.min_len = seq_len / 2;  // some padding
  spec.vocab_size = 16;
  spec.seed = 5;
  return gen_classification(spec);
}

double max_param_delta_error(const TransformerModel<double>& a, const TransformerModel<double>& b,
                             const TransformerModel<double>& before) {
  double worst = 0.0;
  for (const auto& p : before.params()) {
    const auto& pa = a.param(p.name).value;
    const auto& pb = b.param(p.name).value;
    for (Index i = 0; i < p.value.size(); ++i) {
      const double da = pa.data()[i] - p.value.data()[i];
      const double db = pb.data()[i] - p.value.data()[i];
      const double err = std::max(std::abs(da), std::abs(db)) < kUpdateRoundoff
                             ? std::abs(da - db)
                             : relative_error(da, db);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

Outcome full_selection_identity(const Context&) {
  double worst_grad = 0.0;
  double worst_update = 0.0;
  for (TaskMode task : {TaskMode::kClassification, TaskMode::kLanguageModel}) {
    const bool lm = task == TaskMode::kLanguageModel;
    const ModelConfig mc{.vocab_size = lm ? 257 : 16, .max_positions = 12, .d_model = 16,
                         .n_heads = 2, .d_ff = 32, .n_layers = 2, .causal = lm,
                         .n_classes = 2, .init_std = 0.1};
    const Dataset data = lm ? small_lm_data(8, 12) : small_cls_data(8, 12);
    const auto base = TransformerModel<double>::initialize(mc, 11);

    TrainConfig full{.regime = Regime::kFull, .task = task, .batch_size = 4};
    TrainConfig tt = full;
    tt.regime = Regime::kTokenTune;
    // k = n for classification, every predictable position for LM.
    tt.selection = SelectionSize::fraction(1.0);
    full.seed = tt.seed = 9;

    auto ledger = std::make_shared<MemoryLedger>();
    for (const auto& ex : data) {
      auto a = run_example(base, ex, partition_for(ex, full, 0), full.regime, task,
                           Mutation::kNone, ledger);
      auto b = run_example(base, ex, partition_for(ex, tt, 0), tt.regime, task, Mutation::kNone,
                           ledger);
      worst_grad = std::max(worst_grad, max_relative_error(a->tape.backward(a->loss.loss),
                                                           b->tape.backward(b->loss.loss)));
    }

    auto model_full = base;
    auto model_tt = base;
    prepare_model(model_full, full);
    prepare_model(model_tt, tt);
    Trainer<double> trainer_full(model_full, full);
    Trainer<double> trainer_tt(model_tt, tt);
    for (Index step = 0; step < 2; ++step) {
      const std::span<const Example> window(data.data() + step * 4, 4);
      trainer_full.train_step(window, 0);
      trainer_tt.train_step(window, 0);
    }
    worst_grad = std::max(worst_grad, max_relative_error(trainer_full.last_gradients(),
                                                         trainer_tt.last_gradients()));
    worst_update = std::max(worst_update, max_param_delta_error(model_full, model_tt, base));
  }
  return {worst_grad < kIdentityTol && worst_update < kIdentityTol,
          "classification and LM: worst gradient rel err " + fmt(worst_grad) +
              ", worst Adam update rel err " + fmt(worst_update)};
}

// 4 ----------------------------------------------------------------------------

Outcome value_preservation(const Context&) {
  double worst = 0.0;
  Index cases = 0;
  for (TaskMode task : {TaskMode::kClassification, TaskMode::kLanguageModel}) {
    const bool lm = task == TaskMode::kLanguageModel;
    for (double init : {0.02, 0.3}) {
      const ModelConfig mc{.vocab_size = lm ? 257 : 16, .max_positions = 16, .d_model = 16,
                           .n_heads = 4, .d_ff = 32, .n_layers = 3, .causal = lm,
                           .n_classes = 2, .init_std = init};
      const auto model = TransformerModel<double>::initialize(mc, 4);
      const Dataset data = lm ? small_lm_data(2, 16) : small_cls_data(2, 16);
      for (const auto& ex : data) {
        Tape<double> plain_tape;
        const Matrix<double> plain = forward(plain_tape, model, ex.seq).value();
        const auto eligible = eligible_rows(ex, task);
        Index candidates = 0;
        for (auto e : eligible) candidates += e;
        for (Index k = 1; k <= candidates; ++k) {
          const TokenPartition partition =
              select_positions(ex.seq.pad_mask, k, task, ex.serial + 17 * k, eligible);
          Tape<double> tape;
          const auto split = tokentune_forward(tape, model, ex.seq, partition);
          const Matrix<double> restored = restore_order(tape, split).value();
          worst = std::max(worst, (restored - plain).cwiseAbs().maxCoeff());
          ++cases;
        }
      }
    }
  }
  return {worst < kValueTol,
          std::to_string(cases) + " (sequence, k) cases, worst abs diff " + fmt(worst)};
}

// 5, 6 -------------------------------------------------------------------------

ModelConfig memory_model() {
  return ModelConfig{.vocab_size = 32, .max_positions = 512, .d_model = 64, .n_heads = 4,
                     .d_ff = 256, .n_layers = 4, .causal = false, .n_classes = 2};
}

Outcome activation_scaling(const Context&) {
  SweepGrid grid;
  grid.regimes = {Regime::kFull, Regime::kTokenTune};
  grid.lengths = {512};
  grid.batches = {8};
  for (Index k : {64, 128, 256, 384, 512}) grid.selections.push_back(SelectionSize::absolute(k));
  TrainConfig tc;
  const auto rows = sweep_report(memory_model(), grid, tc, DType::kFloat32, 0);

  std::size_t full = 0;
  std::vector<std::pair<Index, std::size_t>> sweep;
  for (const auto& r : rows) {
    if (r.regime == Regime::kFull) full = r.activations_bytes;
    if (r.regime == Regime::kTokenTune) sweep.emplace_back(r.k, r.activations_bytes);
  }
  std::sort(sweep.begin(), sweep.end());
  bool increasing = sweep.size() == 5;
  std::ostringstream detail;
  detail << "full " << full << " B; k:";
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    detail << ' ' << sweep[i].first << "=" << sweep[i].second;
    if (i > 0 && sweep[i].second <= sweep[i - 1].second) increasing = false;
  }
  const double ratio = full ? static_cast<double>(sweep.front().second) / full : 1.0;
  detail << "; k=64 / full = " << fmt(ratio, 3);
  return {full > 0 && ratio <= kActivationRatioMax && increasing, detail.str()};
}

Outcome composition_ordering(const Context&) {
  SweepGrid grid;
  grid.regimes = {Regime::kFull, Regime::kTokenTune, Regime::kLora, Regime::kTokenTuneLora};
  grid.lengths = {512};
  grid.batches = {8};
  grid.selections = {SelectionSize::fraction(0.25)};
  const auto rows = sweep_report(memory_model(), grid, TrainConfig{}, DType::kFloat32, 0);
  std::map<Regime, std::size_t> peak;
  for (const auto& r : rows) peak[r.regime] = r.peak_bytes;
  const auto f = peak[Regime::kFull], t = peak[Regime::kTokenTune], l = peak[Regime::kLora],
             tl = peak[Regime::kTokenTuneLora];
  return {rows.size() == 4 && tl < l && l < f && tl < t,
          "peak bytes full " + std::to_string(f) + ", tokentune " + std::to_string(t) +
              ", lora " + std::to_string(l) + ", tokentune+lora " + std::to_string(tl)};
}

// 7 ----------------------------------------------------------------------------

RunConfig classification_config(std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  c.dtype = DType::kFloat32;
  c.model = ModelConfig{.vocab_size = 32, .max_positions = 128, .d_model = 64, .n_heads = 4,
                        .d_ff = 256, .n_layers = 2, .causal = false, .n_classes = 2};
  c.task.kind = TaskMode::kClassification;
  c.task.n_train = 5000;
  c.task.n_test = 1000;
  c.task.seq_len = 128;
  c.batch_size = 8;
  c.epochs = 1;
  c.lr = 1e-3;
  return c;
}

double train_and_score(RunConfig config, const std::string& regime, std::optional<Index> k) {
  config.regime = regime;
  config.k = k;
  config.validate();
  const TrainConfig tc = config.train_config();
  const TaskData data = build_task_data(config);
  auto model = TransformerModel<float>::initialize(config.model, config.seed);
  prepare_model(model, tc);
  Trainer<float> trainer(model, tc);
  trainer.fit(data.train);
  return evaluate(model, std::span<const Example>(data.test), tc.task).accuracy;
}

Outcome training_quality(const Context&) {
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const std::vector<Index> ks{4, 8, 16, 32};
  double full = 0.0;
  std::map<Index, double> mean;
  std::ostringstream detail;
  detail << std::setprecision(4);
  for (auto seed : seeds) {
    const double acc = train_and_score(classification_config(seed), "full", std::nullopt);
    full += acc / static_cast<double>(seeds.size());
    detail << "full/s" << seed << "=" << acc << ' ';
    for (Index k : ks) {
      const double a = train_and_score(classification_config(seed), "tokentune", k);
      mean[k] += a / static_cast<double>(seeds.size());
      detail << "k" << k << "/s" << seed << "=" << a << ' ';
    }
  }
  bool monotone = true;
  for (std::size_t i = 1; i < ks.size(); ++i) {
    monotone = monotone && mean[ks[i]] >= mean[ks[i - 1]] - kMonotoneSlack;
  }
  detail << "| mean full " << full << ", k:";
  for (Index k : ks) detail << ' ' << k << "=" << mean[k];
  const bool pass =
      full >= kFullAccuracyMin && full - mean[16] <= kK16GapMax && monotone;
  return {pass, detail.str()};
}

// 8 ----------------------------------------------------------------------------

RunConfig lm_config() {
  RunConfig c;
  c.seed = 0;
  c.model = ModelConfig{.vocab_size = 257, .max_positions = 256, .d_model = 128, .n_heads = 4,
                        .d_ff = 512, .n_layers = 2, .causal = true, .n_classes = 2,
                        .init_std = 0.01};
  c.task.kind = TaskMode::kLanguageModel;
  c.task.corpus_bytes = 1 << 20;
  c.task.seq_len = 256;
  c.task.eval_windows = 64;
  c.batch_size = 8;
  c.accumulation_steps = 1;
  c.epochs = 1000;
  c.lr = 1e-3;
  return c;
}

struct LmTrace {
  std::vector<double> step_loss;
  std::vector<std::pair<std::int64_t, double>> perplexity;
};

template <RealScalar Real>
LmTrace lm_run(RunConfig config, Index steps, Index eval_every) {
  config.max_steps = steps;
  config.validate();
  const TrainConfig tc = config.train_config();
  const TaskData data = build_task_data(config);
  auto model = TransformerModel<Real>::initialize(config.model, config.seed);
  prepare_model(model, tc);
  LmTrace trace;
  auto score = [&](std::int64_t step) {
    trace.perplexity.emplace_back(
        step, evaluate(model, std::span<const Example>(data.test), tc.task).perplexity);
  };
  score(0);
  Trainer<Real> trainer(model, tc);
  trainer.fit(data.train, [&](const StepMetrics& m) {
    trace.step_loss.push_back(m.loss);
    if (m.step % eval_every == 0) score(m.step);
  });
  return trace;
}

Outcome lm_analogue(const Context&) {
  RunConfig tt = lm_config();
  tt.dtype = DType::kFloat32;
  tt.regime = "tokentune";
  tt.selection_ratio = 0.25;
  const LmTrace run = lm_run<float>(tt, kLmSteps, 250);
  const double untrained = run.perplexity.front().second;
  double best = untrained;
  for (const auto& [step, ppl] : run.perplexity) best = std::min(best, ppl);
  const bool uniform = std::abs(untrained - kUniformPerplexity) <= kUniformSlack;
  const bool reduced = best <= (1.0 - kPerplexityReduction) * untrained;

  RunConfig full = lm_config();
  full.dtype = DType::kFloat64;
  full.regime = "full";
  RunConfig all = full;
  all.regime = "tokentune";
  all.selection_ratio = 1.0;
  const LmTrace a = lm_run<double>(full, kTrajectorySteps, 25);
  const LmTrace b = lm_run<double>(all, kTrajectorySteps, 25);
  double worst = a.step_loss.size() == b.step_loss.size() ? 0.0 : 1.0;
  for (std::size_t i = 0; i < std::min(a.step_loss.size(), b.step_loss.size()); ++i) {
    worst = std::max(worst, relative_error(a.step_loss[i], b.step_loss[i]));
  }
  for (std::size_t i = 0; i < std::min(a.perplexity.size(), b.perplexity.size()); ++i) {
    worst = std::max(worst, relative_error(a.perplexity[i].second, b.perplexity[i].second));
  }

  std::ostringstream detail;
  detail << "untrained ppl " << fmt(untrained, 6) << ", best within " << kLmSteps << " steps "
         << fmt(best, 5) << " (";
  for (const auto& [step, ppl] : run.perplexity) detail << step << ":" << fmt(ppl, 4) << ' ';
  detail << "); full vs k=all float64 over " << kTrajectorySteps
         << " steps: worst rel err " << fmt(worst) << " at final ppl "
         << fmt(a.perplexity.back().second, 6);
  return {uniform && reduced && worst < kTrajectoryTol, detail.str()};
}

// 9 ----------------------------------------------------------------------------

Outcome mutation_sensitivity(const Context& ctx) {
  const std::string base = ctx.tokentune.string() + " gradcheck --config " +
                           (ctx.configs / "gradcheck_tiny.json").string() +
                           " --set gradcheck.gradient_tolerance=1e-10"
                           " --set gradcheck.value_tolerance=1e-12"
                           " --set gradcheck.tolerance=1e-6";
  std::ostringstream detail;
  bool pass = true;
  const Proc clean = run_process(base + " --out " + (ctx.scratch / "clean").string());
  detail << "clean exit " << clean.status << ";";
  pass = pass && clean.status == 0;
  for (const char* bug : {"track-unselected-kv", "cache-unselected-rows", "mask-from-storage-order"}) {
    const Proc p = run_process(base + " --inject-bug " + bug + " --out " +
                               (ctx.scratch / bug).string());
    const auto at = p.output.find("failed properties:");
    std::string named;
    if (at != std::string::npos) {
      named = p.output.substr(at + 18, p.output.find('\n', at) - at - 18);
    }
    detail << ' ' << bug << " exit " << p.status << " ->" << (named.empty() ? " (none)" : named)
           << ';';
    pass = pass && p.status == 1 && !named.empty();
  }
  return {pass, detail.str()};
}

// 10 ---------------------------------------------------------------------------

Outcome determinism(const Context& ctx) {
  std::string files[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path out = ctx.scratch / ("run" + std::to_string(i));
    const Proc p = run_process(ctx.tokentune.string() + " train --config " +
                               (ctx.configs / "cls_128.json").string() +
                               " --set regime=tokentune --set k=16 --set seed=0 --out " +
                               out.string());
    if (p.status != 0) return {false, "train exited " + std::to_string(p.status) + ": " + p.output};
    files[i] = slurp(out / "metrics.jsonl");
  }
  const bool same = !files[0].empty() && files[0] == files[1];
  const auto lines = std::count(files[0].begin(), files[0].end(), '\n');
  return {same, std::to_string(lines) + " metric records, " +
                    (same ? "byte-identical" : "files differ")};
}

}  // namespace

int main(int argc, char** argv) {
  Context ctx;
  std::vector<int> criteria;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--criterion" && i + 1 < argc) criteria.push_back(std::stoi(argv[++i]));
    else if (arg == "--tokentune" && i + 1 < argc) ctx.tokentune = argv[++i];
    else if (arg == "--configs" && i + 1 < argc) ctx.configs = argv[++i];
    else {
      std::cerr << "usage: acceptance --criterion N [--tokentune PATH] [--configs DIR]\n";
      return 2;
    }
  }
  if (criteria.empty()) criteria = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};

  const std::map<int, std::pair<const char*, std::function<Outcome(const Context&)>>> table{
      {1, {"stop-gradient equivalence", stopgrad_equivalence}},
      {2, {"finite-difference agreement", finite_differences}},
      {3, {"full-selection identity", full_selection_identity}},
      {4, {"value preservation", value_preservation}},
      {5, {"activation-cache scaling", activation_scaling}},
      {6, {"composition ordering", composition_ordering}},
      {7, {"classification training quality", training_quality}},
      {8, {"byte-level LM", lm_analogue}},
      {9, {"mutation sensitivity", mutation_sensitivity}},
      {10, {"determinism", determinism}},
  };

  bool all = true;
  for (int c : criteria) {
    const auto it = table.find(c);
    if (it == table.end()) {
      std::cerr << "unknown criterion " << c << '\n';
      return 2;
    }
    ctx.scratch = fs::temp_directory_path() /
                  ("tokentune-acceptance-" + std::to_string(::getpid()) + "-" + std::to_string(c));
    fs::create_directories(ctx.scratch);
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = it->second.second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c << " (" << it->second.first
              << ", " << fmt(secs, 3) << " s): " << o.detail << std::endl;
    fs::remove_all(ctx.scratch);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}

// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/commands.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tokentune/adapters.hpp"
#include "tokentune/checkpoint.hpp"
#include "tokentune/memprofile.hpp"
#include "tokentune/train.hpp"
#include "tokentune/verify.hpp"

namespace tokentune {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  return f;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json eval_json(const EvalMetrics& m, std::int64_t step) {
  json j{{"step", step}, {"task", to_string(m.task)}, {"examples", m.examples},
         {"tokens", m.tokens}, {"loss", m.loss}};
  if (m.task == TaskMode::kClassification) {
    j["accuracy"] = m.accuracy;
  } else {
    j["perplexity"] = m.perplexity;
  }
  return j;
}

std::string eval_line(const EvalMetrics& m) {
  std::ostringstream s;
  s << std::setprecision(6);
  if (m.task == TaskMode::kClassification) {
    s << "accuracy " << m.accuracy << " loss " << m.loss << " (" << m.examples << " examples)";
  } else {
    s << "perplexity " << m.perplexity << " loss " << m.loss << " (" << m.tokens << " tokens)";
  }
  return s.str();
}

void write_run_files(const RunConfig& config, const std::string& command) {
  const fs::path dir(config.out);
  fs::create_directories(dir);
  open_out(dir / "config.json") << to_json(config).dump(2) << '\n';
  open_out(dir / "run.json") << json{{"command", command},
                                      {"version", version_string()},
                                      {"seed", config.seed}}
                                    .dump(2)
                             << '\n';
}

template <RealScalar Real>
int train_impl(const RunConfig& config, std::ostream& out) {
  const TrainConfig tc = config.train_config();
  const TaskData data = build_task_data(config);
  const fs::path dir(config.out);

  TransformerModel<Real> model = config.checkpoint.empty()
                                     ? TransformerModel<Real>::initialize(config.model, config.seed)
                                     : load_checkpoint<Real>(config.checkpoint, config.model);
  prepare_model(model, tc);

  std::ofstream metrics = open_out(dir / "metrics.jsonl");
  std::ofstream timings = open_out(dir / "timings.jsonl");
  std::ofstream evals = open_out(dir / "eval.jsonl");
  auto record_eval = [&](std::int64_t step) {
    const EvalMetrics m = evaluate(model, std::span<const Example>(data.test), tc.task);
    evals << eval_json(m, step).dump() << '\n';
    evals.flush();
    return m;
  };
  if (config.eval_every > 0) record_eval(0);

  Trainer<Real> trainer(model, tc);
  trainer.fit(data.train, [&](const StepMetrics& m) {
    metrics << metrics_record(m) << '\n';
    timings << timing_record(m) << '\n';
    if (config.eval_every > 0 && m.step % config.eval_every == 0) record_eval(m.step);
  });
  metrics.flush();

  const EvalMetrics final_eval = (config.eval_every > 0 && trainer.steps() % config.eval_every == 0)
                                     ? evaluate(model, std::span<const Example>(data.test), tc.task)
                                     : record_eval(trainer.steps());
  open_out(dir / "eval.json") << eval_json(final_eval, trainer.steps()).dump(2) << '\n';

  save_checkpoint(dir / "model.ckpt", model);
  if (uses_adapters(tc.regime)) save_adapters(dir / "adapters.ckpt", model);

  const auto batch_size = std::min<std::size_t>(data.train.size(), tc.batch_size);
  const MemoryReport memory = profile_step(
      model, std::span<const Example>(data.train.data(), batch_size), tc);
  open_out(dir / "memory.json") << memory_report_json(memory) << '\n';

  out << "trained " << trainer.steps() << " steps (" << to_string(tc.regime) << ", "
      << dtype_name(config.dtype) << ")\n"
      << "eval: " << eval_line(final_eval) << '\n'
      << "peak bytes: " << memory.peak_bytes << '\n'
      << "artifacts: " << dir.string() << '\n';
  return 0;
}

template <RealScalar Real>
int eval_impl(const RunConfig& config, const fs::path& checkpoint, bool merge_adapters,
              std::ostream& out) {
  TransformerModel<Real> model = load_checkpoint<Real>(checkpoint, config.model);
  if (merge_adapters) merge(model);
  const TaskData data = build_task_data(config);
  const EvalMetrics m = evaluate(model, std::span<const Example>(data.test), config.task.kind);
  out << eval_json(m, -1).dump() << '\n' << eval_line(m) << '\n';
  return 0;
}

}  // namespace

Example gradcheck_example(const RunConfig& config, const ModelConfig& mc) {
  std::mt19937_64 rng(mix_seed(config.seed, 0x9c));
  const Index n = config.gradcheck.n;
  std::vector<Index> ids(static_cast<std::size_t>(n));
  Example ex;
  if (config.task.kind == TaskMode::kClassification) {
    std::uniform_int_distribution<Index> token(ClassificationSpec::kFirstMarker, mc.vocab_size - 1);
    for (auto& id : ids) id = token(rng);
    ids[0] = ClassificationSpec::kCls;
    ex.label = std::uniform_int_distribution<Index>(0, mc.n_classes - 1)(rng);
  } else {
    std::uniform_int_distribution<Index> token(0, mc.vocab_size - 1);
    for (auto& id : ids) id = token(rng);
    ex.targets.assign(ids.begin() + 1, ids.end());
    ex.targets.push_back(-1);
  }
  ex.seq = TokenSequence::from_ids(ids);
  ex.serial = config.seed;
  return ex;
}

GradCheckReport finite_difference_check(const RunConfig& config) {
  ModelConfig mc = config.model;
  mc.n_layers = config.gradcheck.layers;
  mc.max_positions = std::max(mc.max_positions, config.gradcheck.n);
  TrainConfig tc = config.train_config();
  tc.selection = SelectionSize::absolute(config.gradcheck.k);
  tc.lora.seed = mix_seed(config.seed, 0x10a);

  auto model = TransformerModel<double>::initialize(mc, config.seed);
  prepare_model(model, tc);
  const Example ex = gradcheck_example(config, mc);
  const TokenPartition partition = partition_for(ex, tc, 0);

  auto run = run_example(model, ex, partition, tc.regime, tc.task, tc.mutation,
                         std::make_shared<MemoryLedger>());
  const GradStore<double> analytic = run->tape.backward(run->loss.loss);

  const LossSpec spec = LossSpec::of(ex, tc.task);
  const StopGradSnapshot snapshot = record_stopgrad_snapshot(model, ex.seq, partition, spec);
  FdOptions fd;
  fd.step = config.gradcheck.step;
  fd.seed = config.seed;
  const auto numeric = finite_diff_grad(
      [&] { return stopgrad_surrogate_loss(model, ex.seq, partition, spec, snapshot); }, model, fd);
  return compare_gradients(model, numeric, analytic, config.gradcheck.tolerance,
                           config.gradcheck.step);
}

RunConfig resolve_config(const CommandOptions& options) {
  RunConfig config = load_run_config(options.config, options.overrides);
  if (options.out) config.out = *options.out;
  if (options.checkpoint) config.checkpoint = *options.checkpoint;
  if (options.inject_bug) {
    config.gradcheck.inject_bug = *options.inject_bug;
    config.validate();
  }
  return config;
}

TaskData build_task_data(const RunConfig& config) {
  TaskData data;
  if (config.task.kind == TaskMode::kClassification) {
    ClassificationSpec spec;
    spec.n_examples = config.task.n_train + config.task.n_test;
    spec.seq_len = config.task.seq_len;
    spec.min_len = config.task.min_len;
    spec.n_classes = config.model.n_classes;
    spec.vocab_size = config.model.vocab_size;
    spec.difficulty = config.task.difficulty;
    spec.seed = config.seed;
    Dataset all = gen_classification(spec);
    const auto split = static_cast<std::ptrdiff_t>(config.task.n_train);
    data.train.assign(all.begin(), all.begin() + split);
    data.test.assign(all.begin() + split, all.end());
    return data;
  }

  std::string bytes;
  const fs::path corpus(config.task.corpus);
  if (!config.task.corpus.empty() && fs::exists(corpus)) {
    bytes = read_bytes(corpus);
  } else {
    if (config.task.corpus_bytes == 0) {
      throw IoError("corpus '" + config.task.corpus + "' does not exist and task.corpus_bytes is 0");
    }
    bytes = generate_text_corpus(config.task.corpus_bytes, config.seed);
    if (!config.task.corpus.empty()) {
      if (corpus.has_parent_path()) fs::create_directories(corpus.parent_path());
      open_out(corpus) << bytes;
    }
  }
  const Index stride = config.task.stride > 0 ? config.task.stride : config.task.seq_len;
  const auto held_out = static_cast<std::size_t>(static_cast<double>(bytes.size()) *
                                                 config.task.eval_fraction);
  const std::string_view view(bytes);
  data.train = lm_windows(view.substr(0, bytes.size() - held_out), config.task.seq_len, stride);
  data.test = lm_windows(view.substr(bytes.size() - held_out), config.task.seq_len,
                         config.task.seq_len);
  if (std::cmp_greater(data.test.size(), config.task.eval_windows)) {
    data.test.resize(static_cast<std::size_t>(config.task.eval_windows));
  }
  if (data.train.empty() || data.test.empty()) {
    throw ConfigError("task", "corpus too small for the requested seq_len and eval_fraction");
  }
  return data;
}

int cmd_train(const CommandOptions& options, std::ostream& out, std::ostream&) {
  const RunConfig config = resolve_config(options);
  write_run_files(config, "train");
  return config.dtype == DType::kFloat64 ? train_impl<double>(config, out)
                                         : train_impl<float>(config, out);
}

int cmd_eval(const CommandOptions& options, std::ostream& out, std::ostream&) {
  const RunConfig config = resolve_config(options);
  const fs::path checkpoint =
      config.checkpoint.empty() ? fs::path(config.out) / "model.ckpt" : fs::path(config.checkpoint);
  return config.dtype == DType::kFloat64
             ? eval_impl<double>(config, checkpoint, options.merge_adapters, out)
             : eval_impl<float>(config, checkpoint, options.merge_adapters, out);
}

int cmd_gradcheck(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  const RunConfig config = resolve_config(options);
  write_run_files(config, "gradcheck");

  EquivalenceOptions eq;
  eq.points = config.gradcheck.points;
  eq.seed = config.seed;
  eq.value_tolerance = config.gradcheck.value_tolerance;
  eq.gradient_tolerance = config.gradcheck.gradient_tolerance;
  eq.mutation = parse_mutation(config.gradcheck.inject_bug);
  const EquivalenceReport suite = equivalence_suite(eq);
  const GradCheckReport fd = finite_difference_check(config);

  const fs::path report = fs::path(config.out) / "verify_report.jsonl";
  suite.write_jsonl(report);
  {
    std::ofstream f(report, std::ios::app);
    for (const auto& p : fd.params) {
      f << json{{"grid-point", -1},
                {"property", "finite-difference:" + p.name},
                {"max-rel-err", p.max_rel_err},
                {"pass", p.pass}}
               .dump()
        << '\n';
    }
  }

  out << "equivalence suite: " << suite.grid.size() << " grid points, mutation "
      << config.gradcheck.inject_bug << '\n';
  for (const char* property :
       {"value-preservation", "stopgrad-equivalence", "full-equivalence", "cache-scaling"}) {
    out << "  " << std::left << std::setw(22) << property << " worst " << std::setprecision(3)
        << suite.worst(property) << '\n';
  }
  out << "finite differences:\n" << fd.summary();

  std::vector<std::string> failed = suite.failed_properties();
  if (!fd.pass) failed.emplace_back("finite-difference");
  if (failed.empty()) {
    out << "gradcheck PASS\n";
    return 0;
  }
  err << "gradcheck FAIL: failed properties:";
  for (const auto& name : failed) err << ' ' << name;
  err << '\n';
  if (suite.first_failure) {
    const auto& f = *suite.first_failure;
    err << "first failure: " << f.property << " at "
        << suite.grid.at(static_cast<std::size_t>(f.grid_point)).describe() << " (max-rel-err "
        << f.max_rel_err << ")\n";
  }
  return 1;
}

int cmd_memsweep(const CommandOptions& options, std::ostream& out, std::ostream&) {
  const RunConfig config = resolve_config(options);
  write_run_files(config, "memsweep");
  SweepGrid grid;
  for (const auto& r : config.memsweep.regimes) grid.regimes.push_back(parse_regime(r));
  grid.lengths = config.memsweep.lengths;
  grid.batches = config.memsweep.batches;
  if (!config.memsweep.k.empty()) {
    for (Index k : config.memsweep.k) grid.selections.push_back(SelectionSize::absolute(k));
  } else {
    for (double r : config.memsweep.ratios) grid.selections.push_back(SelectionSize::fraction(r));
  }

  std::vector<MemoryReport> rows;
  if (!grid.empty()) {
    rows = sweep_report(config.model, grid, config.train_config(), config.dtype, config.seed);
  }
  const fs::path table = fs::path(config.out) / "sweep.csv";
  write_sweep_csv(table, rows);

  std::vector<const MemoryReport*> ranked;
  for (const auto& r : rows) ranked.push_back(&r);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto* a, const auto* b) { return a->peak_bytes < b->peak_bytes; });
  out << "rank  regime          n     k     batch  peak_bytes\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const MemoryReport& r = *ranked[i];
    out << std::left << std::setw(6) << i + 1 << std::setw(16) << to_string(r.regime)
        << std::setw(6) << r.n << std::setw(6) << r.k << std::setw(7) << r.batch << r.peak_bytes
        << '\n';
  }
  out << "table: " << table.string() << " (" << rows.size() << " rows)\n";
  return 0;
}

int run_command(const std::string& name, const CommandOptions& options, std::ostream& out,
                std::ostream& err) {
  try {
    if (name == "train") return cmd_train(options, out, err);
    if (name == "eval") return cmd_eval(options, out, err);
    if (name == "gradcheck") return cmd_gradcheck(options, out, err);
    if (name == "memsweep") return cmd_memsweep(options, out, err);
    err << "error: unknown command '" << name << "'\n";
    return 2;
  } catch (const Error& e) {
    err << "error (" << to_string(e.code()) << "): " << e.what() << '\n';
    switch (e.code()) {
      case ErrorCode::kConfig:
      case ErrorCode::kIo:
      case ErrorCode::kShape:
      case ErrorCode::kRange:
        return 2;
      case ErrorCode::kNumeric:
        return 3;
      case ErrorCode::kState:
        return 1;
    }
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "error (io): " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace tokentune

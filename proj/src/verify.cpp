// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/verify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace tokentune {

LossSpec LossSpec::of(const Example& example, TaskMode task) {
  LossSpec spec;
  spec.task = task;
  spec.label = example.label;
  spec.targets = example.targets;
  return spec;
}

namespace {

/// Replaces the rows outside G by constants, keeping storage order.
template <RealScalar Real>
class RowStopper {
  using Tp = Tape<Real>;
  using V = Var<Real>;

 public:
  RowStopper(Tp& tape, const TokenPartition& partition, Index n, StopGradMode mode,
             std::vector<Matrix<Real>>* snapshot)
      : tape_(tape), mode_(mode), snapshot_(snapshot) {
    std::vector<std::uint8_t> in_g(static_cast<std::size_t>(n), 0);
    for (Index r : partition.selected) in_g.at(static_cast<std::size_t>(r)) = 1;
    for (Index r = 0; r < n; ++r) (in_g[static_cast<std::size_t>(r)] ? g_ : rest_).push_back(r);
    inverse_.resize(static_cast<std::size_t>(n));
    Index slot = 0;
    for (Index r : g_) inverse_[static_cast<std::size_t>(r)] = slot++;
    for (Index r : rest_) inverse_[static_cast<std::size_t>(r)] = slot++;
    if (mode_ != StopGradMode::kDetach && snapshot_ == nullptr) {
      throw StateError("stop-gradient oracle: snapshot mode without a snapshot");
    }
    if (mode_ == StopGradMode::kRecord) snapshot_->clear();
  }

  V operator()(const V& x) {
    if (rest_.empty()) return x;
    Matrix<Real> frozen;
    if (mode_ == StopGradMode::kReplay) {
      if (cursor_ >= snapshot_->size()) {
        throw StateError("stop-gradient oracle: snapshot shorter than the forward");
      }
      frozen = (*snapshot_)[cursor_++];
      if (frozen.rows() != static_cast<Index>(rest_.size()) || frozen.cols() != x.cols()) {
        throw ShapeError("stop-gradient oracle: snapshot tensor does not match the forward");
      }
    } else {
      frozen = x.value()(rest_, Eigen::all);
      if (mode_ == StopGradMode::kRecord) snapshot_->push_back(frozen);
    }
    const std::array<V, 2> parts{tape_.select_rows(x, g_), tape_.constant(std::move(frozen))};
    return tape_.select_rows(tape_.concat_rows(std::span<const V>(parts)), inverse_);
  }

 private:
  Tp& tape_;
  StopGradMode mode_;
  std::vector<Matrix<Real>>* snapshot_;
  std::vector<Index> g_;
  std::vector<Index> rest_;
  std::vector<Index> inverse_;
  std::size_t cursor_ = 0;
};

template <RealScalar Real>
Var<Real> leaf(Tape<Real>& tape, const TransformerModel<Real>& model, const std::string& name) {
  const auto& p = model.param(name);
  return tape.parameter(name, p.value, !p.frozen);
}

template <RealScalar Real>
Var<Real> affine(Tape<Real>& tape, const TransformerModel<Real>& model, const Var<Real>& x, const std::string& w,
         const std::string& b) {
  using V = Var<Real>;
  V y = tape.matmul(x, leaf(tape, model, w));
  const auto it = model.adapters().find(w);
  if (it != model.adapters().end() && !it->second.merged) {
    const LoraAdapter& a = it->second;
    V down = tape.matmul(x, leaf(tape, model, a.a_name));
    y = tape.add(y, tape.matmul(down, leaf(tape, model, a.b_name), MatmulOptions{.alpha = a.scaling}));
  }
  return tape.add(y, leaf(tape, model, b));
}

std::shared_ptr<const Mask> visibility(const TokenSequence& seq, bool causal) {
  const auto n = static_cast<Index>(seq.size());
  auto mask = std::make_shared<Mask>(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      bool ok = seq.pad_mask[static_cast<std::size_t>(j)] != 0;
      if (causal && seq.positions[static_cast<std::size_t>(j)] > seq.positions[static_cast<std::size_t>(i)]) ok = false;
      (*mask)(i, j) = ok ? 1 : 0;
    }
  }
  return mask;
}

template <RealScalar Real>
Var<Real> oracle_loss(Tape<Real>& tape, const TransformerModel<Real>& model, const TokenSequence& seq,
                      const TokenPartition& partition, const LossSpec& spec, StopGradMode mode,
                      std::vector<Matrix<Real>>* snapshot, Matrix<Real>* hidden_out) {
  using V = Var<Real>;
  const ModelConfig& c = model.config();
  const auto n = static_cast<Index>(seq.size());
  if (partition.size() != n) throw ShapeError("stop-gradient oracle: partition/sequence mismatch");
  if (partition.selected.empty()) throw RangeError("stop-gradient oracle: empty selection");
  RowStopper<Real> sg(tape, partition, n, mode, snapshot);
  auto p = [](Index l, const char* s) { return param_names::layer(l, s); };

  V h = tape.add(tape.select_rows(leaf(tape, model, param_names::kTokenEmbedding), seq.token_ids),
                 tape.select_rows(leaf(tape, model, param_names::kPositionEmbedding), seq.positions));
  h = sg(h);
  const auto mask = visibility(seq, c.causal);
  const Index dh = c.d_model / c.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (Index l = 0; l < c.n_layers; ++l) {
    V x = sg(tape.layer_norm(h, leaf(tape, model, p(l, "norm1.scale")),
                             leaf(tape, model, p(l, "norm1.shift"))));
    V q = sg(affine(tape, model, x, p(l, "W_Q"), p(l, "b_Q")));
    V k = sg(affine(tape, model, x, p(l, "W_K"), p(l, "b_K")));
    V v = sg(affine(tape, model, x, p(l, "W_V"), p(l, "b_V")));
    std::vector<V> heads;
    for (Index head = 0; head < c.n_heads; ++head) {
      V s = tape.matmul(tape.slice_cols(q, head * dh, dh), tape.slice_cols(k, head * dh, dh),
                        MatmulOptions{.transpose_b = true, .alpha = scale});
      heads.push_back(tape.matmul(tape.softmax_rows(s, mask), tape.slice_cols(v, head * dh, dh)));
    }
    V o = sg(tape.concat_cols(std::span<const V>(heads)));
    h = sg(tape.add(h, sg(affine(tape, model, o, p(l, "W_O"), p(l, "b_O")))));

    V x2 = sg(tape.layer_norm(h, leaf(tape, model, p(l, "norm2.scale")),
                              leaf(tape, model, p(l, "norm2.shift"))));
    V f = sg(tape.gelu(sg(affine(tape, model, x2, p(l, "W1"), p(l, "b1")))));
    h = sg(tape.add(h, sg(affine(tape, model, f, p(l, "W2"), p(l, "b2")))));
  }
  if (hidden_out) *hidden_out = h.value();

  V rows = tape.select_rows(h, partition.selected);
  if (spec.task == TaskMode::kClassification) {
    if (spec.label < 0 || spec.label >= c.n_classes) throw RangeError("oracle: label out of range");
    V pooled = tape.mean_rows(rows);
    V hid = tape.gelu(affine(tape, model, pooled, param_names::kClsW1, param_names::kClsB1));
    V logits = affine(tape, model, hid, param_names::kClsW2, param_names::kClsB2);
    const std::array<Index, 1> t{spec.label};
    return tape.cross_entropy(logits, t);
  }
  std::vector<Index> targets;
  for (Index r : partition.selected) {
    const Index t = spec.targets.at(static_cast<std::size_t>(r));
    if (t < 0) throw RangeError("oracle: selected row without a target");
    targets.push_back(t);
  }
  return tape.cross_entropy(tape.matmul(rows, leaf(tape, model, param_names::kLmHead)), targets);
}

}  // namespace

OracleResult stopgrad_reference_backward(const TransformerModel<double>& model,
                                         const TokenSequence& seq, const TokenPartition& partition,
                                         const LossSpec& loss) {
  Tape<double> tape;
  OracleResult out;
  Var<double> l =
      oracle_loss<double>(tape, model, seq, partition, loss, StopGradMode::kDetach, nullptr, &out.hidden);
  out.loss = l.value()(0, 0);
  out.grads = tape.backward(l);
  return out;
}

StopGradSnapshot record_stopgrad_snapshot(const TransformerModel<double>& model,
                                          const TokenSequence& seq,
                                          const TokenPartition& partition, const LossSpec& loss) {
  const auto wide = model.cast<long double>();
  Tape<long double> tape;
  NoGradGuard<long double> no_grad(tape);
  StopGradSnapshot snapshot;
  oracle_loss<long double>(tape, wide, seq, partition, loss, StopGradMode::kRecord,
                           &snapshot.tensors, nullptr);
  return snapshot;
}

long double stopgrad_surrogate_loss(const TransformerModel<double>& model, const TokenSequence& seq,
                                    const TokenPartition& partition, const LossSpec& loss,
                                    const StopGradSnapshot& snapshot) {
  const auto wide = model.cast<long double>();
  Tape<long double> tape;
  NoGradGuard<long double> no_grad(tape);
  auto replay = snapshot.tensors;
  return oracle_loss<long double>(tape, wide, seq, partition, loss, StopGradMode::kReplay, &replay,
                                  nullptr)
      .value()(0, 0);
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

std::map<std::string, NumericGradient> finite_diff_grad(
    const std::function<long double()>& loss,
    const std::vector<std::pair<std::string, Matrix<double>*>>& params, const FdOptions& options) {
  if (!(options.step > 0.0)) throw ConfigError("gradcheck.step", "must be > 0");
  std::map<std::string, NumericGradient> out;
  std::uint64_t salt = 0;
  for (const auto& [name, value] : params) {
    ++salt;
    NumericGradient g;
    const Index size = value->size();
    if (size > options.subsample_threshold) {
      std::vector<Index> all(static_cast<std::size_t>(size));
      std::iota(all.begin(), all.end(), Index{0});
      std::mt19937_64 rng(mix_seed(options.seed, salt));
      const auto take = static_cast<std::size_t>(std::min(size, options.subsample_count));
      for (std::size_t i = 0; i < take; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
        std::swap(all[i], all[pick(rng)]);
      }
      g.coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take));
      std::sort(g.coords.begin(), g.coords.end());
    } else {
      g.coords.resize(static_cast<std::size_t>(size));
      std::iota(g.coords.begin(), g.coords.end(), Index{0});
    }
    for (Index c : g.coords) {
      double& x = value->data()[c];
      const double saved = x;
      x = saved + options.step;
      const long double up = loss();
      x = saved - options.step;
      const long double down = loss();
      x = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite differences: non-finite loss perturbing " + name + "[" +
                           std::to_string(c) + "]");
      }
      // The realized step, not the nominal one: saved + step rounds.
      const long double h = static_cast<long double>(saved + options.step) -
                            static_cast<long double>(saved - options.step);
      g.values.push_back(static_cast<double>((up - down) / h));
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

std::map<std::string, NumericGradient> finite_diff_grad(const std::function<long double()>& loss,
                                                        TransformerModel<double>& model,
                                                        const FdOptions& options) {
  std::vector<std::pair<std::string, Matrix<double>*>> params;
  for (auto& p : model.params()) params.emplace_back(p.name, &p.value);
  return finite_diff_grad(loss, params, options);
}

double GradCheckReport::max_rel_err() const {
  double worst = 0.0;
  for (const auto& p : params) {
    if (!p.frozen) worst = std::max(worst, p.max_rel_err);
  }
  return worst;
}

std::string GradCheckReport::summary() const {
  std::ostringstream s;
  s << "gradcheck " << (pass ? "PASS" : "FAIL") << " (tolerance " << tolerance << ", step " << step
    << ", worst " << max_rel_err() << ")\n";
  for (const auto& p : params) {
    s << "  " << p.name << (p.frozen ? " [frozen]" : "") << " coords=" << p.coords_checked
      << " max_rel_err=" << p.max_rel_err << " at " << p.argmax << " analytic=" << p.analytic
      << " numeric=" << p.numeric << (p.frozen ? "" : (p.pass ? " ok" : " FAIL")) << '\n';
  }
  return s.str();
}

GradCheckReport compare_gradients(const TransformerModel<double>& model,
                                  const std::map<std::string, NumericGradient>& numeric,
                                  const GradStore<double>& analytic, double tolerance, double step) {
  GradCheckReport report;
  report.tolerance = tolerance;
  report.step = step;
  for (const auto& [name, g] : numeric) {
    ParamCheck check;
    check.name = name;
    check.frozen = model.param(name).frozen;
    check.coords_checked = static_cast<Index>(g.coords.size());
    const Matrix<double>* a = analytic.find(name);
    if (check.frozen && a != nullptr) {
      throw StateError("gradcheck: frozen parameter " + name + " has a gradient");
    }
    for (std::size_t i = 0; i < g.coords.size(); ++i) {
      const double av = a ? a->data()[g.coords[i]] : 0.0;
      const double err = relative_error(av, g.values[i]);
      if (check.argmax < 0 || err > check.max_rel_err) {
        check.max_rel_err = err;
        check.argmax = g.coords[i];
        check.analytic = av;
        check.numeric = g.values[i];
      }
    }
    if (!check.frozen) {
      check.pass = a != nullptr && check.max_rel_err < tolerance;
      report.pass = report.pass && check.pass;
    }
    report.params.push_back(std::move(check));
  }
  return report;
}

double gradient_error(double a, double b) {
  const double rel = relative_error(a, b);
  return std::abs(a - b) <= kRoundoff ? std::min(rel, std::abs(a - b)) : rel;
}

double max_relative_error(const GradStore<double>& a, const GradStore<double>& b) {
  double worst = 0.0;
  for (const auto& [name, ga] : a) {
    const Matrix<double>* gb = b.find(name);
    if (!gb || gb->rows() != ga.rows() || gb->cols() != ga.cols()) return 1.0;
    for (Index i = 0; i < ga.size(); ++i) {
      worst = std::max(worst, gradient_error(ga.data()[i], gb->data()[i]));
    }
  }
  for (const auto& [name, gb] : b) {
    if (!a.contains(name)) return 1.0;
  }
  return worst;
}

// Equivalence suite -------------------------------------------------------------

std::string GridPoint::describe() const {
  std::ostringstream s;
  s << "point " << index << ": n=" << n << " padding=" << padding << " k=" << k
    << " layers=" << layers << " causal=" << (causal ? 1 : 0) << " lora=" << (lora ? 1 : 0)
    << " seed=" << seed;
  return s.str();
}

std::vector<std::string> EquivalenceReport::failed_properties() const {
  std::vector<std::string> out;
  for (const auto& r : records) {
    if (!r.pass && std::find(out.begin(), out.end(), r.property) == out.end()) {
      out.push_back(r.property);
    }
  }
  return out;
}

double EquivalenceReport::worst(const std::string& property) const {
  double w = 0.0;
  for (const auto& r : records) {
    if (r.property == property) w = std::max(w, r.max_rel_err);
  }
  return w;
}

void EquivalenceReport::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& r : records) {
    const GridPoint& g = grid.at(static_cast<std::size_t>(r.grid_point));
    out << nlohmann::json{{"grid_point", r.grid_point},
                          {"property", r.property},
                          {"max_rel_err", r.max_rel_err},
                          {"pass", r.pass},
                          {"n", g.n},
                          {"padding", g.padding},
                          {"k", g.k},
                          {"layers", g.layers},
                          {"causal", g.causal},
                          {"lora", g.lora},
                          {"seed", g.seed}}
               .dump()
        << '\n';
  }
}

std::vector<GridPoint> sample_grid(const EquivalenceOptions& o) {
  if (o.points < 1) throw ConfigError("gradcheck.points", "must be >= 1");
  if (o.min_n < 3 || o.max_n < o.min_n) throw ConfigError("gradcheck.max_n", "need 3 <= min_n <= max_n");
  std::mt19937_64 rng(o.seed);
  std::vector<GridPoint> grid;
  for (Index i = 0; i < o.points; ++i) {
    GridPoint g;
    g.index = i;
    g.n = std::uniform_int_distribution<Index>(o.min_n, o.max_n)(rng);
    g.padding = std::uniform_int_distribution<Index>(0, std::min<Index>(2, g.n - 3))(rng);
    g.layers = std::uniform_int_distribution<Index>(1, o.max_layers)(rng);
    g.causal = (i % 2) == 1;
    g.lora = (i / 2) % 2 == 1;
    const Index candidates = g.n - g.padding - (g.causal ? 1 : 0);
    // Every fourth point selects every candidate row so full-equivalence runs.
    g.k = (i % 4 == 3) ? candidates : std::uniform_int_distribution<Index>(1, candidates)(rng);
    g.seed = rng();
    grid.push_back(g);
  }
  return grid;
}

GridCase build_grid_case(const GridPoint& point, const EquivalenceOptions& o) {
  ModelConfig mc;
  mc.vocab_size = o.vocab_size;
  mc.max_positions = o.max_n + 4;
  mc.d_model = o.d_model;
  mc.n_heads = o.n_heads;
  mc.d_ff = o.d_ff;
  mc.n_layers = point.layers;
  mc.causal = point.causal;
  mc.n_classes = 3;
  mc.init_std = o.init_std;
  mc.validate();

  GridCase gc{TransformerModel<double>::initialize(mc, point.seed), {}, {}, {}};
  std::mt19937_64 rng(mix_seed(point.seed, 1));
  std::uniform_int_distribution<Index> token(0, o.vocab_size - 1);
  std::vector<Index> ids(static_cast<std::size_t>(point.n));
  for (auto& id : ids) id = token(rng);
  gc.example.seq = TokenSequence::from_ids(ids);
  const Index real = point.n - point.padding;
  for (Index i = real; i < point.n; ++i) gc.example.seq.pad_mask[static_cast<std::size_t>(i)] = 0;
  gc.example.serial = point.seed;
  if (point.causal) {
    gc.example.targets.assign(static_cast<std::size_t>(point.n), -1);
    for (Index i = 0; i + 1 < real; ++i) gc.example.targets[static_cast<std::size_t>(i)] = ids[static_cast<std::size_t>(i + 1)];
  } else {
    gc.example.label = std::uniform_int_distribution<Index>(0, mc.n_classes - 1)(rng);
  }

  gc.config.task = point.causal ? TaskMode::kLanguageModel : TaskMode::kClassification;
  gc.config.regime = point.lora ? Regime::kTokenTuneLora : Regime::kTokenTune;
  gc.config.selection = SelectionSize::absolute(point.k);
  gc.config.seed = point.seed;
  gc.config.mutation = o.mutation;
  gc.config.lora.rank = 2;
  gc.config.lora.alpha = 4.0;
  gc.config.lora.seed = point.seed;
  gc.config.lora.targets = {"W_Q", "W_V", "W1", "W2"};
  prepare_model(gc.model, gc.config);
  if (point.lora) {
    // Nonzero B so the adapter path carries gradient into A as well.
    std::normal_distribution<double> normal(0.0, 0.3);
    for (auto& [target, a] : gc.model.adapters()) {
      auto& b = gc.model.param(a.b_name).value;
      for (Index i = 0; i < b.size(); ++i) b.data()[i] = normal(rng);
    }
  }
  gc.partition = partition_for(gc.example, gc.config, 0);
  return gc;
}

namespace {

std::size_t row_local_cache(const Tape<double>& tape) {
  return tape.cached_elements_for_op(OpKind::kLayerNorm) + tape.cached_elements_for_op(OpKind::kNonlinearity);
}

}  // namespace

EquivalenceReport equivalence_suite(const EquivalenceOptions& options) {
  return equivalence_suite(options, sample_grid(options));
}

EquivalenceReport equivalence_suite(const EquivalenceOptions& options,
                                    const std::vector<GridPoint>& grid) {
  EquivalenceReport report;
  report.grid = grid;
  auto add = [&report](Index point, const char* property, double err, double tol) {
    PropertyRecord r{point, property, err, err < tol};
    report.records.push_back(r);
    if (!r.pass && !report.first_failure) report.first_failure = r;
    report.pass = report.pass && r.pass;
  };

  for (const GridPoint& point : grid) {
    GridCase gc = build_grid_case(point, options);
    const TaskMode task = gc.config.task;
    const auto ledger = std::make_shared<MemoryLedger>();

    // value-preservation: restored two-group forward against the plain forward.
    {
      Tape<double> tape;
      NoGradGuard<double> no_grad(tape);
      const auto split = tokentune_forward(tape, gc.model, gc.example.seq, gc.partition,
                                           TokenTuneOptions{options.mutation});
      const Matrix<double> restored = restore_order(tape, split).value();
      const Matrix<double> plain = forward(tape, gc.model, gc.example.seq).value();
      add(point.index, "value-preservation", max_abs_difference(restored, plain),
          options.value_tolerance);
    }

    // stopgrad-equivalence: selective backward against the oracle.
    auto run = run_example(gc.model, gc.example, gc.partition, gc.config.regime, task,
                           options.mutation, ledger);
    const std::size_t cached_row_local = row_local_cache(run->tape);
    const GradStore<double> selective = run->tape.backward(run->loss.loss);
    const OracleResult oracle =
        stopgrad_reference_backward(gc.model, gc.example.seq, gc.partition, LossSpec::of(gc.example, task));
    add(point.index, "stopgrad-equivalence", max_relative_error(selective, oracle.grads),
        options.gradient_tolerance);

    // full-equivalence: selecting every candidate row reproduces the plain regime.
    const Index candidates = point.n - point.padding - (point.causal ? 1 : 0);
    if (gc.partition.k == candidates) {
      auto full = run_example(gc.model, gc.example, gc.partition,
                              point.lora ? Regime::kLora : Regime::kFull, task, options.mutation,
                              ledger);
      const GradStore<double> full_grads = full->tape.backward(full->loss.loss);
      add(point.index, "full-equivalence", max_relative_error(selective, full_grads),
          options.gradient_tolerance);
    }

    // cache-scaling: row-local caches (normalization, nonlinearity) depend on
    // k only, so appending untracked rows must leave them unchanged.
    {
      Example longer = gc.example;
      TokenPartition wider = gc.partition;
      for (Index extra = 0; extra < 3; ++extra) {
        const auto row = static_cast<Index>(longer.seq.size());
        longer.seq.token_ids.push_back(0);
        longer.seq.positions.push_back(row);
        longer.seq.pad_mask.push_back(0);
        if (!longer.targets.empty()) longer.targets.push_back(-1);
        wider.padded.push_back(row);
      }
      auto wide = run_example(gc.model, longer, wider, gc.config.regime, task, options.mutation,
                              ledger);
      const double a = static_cast<double>(cached_row_local);
      const double b = static_cast<double>(row_local_cache(wide->tape));
      add(point.index, "cache-scaling", relative_error(a, b), options.gradient_tolerance);
    }
  }
  return report;
}

}  // namespace tokentune

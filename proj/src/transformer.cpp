// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/transformer.hpp"

#include <cmath>
#include <random>

namespace tokentune {

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* field) {
    if (v < 1) throw ConfigError(std::string("model.") + field, "must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(max_positions, "max_positions");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  if (n_layers < 0) throw ConfigError("model.n_layers", "must be >= 0");
  if (!causal) positive(n_classes, "n_classes");
  if (d_model % n_heads != 0) {
    throw ConfigError("model.n_heads", "must divide d_model (" + std::to_string(d_model) + ")");
  }
  if (!(init_std > 0.0)) throw ConfigError("model.init_std", "must be > 0");
}

TokenSequence TokenSequence::from_ids(std::vector<Index> ids) {
  TokenSequence seq;
  seq.positions.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) seq.positions[i] = static_cast<Index>(i);
  seq.pad_mask.assign(ids.size(), 1);
  seq.token_ids = std::move(ids);
  return seq;
}

std::size_t TokenSequence::unpadded_count() const {
  std::size_t n = 0;
  for (auto m : pad_mask) n += m ? 1 : 0;
  return n;
}

void TokenSequence::validate() const {
  if (positions.size() != token_ids.size() || pad_mask.size() != token_ids.size()) {
    throw ShapeError("token sequence: ids/positions/pad_mask lengths differ (" +
                     std::to_string(token_ids.size()) + "/" + std::to_string(positions.size()) +
                     "/" + std::to_string(pad_mask.size()) + ")");
  }
}

std::string param_names::layer(Index layer, std::string_view suffix) {
  std::string out = "layers.";
  out += std::to_string(layer);
  out += '.';
  out += suffix;
  return out;
}

// TransformerModel --------------------------------------------------------------

template <RealScalar Real>
TransformerModel<Real>::TransformerModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
}

template <RealScalar Real>
TransformerModel<Real> TransformerModel<Real>::initialize(const ModelConfig& config,
                                                          std::uint64_t seed) {
  TransformerModel model(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, config.init_std);
  auto weights = [&](Index rows, Index cols) {
    Matrix<Real> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(normal(rng));
    return m;
  };
  auto zeros = [](Index cols) { return Matrix<Real>::Zero(1, cols).eval(); };
  auto ones = [](Index cols) { return Matrix<Real>::Ones(1, cols).eval(); };

  const Index d = config.d_model;
  model.add_param(param_names::kTokenEmbedding, weights(config.vocab_size, d));
  model.add_param(param_names::kPositionEmbedding, weights(config.max_positions, d));
  for (Index l = 0; l < config.n_layers; ++l) {
    using param_names::layer;
    model.add_param(layer(l, "norm1.scale"), ones(d));
    model.add_param(layer(l, "norm1.shift"), zeros(d));
    for (const char* w : {"W_Q", "W_K", "W_V", "W_O"}) model.add_param(layer(l, w), weights(d, d));
    for (const char* b : {"b_Q", "b_K", "b_V", "b_O"}) model.add_param(layer(l, b), zeros(d));
    model.add_param(layer(l, "norm2.scale"), ones(d));
    model.add_param(layer(l, "norm2.shift"), zeros(d));
    model.add_param(layer(l, "W1"), weights(d, config.d_ff));
    model.add_param(layer(l, "b1"), zeros(config.d_ff));
    model.add_param(layer(l, "W2"), weights(config.d_ff, d));
    model.add_param(layer(l, "b2"), zeros(d));
  }
  if (config.causal) {
    model.add_param(param_names::kLmHead, weights(d, config.vocab_size));
  } else {
    model.add_param(param_names::kClsW1, weights(d, d));
    model.add_param(param_names::kClsB1, zeros(d));
    model.add_param(param_names::kClsW2, weights(d, config.n_classes));
    model.add_param(param_names::kClsB2, zeros(config.n_classes));
  }
  return model;
}

template <RealScalar Real>
const Parameter<Real>& TransformerModel<Real>::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw RangeError("unknown parameter '" + name + "'");
  return params_[it->second];
}

template <RealScalar Real>
Parameter<Real>& TransformerModel<Real>::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw RangeError("unknown parameter '" + name + "'");
  return params_[it->second];
}

template <RealScalar Real>
void TransformerModel<Real>::add_param(std::string name, Matrix<Real> value, bool frozen) {
  if (index_.contains(name)) throw StateError("duplicate parameter '" + name + "'");
  index_.emplace(name, params_.size());
  params_.push_back(Parameter<Real>{std::move(name), std::move(value), frozen});
}

template <RealScalar Real>
void TransformerModel<Real>::set_all_frozen(bool frozen) {
  for (auto& p : params_) p.frozen = frozen;
}

template <RealScalar Real>
std::size_t TransformerModel<Real>::parameter_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

template <RealScalar Real>
std::size_t TransformerModel<Real>::trainable_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (!p.frozen) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

template <RealScalar Real>
const LoraAdapter* TransformerModel<Real>::adapter_for(const std::string& target) const {
  auto it = adapters_.find(target);
  return it == adapters_.end() ? nullptr : &it->second;
}

template <RealScalar Real>
template <RealScalar Other>
TransformerModel<Other> TransformerModel<Real>::cast() const {
  TransformerModel<Other> out(config_);
  for (const auto& p : params_) out.add_param(p.name, p.value.template cast<Other>(), p.frozen);
  out.adapters_ = adapters_;
  return out;
}

template class TransformerModel<float>;
template class TransformerModel<double>;
template class TransformerModel<long double>;
template TransformerModel<long double> TransformerModel<double>::cast<long double>() const;
template TransformerModel<double> TransformerModel<float>::cast<double>() const;
template TransformerModel<float> TransformerModel<double>::cast<float>() const;
template TransformerModel<float> TransformerModel<float>::cast<float>() const;
template TransformerModel<double> TransformerModel<double>::cast<double>() const;

// Building blocks ----------------------------------------------------------------

template <RealScalar Real>
Matrix<Real> log_softmax_rows(const Matrix<Real>& logits) {
  Matrix<Real> out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const Real max = logits.row(i).maxCoeff();
    const Real lse = max + std::log((logits.row(i).array() - max).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

std::shared_ptr<const Mask> attention_mask(std::span<const Index> query_positions,
                                           std::span<const Index> key_positions,
                                           std::span<const std::uint8_t> key_pad_mask,
                                           bool causal) {
  if (key_pad_mask.size() != key_positions.size()) {
    throw ShapeError("attention mask: " + std::to_string(key_positions.size()) + " keys but " +
                     std::to_string(key_pad_mask.size()) + " pad flags");
  }
  auto mask = std::make_shared<Mask>(static_cast<Index>(query_positions.size()),
                                     static_cast<Index>(key_positions.size()));
  for (std::size_t i = 0; i < query_positions.size(); ++i) {
    for (std::size_t j = 0; j < key_positions.size(); ++j) {
      const bool visible =
          key_pad_mask[j] != 0 && (!causal || key_positions[j] <= query_positions[i]);
      (*mask)(static_cast<Index>(i), static_cast<Index>(j)) = visible ? 1 : 0;
    }
  }
  return mask;
}

template <RealScalar Real>
Var<Real> bind_param(Tape<Real>& tape, const TransformerModel<Real>& model, const std::string& name) {
  const Parameter<Real>& p = model.param(name);
  return tape.parameter(p.name, p.value, !p.frozen);
}

template <RealScalar Real>
Var<Real> dense(Tape<Real>& tape, const TransformerModel<Real>& model, const Var<Real>& x,
                const std::string& weight, const std::string& bias) {
  Var<Real> out = tape.matmul(x, bind_param(tape, model, weight));
  if (const LoraAdapter* adapter = model.adapter_for(weight); adapter && !adapter->merged) {
    Var<Real> down = tape.matmul(x, bind_param(tape, model, adapter->a_name));
    Var<Real> up = tape.matmul(down, bind_param(tape, model, adapter->b_name),
                               MatmulOptions{.alpha = adapter->scaling});
    out = tape.add(out, up);
  }
  return tape.add(out, bind_param(tape, model, bias));
}

template <RealScalar Real>
Var<Real> multi_head_attend(Tape<Real>& tape, Index n_heads, const Var<Real>& queries,
                            const Var<Real>& keys, const Var<Real>& values,
                            std::shared_ptr<const Mask> mask) {
  if (queries.cols() != keys.cols() || keys.cols() != values.cols() ||
      keys.rows() != values.rows()) {
    throw ShapeError("attention: q " + shape_string(queries.value()) + ", k " +
                     shape_string(keys.value()) + ", v " + shape_string(values.value()));
  }
  const Index d = queries.cols();
  const Index dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (n_heads == 1) {
    Var<Real> scores = tape.matmul(queries, keys, MatmulOptions{.transpose_b = true, .alpha = scale});
    return tape.matmul(tape.softmax_rows(scores, std::move(mask)), values);
  }
  std::vector<Var<Real>> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (Index h = 0; h < n_heads; ++h) {
    Var<Real> q = tape.slice_cols(queries, h * dh, dh);
    Var<Real> k = tape.slice_cols(keys, h * dh, dh);
    Var<Real> v = tape.slice_cols(values, h * dh, dh);
    Var<Real> scores = tape.matmul(q, k, MatmulOptions{.transpose_b = true, .alpha = scale});
    heads.push_back(tape.matmul(tape.softmax_rows(scores, mask), v));
  }
  return tape.concat_cols(std::span<const Var<Real>>(heads));
}

template <RealScalar Real>
Var<Real> embed(Tape<Real>& tape, const TransformerModel<Real>& model, const TokenSequence& seq) {
  seq.validate();
  const ModelConfig& c = model.config();
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.token_ids[i] < 0 || seq.token_ids[i] >= c.vocab_size) {
      throw RangeError("embed: token id " + std::to_string(seq.token_ids[i]) + " outside vocab of " +
                       std::to_string(c.vocab_size));
    }
    if (seq.positions[i] < 0 || seq.positions[i] >= c.max_positions) {
      throw RangeError("embed: position " + std::to_string(seq.positions[i]) + " outside " +
                       std::to_string(c.max_positions) + " learned positions");
    }
  }
  Var<Real> tokens = tape.select_rows(bind_param(tape, model, param_names::kTokenEmbedding), seq.token_ids);
  Var<Real> positions = tape.select_rows(bind_param(tape, model, param_names::kPositionEmbedding), seq.positions);
  return tape.add(tokens, positions);
}

template <RealScalar Real>
Var<Real> attention(Tape<Real>& tape, const TransformerModel<Real>& model, Index layer,
                    const Var<Real>& h, std::span<const Index> positions,
                    std::span<const std::uint8_t> pad_mask) {
  auto name = [layer](std::string_view suffix) { return param_names::layer(layer, suffix); };
  const ModelConfig& c = model.config();
  if (h.cols() != c.d_model || static_cast<std::size_t>(h.rows()) != positions.size()) {
    throw ShapeError("attention: hidden " + shape_string(h.value()) + " for " +
                     std::to_string(positions.size()) + " positions at d_model " +
                     std::to_string(c.d_model));
  }
  Var<Real> q = dense(tape, model, h, name("W_Q"), name("b_Q"));
  Var<Real> k = dense(tape, model, h, name("W_K"), name("b_K"));
  Var<Real> v = dense(tape, model, h, name("W_V"), name("b_V"));
  auto mask = attention_mask(positions, positions, pad_mask, c.causal);
  Var<Real> heads = multi_head_attend(tape, c.n_heads, q, k, v, std::move(mask));
  return dense(tape, model, heads, name("W_O"), name("b_O"));
}

template <RealScalar Real>
Var<Real> norm(Tape<Real>& tape, const TransformerModel<Real>& model, Index layer, int which,
               const Var<Real>& h) {
  const std::string prefix = which == 1 ? "norm1" : "norm2";
  return tape.layer_norm(h, bind_param(tape, model, param_names::layer(layer, prefix + ".scale")),
                         bind_param(tape, model, param_names::layer(layer, prefix + ".shift")));
}

template <RealScalar Real>
Var<Real> feed_forward(Tape<Real>& tape, const TransformerModel<Real>& model, Index layer,
                       const Var<Real>& h) {
  auto name = [layer](std::string_view suffix) { return param_names::layer(layer, suffix); };
  Var<Real> hidden = tape.gelu(dense(tape, model, h, name("W1"), name("b1")));
  return dense(tape, model, hidden, name("W2"), name("b2"));
}

template <RealScalar Real>
Var<Real> layer_forward(Tape<Real>& tape, const TransformerModel<Real>& model, Index layer,
                        const Var<Real>& h, std::span<const Index> positions,
                        std::span<const std::uint8_t> pad_mask) {
  LayerTagScope<Real> tag(tape, static_cast<int>(layer));
  Var<Real> x = tape.add(h, attention(tape, model, layer, norm(tape, model, layer, 1, h), positions, pad_mask));
  return tape.add(x, feed_forward(tape, model, layer, norm(tape, model, layer, 2, x)));
}

template <RealScalar Real>
Var<Real> forward(Tape<Real>& tape, const TransformerModel<Real>& model, const TokenSequence& seq) {
  Var<Real> h = embed(tape, model, seq);
  for (Index l = 0; l < model.config().n_layers; ++l) {
    h = layer_forward(tape, model, l, h, seq.positions, seq.pad_mask);
  }
  return h;
}

template <RealScalar Real>
Var<Real> classifier_logits(Tape<Real>& tape, const TransformerModel<Real>& model,
                            const Var<Real>& pooled) {
  if (model.has_lm_head()) throw StateError("classifier head requested on a causal LM model");
  Var<Real> hidden = tape.gelu(dense(tape, model, pooled, param_names::kClsW1, param_names::kClsB1));
  return dense(tape, model, hidden, param_names::kClsW2, param_names::kClsB2);
}

template <RealScalar Real>
ClassOutput<Real> classify_pool_train(Tape<Real>& tape, const TransformerModel<Real>& model,
                                      const Var<Real>& h_selected) {
  if (h_selected.rows() == 0) throw ShapeError("classify_pool_train: k = 0 selected rows");
  Var<Real> logits = classifier_logits(tape, model, tape.mean_rows(h_selected));
  Matrix<Real> log_probs = log_softmax_rows(logits.value());
  return {std::move(logits), std::move(log_probs)};
}

template <RealScalar Real>
ClassOutput<Real> classify_pool_eval(Tape<Real>& tape, const TransformerModel<Real>& model,
                                     const Var<Real>& h_all,
                                     std::span<const std::uint8_t> pad_mask) {
  if (static_cast<std::size_t>(h_all.rows()) != pad_mask.size()) {
    throw ShapeError("classify_pool_eval: " + std::to_string(h_all.rows()) + " rows but " +
                     std::to_string(pad_mask.size()) + " pad flags");
  }
  std::vector<Index> rows;
  for (std::size_t i = 0; i < pad_mask.size(); ++i) {
    if (pad_mask[i]) rows.push_back(static_cast<Index>(i));
  }
  if (rows.empty()) throw ShapeError("classify_pool_eval: every position is padding");
  Var<Real> pooled = rows.size() == pad_mask.size() ? tape.mean_rows(h_all)
                                                    : tape.mean_rows(tape.select_rows(h_all, rows));
  Var<Real> logits = classifier_logits(tape, model, pooled);
  Matrix<Real> log_probs = log_softmax_rows(logits.value());
  return {std::move(logits), std::move(log_probs)};
}

template <RealScalar Real>
Var<Real> lm_logits(Tape<Real>& tape, const TransformerModel<Real>& model, const Var<Real>& h_rows) {
  if (!model.has_lm_head()) throw StateError("LM head requested on a classification model");
  return tape.matmul(h_rows, bind_param(tape, model, param_names::kLmHead));
}

#define TOKENTUNE_INSTANTIATE(Real)                                                              \
  template Matrix<Real> log_softmax_rows(const Matrix<Real>&);                                   \
  template Var<Real> bind_param(Tape<Real>&, const TransformerModel<Real>&, const std::string&);        \
  template Var<Real> dense(Tape<Real>&, const TransformerModel<Real>&, const Var<Real>&,          \
                           const std::string&, const std::string&);                               \
  template Var<Real> multi_head_attend(Tape<Real>&, Index, const Var<Real>&, const Var<Real>&,    \
                                       const Var<Real>&, std::shared_ptr<const Mask>);            \
  template Var<Real> embed(Tape<Real>&, const TransformerModel<Real>&, const TokenSequence&);     \
  template Var<Real> attention(Tape<Real>&, const TransformerModel<Real>&, Index, const Var<Real>&, \
                               std::span<const Index>, std::span<const std::uint8_t>);            \
  template Var<Real> norm(Tape<Real>&, const TransformerModel<Real>&, Index, int, const Var<Real>&); \
  template Var<Real> feed_forward(Tape<Real>&, const TransformerModel<Real>&, Index,              \
                                  const Var<Real>&);                                              \
  template Var<Real> layer_forward(Tape<Real>&, const TransformerModel<Real>&, Index,             \
                                   const Var<Real>&, std::span<const Index>,                      \
                                   std::span<const std::uint8_t>);                                \
  template Var<Real> forward(Tape<Real>&, const TransformerModel<Real>&, const TokenSequence&);   \
  template Var<Real> classifier_logits(Tape<Real>&, const TransformerModel<Real>&,                \
                                       const Var<Real>&);                                         \
  template ClassOutput<Real> classify_pool_train(Tape<Real>&, const TransformerModel<Real>&,      \
                                                 const Var<Real>&);                               \
  template ClassOutput<Real> classify_pool_eval(Tape<Real>&, const TransformerModel<Real>&,       \
                                                const Var<Real>&, std::span<const std::uint8_t>); \
  template Var<Real> lm_logits(Tape<Real>&, const TransformerModel<Real>&, const Var<Real>&);

TOKENTUNE_INSTANTIATE(float)
TOKENTUNE_INSTANTIATE(double)
TOKENTUNE_INSTANTIATE(long double)
#undef TOKENTUNE_INSTANTIATE

}  // namespace tokentune

// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

// Pre-norm transformer built only from autodiff primitives.
//
//   h <- h + W_O * MHA(norm1(h))
//   h <- h + W2 * gelu(W1 * norm2(h) + b1) + b2
//
// Position embeddings are indexed by each row's original position and the
// attention mask is built from original positions, so any reordering of
// rows (with positions and pad flags moved alongside) permutes the output
// rows the same way.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tokentune/autodiff.hpp"
#include "tokentune/matrix.hpp"

namespace tokentune {

struct ModelConfig {
  Index vocab_size = 257;
  Index max_positions = 128;
  Index d_model = 64;
  Index n_heads = 4;
  Index d_ff = 256;
  Index n_layers = 2;
  bool causal = false;  // true: decoder with LM head; false: encoder with classifier head
  Index n_classes = 2;
  double init_std = 0.02;

  Index head_dim() const { return d_model / n_heads; }
  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <RealScalar Real>
struct Parameter {
  std::string name;
  Matrix<Real> value;
  bool frozen = false;
};

/// Rank-r additive factors on a frozen base weight:
/// W_eff = W + scaling * A * B with A: d_in x r, B: r x d_out.
struct LoraAdapter {
  std::string target;
  std::string a_name;
  std::string b_name;
  Index rank = 0;
  double alpha = 0.0;
  double scaling = 0.0;
  bool merged = false;
};

/// Original-position bookkeeping for one input sequence. Row i of every
/// hidden matrix belongs to position `positions[i]`.
struct TokenSequence {
  std::vector<Index> token_ids;
  std::vector<Index> positions;
  std::vector<std::uint8_t> pad_mask;  // 1 = real token

  static TokenSequence from_ids(std::vector<Index> ids);
  std::size_t size() const noexcept { return token_ids.size(); }
  std::size_t unpadded_count() const;
  void validate() const;
};

template <RealScalar Real>
class TransformerModel {
 public:
  TransformerModel() = default;
  explicit TransformerModel(ModelConfig config);

  /// normal(0, init_std) weights; zero biases and norm shifts; unit norm scales.
  static TransformerModel initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  bool has_lm_head() const noexcept { return config_.causal; }

  const Parameter<Real>& param(const std::string& name) const;
  Parameter<Real>& param(const std::string& name);
  bool has_param(const std::string& name) const { return index_.contains(name); }
  const std::vector<Parameter<Real>>& params() const noexcept { return params_; }
  std::vector<Parameter<Real>>& params() noexcept { return params_; }
  void add_param(std::string name, Matrix<Real> value, bool frozen = false);

  void set_all_frozen(bool frozen);
  std::size_t parameter_elements() const;
  std::size_t trainable_elements() const;

  const std::map<std::string, LoraAdapter>& adapters() const noexcept { return adapters_; }
  std::map<std::string, LoraAdapter>& adapters() noexcept { return adapters_; }
  const LoraAdapter* adapter_for(const std::string& target) const;

  template <RealScalar Other>
  TransformerModel<Other> cast() const;

 private:
  template <RealScalar>
  friend class TransformerModel;

  ModelConfig config_;
  std::vector<Parameter<Real>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::map<std::string, LoraAdapter> adapters_;
};

/// Parameter naming, shared by checkpoints, adapters and gradient stores.
namespace param_names {
inline constexpr const char* kTokenEmbedding = "tok_emb";
inline constexpr const char* kPositionEmbedding = "pos_emb";
inline constexpr const char* kLmHead = "lm.W";
inline constexpr const char* kClsW1 = "cls.W1";
inline constexpr const char* kClsB1 = "cls.b1";
inline constexpr const char* kClsW2 = "cls.W2";
inline constexpr const char* kClsB2 = "cls.b2";
/// "layers.<layer>.<suffix>", e.g. layer(1, "W_Q").
std::string layer(Index layer, std::string_view suffix);
}  // namespace param_names

/// Class log-probabilities together with the logits node they came from.
template <RealScalar Real>
struct ClassOutput {
  Var<Real> logits;
  Matrix<Real> log_probs;
};

template <RealScalar Real>
Matrix<Real> log_softmax_rows(const Matrix<Real>& logits);

/// Mask for scores of queries against keys: key j is hidden from query i
/// when it is padding or, for causal models, when it lies in i's future.
std::shared_ptr<const Mask> attention_mask(std::span<const Index> query_positions,
                                           std::span<const Index> key_positions,
                                           std::span<const std::uint8_t> key_pad_mask,
                                           bool causal);

/// Parameter leaf on `tape` honoring the model's frozen flag.
template <RealScalar Real>
Var<Real> bind_param(Tape<Real>& tape, const TransformerModel<Real>& model, const std::string& name);

/// x * W (+ scaling * (x * A) * B when an unmerged adapter targets W) + b.
template <RealScalar Real>
Var<Real> dense(Tape<Real>& tape, const TransformerModel<Real>& model, const Var<Real>& x,
                const std::string& weight, const std::string& bias);

/// Scaled dot-product attention per head over precomputed projections.
template <RealScalar Real>
Var<Real> multi_head_attend(Tape<Real>& tape, Index n_heads, const Var<Real>& queries,
                            const Var<Real>& keys, const Var<Real>& values,
                            std::shared_ptr<const Mask> mask);

template <RealScalar Real>
Var<Real> embed(Tape<Real>& tape, const TransformerModel<Real>& model, const TokenSequence& seq);

template <RealScalar Real>
Var<Real> attention(Tape<Real>& tape, const TransformerModel<Real>& model, Index layer,
                    const Var<Real>& h, std::span<const Index> positions,
                    std::span<const std::uint8_t> pad_mask);

template <RealScalar Real>
Var<Real> feed_forward(Tape<Real>& tape, const TransformerModel<Real>& model, Index layer,
                       const Var<Real>& h);

template <RealScalar Real>
Var<Real> norm(Tape<Real>& tape, const TransformerModel<Real>& model, Index layer, int which,
               const Var<Real>& h);

template <RealScalar Real>
Var<Real> layer_forward(Tape<Real>& tape, const TransformerModel<Real>& model, Index layer,
                        const Var<Real>& h, std::span<const Index> positions,
                        std::span<const std::uint8_t> pad_mask);

/// Embedding plus every layer; rows in the sequence's storage order.
template <RealScalar Real>
Var<Real> forward(Tape<Real>& tape, const TransformerModel<Real>& model, const TokenSequence& seq);

template <RealScalar Real>
Var<Real> classifier_logits(Tape<Real>& tape, const TransformerModel<Real>& model,
                            const Var<Real>& pooled);

/// Mean of the k selected rows through the classifier MLP.
template <RealScalar Real>
ClassOutput<Real> classify_pool_train(Tape<Real>& tape, const TransformerModel<Real>& model,
                                      const Var<Real>& h_selected);

/// Mean of every unpadded row through the classifier MLP.
template <RealScalar Real>
ClassOutput<Real> classify_pool_eval(Tape<Real>& tape, const TransformerModel<Real>& model,
                                     const Var<Real>& h_all,
                                     std::span<const std::uint8_t> pad_mask);

template <RealScalar Real>
Var<Real> lm_logits(Tape<Real>& tape, const TransformerModel<Real>& model, const Var<Real>& h_rows);

extern template class TransformerModel<float>;
extern template class TransformerModel<double>;
extern template class TransformerModel<long double>;

}  // namespace tokentune

// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode differentiation over dense matrices.
//
// Every primitive records a Node on the Tape. A node that requires grad
// retains exactly the tensors its backward rule reads; everything else is
// released as soon as the caller drops its Var handles. The per-node ledger
// of retained tensors is what the memory profiler reports as activations.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tokentune/error.hpp"
#include "tokentune/matrix.hpp"
#include "tokentune/memory_ledger.hpp"

namespace tokentune {

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatmul,
  kAddBroadcast,
  kSoftmaxRows,
  kNonlinearity,
  kLayerNorm,
  kSelectRows,
  kConcatRows,
  kSliceCols,
  kConcatCols,
  kMeanRows,
  kCrossEntropy,
};

inline constexpr std::size_t kOpKindCount = 12;

const char* op_name(OpKind op);

using NodeId = std::uint32_t;
using Index = Eigen::Index;

/// 1 = attend, 0 = masked. Shape matches the score matrix it gates.
using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <RealScalar Real>
class Tape;

/// Handle to a recorded value. Holding a Var keeps its value alive; the tape
/// itself only keeps what backward needs.
template <RealScalar Real>
class Var {
 public:
  Var() = default;

  NodeId id() const noexcept { return id_; }
  bool requires_grad() const noexcept { return requires_grad_; }
  const Matrix<Real>& value() const { return *value_; }
  const Tensor<Real>& tensor() const noexcept { return value_; }
  Index rows() const { return value_->rows(); }
  Index cols() const { return value_->cols(); }
  bool valid() const noexcept { return value_ != nullptr; }

 private:
  friend class Tape<Real>;
  Var(NodeId id, Tensor<Real> value, bool requires_grad)
      : id_(id), value_(std::move(value)), requires_grad_(requires_grad) {}

  NodeId id_ = 0;
  Tensor<Real> value_;
  bool requires_grad_ = false;
};

/// Gradients keyed by parameter name. Frozen parameters never appear.
template <RealScalar Real>
class GradStore {
 public:
  using Map = std::map<std::string, Matrix<Real>>;

  bool contains(const std::string& name) const { return grads_.contains(name); }
  const Matrix<Real>& at(const std::string& name) const;
  Matrix<Real>* find(const std::string& name);
  const Matrix<Real>* find(const std::string& name) const;

  /// Adds into an existing entry or inserts a copy.
  void accumulate(const std::string& name, const Matrix<Real>& grad);
  void insert(const std::string& name, Matrix<Real> grad) { grads_[name] = std::move(grad); }
  void scale(Real factor);
  void clear() { grads_.clear(); }

  std::size_t size() const noexcept { return grads_.size(); }
  bool empty() const noexcept { return grads_.empty(); }
  std::size_t element_count() const;
  double l2_norm() const;
  std::vector<std::string> names() const;

  typename Map::const_iterator begin() const { return grads_.begin(); }
  typename Map::const_iterator end() const { return grads_.end(); }

 private:
  Map grads_;
};

/// One tensor retained for backward. `counted` is false for parameter
/// storage (already resident) and for tensors some earlier node retains.
template <RealScalar Real>
struct CachedTensor {
  const char* role = "";
  Tensor<Real> tensor;
  std::size_t elements = 0;
  bool counted = false;
};

template <RealScalar Real>
struct Node {
  NodeId id = 0;
  OpKind op = OpKind::kLeaf;
  std::vector<NodeId> inputs;
  std::vector<bool> input_requires_grad;
  bool requires_grad = false;
  int layer = -1;
  Index rows = 0;
  Index cols = 0;
  std::vector<CachedTensor<Real>> cached;

  // Leaves.
  std::string name;
  bool is_parameter = false;

  // Op attributes; only the fields relevant to `op` are meaningful.
  bool transpose_b = false;
  double alpha = 1.0;
  std::vector<Index> indices;
  std::vector<Index> extents;
  Index col_begin = 0;
  std::shared_ptr<const Mask> mask;
  std::vector<Index> targets;
  double eps = 0.0;

  std::size_t cached_elements() const {
    std::size_t total = 0;
    for (const auto& c : cached) {
      if (c.counted) total += c.elements;
    }
    return total;
  }
};

struct MatmulOptions {
  bool transpose_b = false;
  double alpha = 1.0;
};

template <RealScalar Real>
class Tape {
 public:
  explicit Tape(std::shared_ptr<MemoryLedger> ledger = std::make_shared<MemoryLedger>());

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Leaves ------------------------------------------------------------------

  /// Model parameter. Storage is borrowed and must outlive the tape; one
  /// leaf per name per tape.
  Var<Real> parameter(const std::string& name, const Matrix<Real>& value, bool trainable);

  /// Engine-owned data. With requires_grad its gradient is reported under
  /// `name`, otherwise the value is a constant.
  Var<Real> input(const std::string& name, Matrix<Real> value, bool requires_grad);
  Var<Real> constant(Matrix<Real> value);

  /// Stop-gradient: a new constant leaf sharing `x`'s storage.
  Var<Real> detach(const Var<Real>& x);

  // Primitives ----------------------------------------------------------------

  // caches: a if b needs grad, b if a needs grad.
  Var<Real> matmul(const Var<Real>& a, const Var<Real>& b, MatmulOptions options = {});
  // caches: nothing. b is either a's shape or a single row.
  Var<Real> add(const Var<Real>& a, const Var<Real>& b);
  // caches: output. mask (optional) zeroes disallowed entries.
  Var<Real> softmax_rows(const Var<Real>& x, std::shared_ptr<const Mask> mask = nullptr);
  // caches: input.
  Var<Real> gelu(const Var<Real>& x);
  // caches: normalized input and per-row inverse std; gamma when x needs grad.
  Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta,
                       double eps = 1e-5);
  // caches: nothing (indices are metadata).
  Var<Real> select_rows(const Var<Real>& x, std::span<const Index> rows);
  Var<Real> concat_rows(std::span<const Var<Real>> parts);
  Var<Real> slice_cols(const Var<Real>& x, Index begin, Index count);
  Var<Real> concat_cols(std::span<const Var<Real>> parts);
  Var<Real> mean_rows(const Var<Real>& x);
  // caches: softmax probabilities. Returns weight * sum_i -log p_i[target_i].
  Var<Real> cross_entropy(const Var<Real>& logits, std::span<const Index> targets,
                          double weight = 1.0);

  // Backward ------------------------------------------------------------------

  /// Reverse sweep from a 1x1 loss. Releases every cache; a tape supports
  /// one backward.
  GradStore<Real> backward(const Var<Real>& loss);

  // Scopes --------------------------------------------------------------------

  bool grad_enabled() const noexcept { return grad_scope_.empty() || grad_scope_.back(); }
  void push_grad_mode(bool enabled) { grad_scope_.push_back(enabled); }
  void pop_grad_mode();
  std::size_t grad_scope_depth() const noexcept { return grad_scope_.size(); }

  int layer_tag() const noexcept { return layer_tag_; }
  void set_layer_tag(int layer) noexcept { layer_tag_ = layer; }

  // Introspection ---------------------------------------------------------------

  const std::vector<Node<Real>>& nodes() const noexcept { return nodes_; }
  const Node<Real>& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool backward_done() const noexcept { return backward_done_; }
  const std::shared_ptr<MemoryLedger>& ledger() const noexcept { return ledger_; }

  std::size_t cached_activation_elements() const;
  std::size_t cached_elements_for_layer(int layer) const;
  std::size_t cached_elements_for_op(OpKind op) const;

 private:
  Var<Real> record(Node<Real> node, Matrix<Real>&& value);
  Node<Real> make_node(OpKind op, std::initializer_list<const Var<Real>*> inputs);
  void retain(Node<Real>& node, const char* role, const Var<Real>& source);
  void retain_owned(Node<Real>& node, const char* role, Matrix<Real>&& value);
  void check_finite(const Node<Real>& node, const Matrix<Real>& value) const;
  void accumulate(std::vector<std::optional<Matrix<Real>>>& grads, NodeId id,
                  Matrix<Real>&& contribution);
  void propagate(const Node<Real>& node, const Matrix<Real>& grad_out,
                 std::vector<std::optional<Matrix<Real>>>& grads);

  std::shared_ptr<MemoryLedger> ledger_;
  std::vector<Node<Real>> nodes_;
  std::vector<bool> grad_scope_;
  std::unordered_map<std::string, NodeId> parameter_ids_;
  std::unordered_set<const void*> retained_sources_;
  int layer_tag_ = -1;
  bool backward_done_ = false;
};

/// Disables gradient tracking on a tape for its lifetime.
template <RealScalar Real>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<Real>& tape) : tape_(tape) { tape_.push_grad_mode(false); }
  ~NoGradGuard() { tape_.pop_grad_mode(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<Real>& tape_;
};

/// Re-enables tracking inside a disabled region.
template <RealScalar Real>
class EnableGradGuard {
 public:
  explicit EnableGradGuard(Tape<Real>& tape) : tape_(tape) { tape_.push_grad_mode(true); }
  ~EnableGradGuard() { tape_.pop_grad_mode(); }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  Tape<Real>& tape_;
};

/// Tags nodes recorded in its lifetime with a layer index.
template <RealScalar Real>
class LayerTagScope {
 public:
  LayerTagScope(Tape<Real>& tape, int layer) : tape_(tape), previous_(tape.layer_tag()) {
    tape_.set_layer_tag(layer);
  }
  ~LayerTagScope() { tape_.set_layer_tag(previous_); }
  LayerTagScope(const LayerTagScope&) = delete;
  LayerTagScope& operator=(const LayerTagScope&) = delete;

 private:
  Tape<Real>& tape_;
  int previous_;
};

template <RealScalar Real, class Body>
decltype(auto) with_grad_disabled(Tape<Real>& tape, Body&& body) {
  NoGradGuard<Real> guard(tape);
  return std::forward<Body>(body)();
}

extern template class Tape<float>;
extern template class Tape<double>;
extern template class GradStore<float>;
extern template class GradStore<double>;
extern template class Tape<long double>;
extern template class GradStore<long double>;

}  // namespace tokentune

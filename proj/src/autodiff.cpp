// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/autodiff.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace tokentune {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kState: return "state";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kRange: return "range";
  }
  return "unknown";
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAddBroadcast: return "add-broadcast";
    case OpKind::kSoftmaxRows: return "rowwise-softmax";
    case OpKind::kNonlinearity: return "elementwise-nonlinearity";
    case OpKind::kLayerNorm: return "layer-normalize";
    case OpKind::kSelectRows: return "row-select";
    case OpKind::kConcatRows: return "concat-rows";
    case OpKind::kSliceCols: return "slice-cols";
    case OpKind::kConcatCols: return "concat-cols";
    case OpKind::kMeanRows: return "mean-rows";
    case OpKind::kCrossEntropy: return "cross-entropy";
  }
  return "unknown";
}

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;

std::string shapes_message(const char* op, Index ar, Index ac, Index br, Index bc,
                           const char* what) {
  std::ostringstream out;
  out << op << ": " << what << " (" << shape_string(ar, ac) << " vs " << shape_string(br, bc)
      << ")";
  return out.str();
}

template <RealScalar Real>
Real gelu_value(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x * static_cast<Real>(kInvSqrt2)));
}

template <RealScalar Real>
Real gelu_derivative(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x * static_cast<Real>(kInvSqrt2)));
  const Real pdf =
      std::exp(Real(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<Real> * static_cast<Real>(kInvSqrt2);
  return cdf + x * pdf;
}

}  // namespace

// GradStore -------------------------------------------------------------------

template <RealScalar Real>
const Matrix<Real>& GradStore<Real>::at(const std::string& name) const {
  auto it = grads_.find(name);
  if (it == grads_.end()) throw StateError("no gradient for parameter '" + name + "'");
  return it->second;
}

template <RealScalar Real>
Matrix<Real>* GradStore<Real>::find(const std::string& name) {
  auto it = grads_.find(name);
  return it == grads_.end() ? nullptr : &it->second;
}

template <RealScalar Real>
const Matrix<Real>* GradStore<Real>::find(const std::string& name) const {
  auto it = grads_.find(name);
  return it == grads_.end() ? nullptr : &it->second;
}

template <RealScalar Real>
void GradStore<Real>::accumulate(const std::string& name, const Matrix<Real>& grad) {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    grads_.emplace(name, grad);
    return;
  }
  if (it->second.rows() != grad.rows() || it->second.cols() != grad.cols()) {
    throw ShapeError("gradient accumulate '" + name + "': " + shape_string(it->second) + " vs " +
                     shape_string(grad));
  }
  it->second += grad;
}

template <RealScalar Real>
void GradStore<Real>::scale(Real factor) {
  for (auto& [name, g] : grads_) g *= factor;
}

template <RealScalar Real>
std::size_t GradStore<Real>::element_count() const {
  std::size_t total = 0;
  for (const auto& [name, g] : grads_) total += static_cast<std::size_t>(g.size());
  return total;
}

template <RealScalar Real>
double GradStore<Real>::l2_norm() const {
  double sum = 0.0;
  for (const auto& [name, g] : grads_) sum += g.template cast<double>().squaredNorm();
  return std::sqrt(sum);
}

template <RealScalar Real>
std::vector<std::string> GradStore<Real>::names() const {
  std::vector<std::string> out;
  out.reserve(grads_.size());
  for (const auto& [name, g] : grads_) out.push_back(name);
  return out;
}

// Tape: recording -------------------------------------------------------------

template <RealScalar Real>
Tape<Real>::Tape(std::shared_ptr<MemoryLedger> ledger) : ledger_(std::move(ledger)) {}

template <RealScalar Real>
void Tape<Real>::pop_grad_mode() {
  if (grad_scope_.empty()) throw StateError("grad scope stack underflow");
  grad_scope_.pop_back();
}

template <RealScalar Real>
Node<Real> Tape<Real>::make_node(OpKind op, std::initializer_list<const Var<Real>*> inputs) {
  if (backward_done_) throw StateError(std::string(op_name(op)) + ": tape already consumed by backward");
  Node<Real> node;
  node.op = op;
  bool any = false;
  for (const Var<Real>* v : inputs) {
    if (!v->valid()) throw StateError(std::string(op_name(op)) + ": invalid input handle");
    node.inputs.push_back(v->id());
    node.input_requires_grad.push_back(v->requires_grad());
    any = any || v->requires_grad();
  }
  node.requires_grad = any && grad_enabled();
  return node;
}

template <RealScalar Real>
void Tape<Real>::check_finite(const Node<Real>& node, const Matrix<Real>& value) const {
  if (!value.allFinite()) {
    throw NumericError(std::string(op_name(node.op)) + ": non-finite output (" +
                       shape_string(value) + ")");
  }
}

template <RealScalar Real>
Var<Real> Tape<Real>::record(Node<Real> node, Matrix<Real>&& value) {
  check_finite(node, value);
  node.id = static_cast<NodeId>(nodes_.size());
  node.layer = layer_tag_;
  node.rows = value.rows();
  node.cols = value.cols();
  const bool rg = node.requires_grad;
  const NodeId id = node.id;
  // Outputs that backward reads are retained by the caller before this.
  Tensor<Real> tensor = make_tracked(ledger_, std::move(value));
  nodes_.push_back(std::move(node));
  return Var<Real>(id, std::move(tensor), rg);
}

template <RealScalar Real>
void Tape<Real>::retain(Node<Real>& node, const char* role, const Var<Real>& source) {
  const Node<Real>& src = nodes_.at(source.id());
  const bool resident = src.op == OpKind::kLeaf && src.is_parameter;
  const bool fresh = retained_sources_.insert(source.tensor().get()).second;
  node.cached.push_back(CachedTensor<Real>{role, source.tensor(),
                                           static_cast<std::size_t>(source.value().size()),
                                           fresh && !resident});
}

template <RealScalar Real>
void Tape<Real>::retain_owned(Node<Real>& node, const char* role, Matrix<Real>&& value) {
  const auto elements = static_cast<std::size_t>(value.size());
  Tensor<Real> tensor = make_tracked(ledger_, std::move(value));
  retained_sources_.insert(tensor.get());
  node.cached.push_back(CachedTensor<Real>{role, std::move(tensor), elements, true});
}

template <RealScalar Real>
Var<Real> Tape<Real>::parameter(const std::string& name, const Matrix<Real>& value,
                                bool trainable) {
  if (auto it = parameter_ids_.find(name); it != parameter_ids_.end()) {
    const Node<Real>& existing = nodes_[it->second];
    return Var<Real>(existing.id, make_borrowed(value), existing.requires_grad);
  }
  if (backward_done_) throw StateError("parameter: tape already consumed by backward");
  Node<Real> node;
  node.op = OpKind::kLeaf;
  node.name = name;
  node.is_parameter = true;
  node.requires_grad = trainable;
  node.id = static_cast<NodeId>(nodes_.size());
  node.layer = layer_tag_;
  node.rows = value.rows();
  node.cols = value.cols();
  parameter_ids_.emplace(name, node.id);
  nodes_.push_back(std::move(node));
  return Var<Real>(nodes_.back().id, make_borrowed(value), trainable);
}

template <RealScalar Real>
Var<Real> Tape<Real>::input(const std::string& name, Matrix<Real> value, bool requires_grad) {
  Node<Real> node = make_node(OpKind::kLeaf, {});
  node.name = name;
  node.requires_grad = requires_grad;
  return record(std::move(node), std::move(value));
}

template <RealScalar Real>
Var<Real> Tape<Real>::constant(Matrix<Real> value) {
  return input("", std::move(value), false);
}

template <RealScalar Real>
Var<Real> Tape<Real>::detach(const Var<Real>& x) {
  Node<Real> node = make_node(OpKind::kLeaf, {});
  node.id = static_cast<NodeId>(nodes_.size());
  node.layer = layer_tag_;
  node.rows = x.rows();
  node.cols = x.cols();
  nodes_.push_back(std::move(node));
  return Var<Real>(nodes_.back().id, x.tensor(), false);
}

// Tape: primitives ------------------------------------------------------------

template <RealScalar Real>
Var<Real> Tape<Real>::matmul(const Var<Real>& a, const Var<Real>& b, MatmulOptions options) {
  Node<Real> node = make_node(OpKind::kMatmul, {&a, &b});
  const Index inner_b = options.transpose_b ? b.cols() : b.rows();
  if (a.cols() != inner_b) {
    throw ShapeError(shapes_message("matmul", a.rows(), a.cols(), b.rows(), b.cols(),
                                    options.transpose_b ? "inner dimensions differ (b transposed)"
                                                        : "inner dimensions differ"));
  }
  node.transpose_b = options.transpose_b;
  node.alpha = options.alpha;
  const Real alpha = static_cast<Real>(options.alpha);
  Matrix<Real> out(a.rows(), options.transpose_b ? b.rows() : b.cols());
  if (options.transpose_b) {
    out.noalias() = alpha * a.value() * b.value().transpose();
  } else {
    out.noalias() = alpha * a.value() * b.value();
  }
  if (node.requires_grad) {
    if (a.requires_grad()) retain(node, "b", b);
    if (b.requires_grad()) retain(node, "a", a);
  }
  return record(std::move(node), std::move(out));
}

template <RealScalar Real>
Var<Real> Tape<Real>::add(const Var<Real>& a, const Var<Real>& b) {
  Node<Real> node = make_node(OpKind::kAddBroadcast, {&a, &b});
  const bool same = a.rows() == b.rows() && a.cols() == b.cols();
  const bool row = b.rows() == 1 && a.cols() == b.cols();
  if (!same && !row) {
    throw ShapeError(shapes_message("add-broadcast", a.rows(), a.cols(), b.rows(), b.cols(),
                                    "operand must match or be a single row"));
  }
  Matrix<Real> out = a.value();
  if (same) {
    out += b.value();
  } else {
    out.rowwise() += b.value().row(0);
  }
  return record(std::move(node), std::move(out));
}

template <RealScalar Real>
Var<Real> Tape<Real>::softmax_rows(const Var<Real>& x, std::shared_ptr<const Mask> mask) {
  Node<Real> node = make_node(OpKind::kSoftmaxRows, {&x});
  if (mask && (mask->rows() != x.rows() || mask->cols() != x.cols())) {
    throw ShapeError(shapes_message("rowwise-softmax", x.rows(), x.cols(), mask->rows(),
                                    mask->cols(), "mask shape differs"));
  }
  const Matrix<Real>& in = x.value();
  Matrix<Real> out(in.rows(), in.cols());
  for (Index i = 0; i < in.rows(); ++i) {
    Real max = -std::numeric_limits<Real>::infinity();
    for (Index j = 0; j < in.cols(); ++j) {
      if (!mask || (*mask)(i, j)) max = std::max(max, in(i, j));
    }
    if (max == -std::numeric_limits<Real>::infinity()) {
      out.row(i).setZero();
      continue;
    }
    Real sum = 0;
    for (Index j = 0; j < in.cols(); ++j) {
      const Real e = (!mask || (*mask)(i, j)) ? std::exp(in(i, j) - max) : Real(0);
      out(i, j) = e;
      sum += e;
    }
    out.row(i) /= sum;
  }
  node.mask = std::move(mask);
  Var<Real> result = record(std::move(node), std::move(out));
  Node<Real>& recorded = nodes_.back();
  if (recorded.requires_grad) retain(recorded, "output", result);
  return result;
}

template <RealScalar Real>
Var<Real> Tape<Real>::gelu(const Var<Real>& x) {
  Node<Real> node = make_node(OpKind::kNonlinearity, {&x});
  Matrix<Real> out = x.value().unaryExpr([](Real v) { return gelu_value(v); });
  if (node.requires_grad) retain(node, "input", x);
  return record(std::move(node), std::move(out));
}

template <RealScalar Real>
Var<Real> Tape<Real>::layer_norm(const Var<Real>& x, const Var<Real>& gamma,
                                 const Var<Real>& beta, double eps) {
  Node<Real> node = make_node(OpKind::kLayerNorm, {&x, &gamma, &beta});
  for (const Var<Real>* p : {&gamma, &beta}) {
    if (p->rows() != 1 || p->cols() != x.cols()) {
      throw ShapeError(shapes_message("layer-normalize", x.rows(), x.cols(), p->rows(), p->cols(),
                                      "scale/shift must be one row of width cols(x)"));
    }
  }
  node.eps = eps;
  const Matrix<Real>& in = x.value();
  const Index rows = in.rows();
  const Index cols = in.cols();
  Matrix<Real> normalized(rows, cols);
  Matrix<Real> inv_std(rows, 1);
  for (Index i = 0; i < rows; ++i) {
    const Real mean = in.row(i).mean();
    const Real var = (in.row(i).array() - mean).square().mean();
    const Real rstd = Real(1) / std::sqrt(var + static_cast<Real>(eps));
    normalized.row(i) = (in.row(i).array() - mean) * rstd;
    inv_std(i, 0) = rstd;
  }
  Matrix<Real> out(rows, cols);
  out = (normalized.array().rowwise() * gamma.value().row(0).array()).rowwise() +
        beta.value().row(0).array();
  if (node.requires_grad) {
    if (x.requires_grad() || gamma.requires_grad()) retain_owned(node, "normalized", std::move(normalized));
    if (x.requires_grad()) {
      retain_owned(node, "inv_std", std::move(inv_std));
      retain(node, "gamma", gamma);
    }
  }
  return record(std::move(node), std::move(out));
}

template <RealScalar Real>
Var<Real> Tape<Real>::select_rows(const Var<Real>& x, std::span<const Index> rows) {
  Node<Real> node = make_node(OpKind::kSelectRows, {&x});
  Matrix<Real> out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) {
      throw RangeError("row-select: index " + std::to_string(rows[i]) + " outside " +
                       shape_string(x.value()));
    }
    out.row(static_cast<Index>(i)) = x.value().row(rows[i]);
  }
  node.indices.assign(rows.begin(), rows.end());
  node.extents = {x.rows()};
  return record(std::move(node), std::move(out));
}

template <RealScalar Real>
Var<Real> Tape<Real>::concat_rows(std::span<const Var<Real>> parts) {
  if (parts.empty()) throw ShapeError("concat-rows: no operands");
  Node<Real> node = make_node(OpKind::kConcatRows, {});
  const Index cols = parts[0].cols();
  Index total = 0;
  bool any = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError(shapes_message("concat-rows", parts[0].rows(), cols, p.rows(), p.cols(),
                                      "column counts differ"));
    }
    node.inputs.push_back(p.id());
    node.input_requires_grad.push_back(p.requires_grad());
    node.extents.push_back(p.rows());
    any = any || p.requires_grad();
    total += p.rows();
  }
  node.requires_grad = any && grad_enabled();
  Matrix<Real> out(total, cols);
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  return record(std::move(node), std::move(out));
}

template <RealScalar Real>
Var<Real> Tape<Real>::slice_cols(const Var<Real>& x, Index begin, Index count) {
  Node<Real> node = make_node(OpKind::kSliceCols, {&x});
  if (begin < 0 || count < 0 || begin + count > x.cols()) {
    throw RangeError("slice-cols: columns [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + shape_string(x.value()));
  }
  node.col_begin = begin;
  node.extents = {x.cols()};
  Matrix<Real> out = x.value().middleCols(begin, count);
  return record(std::move(node), std::move(out));
}

template <RealScalar Real>
Var<Real> Tape<Real>::concat_cols(std::span<const Var<Real>> parts) {
  if (parts.empty()) throw ShapeError("concat-cols: no operands");
  Node<Real> node = make_node(OpKind::kConcatCols, {});
  const Index rows = parts[0].rows();
  Index total = 0;
  bool any = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError(shapes_message("concat-cols", rows, parts[0].cols(), p.rows(), p.cols(),
                                      "row counts differ"));
    }
    node.inputs.push_back(p.id());
    node.input_requires_grad.push_back(p.requires_grad());
    node.extents.push_back(p.cols());
    any = any || p.requires_grad();
    total += p.cols();
  }
  node.requires_grad = any && grad_enabled();
  Matrix<Real> out(rows, total);
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return record(std::move(node), std::move(out));
}

template <RealScalar Real>
Var<Real> Tape<Real>::mean_rows(const Var<Real>& x) {
  Node<Real> node = make_node(OpKind::kMeanRows, {&x});
  if (x.rows() == 0) throw ShapeError("mean-rows: input has no rows");
  node.extents = {x.rows()};
  Matrix<Real> out = x.value().colwise().mean();
  return record(std::move(node), std::move(out));
}

template <RealScalar Real>
Var<Real> Tape<Real>::cross_entropy(const Var<Real>& logits, std::span<const Index> targets,
                                    double weight) {
  Node<Real> node = make_node(OpKind::kCrossEntropy, {&logits});
  if (static_cast<Index>(targets.size()) != logits.rows()) {
    throw ShapeError(shapes_message("cross-entropy", logits.rows(), logits.cols(),
                                    static_cast<Index>(targets.size()), 1,
                                    "one target per row required"));
  }
  const Matrix<Real>& z = logits.value();
  Matrix<Real> probs(z.rows(), z.cols());
  Real total = 0;
  for (Index i = 0; i < z.rows(); ++i) {
    const Index t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= z.cols()) {
      throw RangeError("cross-entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(z.cols()) + ")");
    }
    const Real max = z.row(i).maxCoeff();
    probs.row(i) = (z.row(i).array() - max).exp();
    const Real sum = probs.row(i).sum();
    probs.row(i) /= sum;
    total += (std::log(sum) + max) - z(i, t);
  }
  node.targets.assign(targets.begin(), targets.end());
  node.alpha = weight;
  Matrix<Real> out(1, 1);
  out(0, 0) = static_cast<Real>(weight) * total;
  if (node.requires_grad) retain_owned(node, "probabilities", std::move(probs));
  return record(std::move(node), std::move(out));
}

// Tape: backward ----------------------------------------------------------------

template <RealScalar Real>
void Tape<Real>::accumulate(std::vector<std::optional<Matrix<Real>>>& grads, NodeId id,
                            Matrix<Real>&& contribution) {
  auto& slot = grads[id];
  if (slot) {
    *slot += contribution;
  } else {
    ledger_->acquire(byte_count(contribution));
    slot = std::move(contribution);
  }
}

template <RealScalar Real>
void Tape<Real>::propagate(const Node<Real>& node, const Matrix<Real>& g,
                           std::vector<std::optional<Matrix<Real>>>& grads) {
  auto wants = [&](std::size_t i) { return static_cast<bool>(node.input_requires_grad[i]); };
  auto cached = [&](const char* role) -> const Matrix<Real>& {
    for (const auto& c : node.cached) {
      if (std::string_view(c.role) == role) return *c.tensor;
    }
    throw StateError(std::string(op_name(node.op)) + ": missing cached '" + role + "'");
  };

  switch (node.op) {
    case OpKind::kLeaf:
      return;
    case OpKind::kMatmul: {
      const Real alpha = static_cast<Real>(node.alpha);
      if (wants(0)) {
        const Matrix<Real>& b = cached("b");
        Matrix<Real> da(g.rows(), node.transpose_b ? b.cols() : b.rows());
        if (node.transpose_b) {
          da.noalias() = alpha * g * b;
        } else {
          da.noalias() = alpha * g * b.transpose();
        }
        accumulate(grads, node.inputs[0], std::move(da));
      }
      if (wants(1)) {
        const Matrix<Real>& a = cached("a");
        Matrix<Real> db;
        if (node.transpose_b) {
          db.noalias() = alpha * g.transpose() * a;
        } else {
          db.noalias() = alpha * a.transpose() * g;
        }
        accumulate(grads, node.inputs[1], std::move(db));
      }
      return;
    }
    case OpKind::kAddBroadcast: {
      if (wants(0)) accumulate(grads, node.inputs[0], Matrix<Real>(g));
      if (wants(1)) {
        const Node<Real>& b = nodes_[node.inputs[1]];
        if (b.rows == g.rows()) {
          accumulate(grads, node.inputs[1], Matrix<Real>(g));
        } else {
          accumulate(grads, node.inputs[1], Matrix<Real>(g.colwise().sum()));
        }
      }
      return;
    }
    case OpKind::kSoftmaxRows: {
      const Matrix<Real>& y = cached("output");
      Matrix<Real> dx = y.cwiseProduct(g);
      const auto dot = dx.rowwise().sum().eval();
      dx -= (y.array().colwise() * dot.array()).matrix();
      accumulate(grads, node.inputs[0], std::move(dx));
      return;
    }
    case OpKind::kNonlinearity: {
      const Matrix<Real>& x = cached("input");
      Matrix<Real> dx = g.cwiseProduct(x.unaryExpr([](Real v) { return gelu_derivative(v); }));
      accumulate(grads, node.inputs[0], std::move(dx));
      return;
    }
    case OpKind::kLayerNorm: {
      if (wants(1)) {
        const Matrix<Real>& xhat = cached("normalized");
        accumulate(grads, node.inputs[1], Matrix<Real>(g.cwiseProduct(xhat).colwise().sum()));
      }
      if (wants(2)) accumulate(grads, node.inputs[2], Matrix<Real>(g.colwise().sum()));
      if (wants(0)) {
        const Matrix<Real>& xhat = cached("normalized");
        const Matrix<Real>& rstd = cached("inv_std");
        const Matrix<Real>& gamma = cached("gamma");
        Matrix<Real> dxhat = (g.array().rowwise() * gamma.row(0).array()).matrix();
        Matrix<Real> dx(g.rows(), g.cols());
        const Real inv_cols = Real(1) / static_cast<Real>(g.cols());
        for (Index i = 0; i < g.rows(); ++i) {
          const Real mean_d = dxhat.row(i).sum() * inv_cols;
          const Real mean_dx = dxhat.row(i).dot(xhat.row(i)) * inv_cols;
          dx.row(i) = rstd(i, 0) *
                      (dxhat.row(i).array() - mean_d - xhat.row(i).array() * mean_dx).matrix();
        }
        accumulate(grads, node.inputs[0], std::move(dx));
      }
      return;
    }
    case OpKind::kSelectRows: {
      Matrix<Real> dx = Matrix<Real>::Zero(node.extents[0], g.cols());
      for (std::size_t i = 0; i < node.indices.size(); ++i) {
        dx.row(node.indices[i]) += g.row(static_cast<Index>(i));
      }
      accumulate(grads, node.inputs[0], std::move(dx));
      return;
    }
    case OpKind::kConcatRows: {
      Index offset = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        if (wants(i)) {
          accumulate(grads, node.inputs[i], Matrix<Real>(g.middleRows(offset, node.extents[i])));
        }
        offset += node.extents[i];
      }
      return;
    }
    case OpKind::kSliceCols: {
      Matrix<Real> dx = Matrix<Real>::Zero(g.rows(), node.extents[0]);
      dx.middleCols(node.col_begin, g.cols()) = g;
      accumulate(grads, node.inputs[0], std::move(dx));
      return;
    }
    case OpKind::kConcatCols: {
      Index offset = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        if (wants(i)) {
          accumulate(grads, node.inputs[i], Matrix<Real>(g.middleCols(offset, node.extents[i])));
        }
        offset += node.extents[i];
      }
      return;
    }
    case OpKind::kMeanRows: {
      const Index rows = node.extents[0];
      Matrix<Real> dx = g.replicate(rows, 1) / static_cast<Real>(rows);
      accumulate(grads, node.inputs[0], std::move(dx));
      return;
    }
    case OpKind::kCrossEntropy: {
      const Matrix<Real>& p = cached("probabilities");
      Matrix<Real> dz = p;
      for (std::size_t i = 0; i < node.targets.size(); ++i) {
        dz(static_cast<Index>(i), node.targets[i]) -= Real(1);
      }
      dz *= static_cast<Real>(node.alpha) * g(0, 0);
      accumulate(grads, node.inputs[0], std::move(dz));
      return;
    }
  }
}

template <RealScalar Real>
GradStore<Real> Tape<Real>::backward(const Var<Real>& loss) {
  if (backward_done_) throw StateError("backward: tape already consumed; record the computation again");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("backward: loss must be 1x1, got " + shape_string(loss.value()));
  }
  if (!loss.requires_grad()) throw StateError("backward: loss does not require grad");

  std::vector<std::optional<Matrix<Real>>> grads(nodes_.size());
  accumulate(grads, loss.id(), Matrix<Real>::Ones(1, 1));

  GradStore<Real> store;
  for (std::int64_t i = loss.id(); i >= 0; --i) {
    const auto id = static_cast<NodeId>(i);
    const Node<Real>& node = nodes_[id];
    auto& slot = grads[id];
    if (node.op == OpKind::kLeaf) {
      if (node.requires_grad && !node.name.empty()) {
        if (slot) {
          ledger_->release(byte_count(*slot));
          store.accumulate(node.name, *slot);
        } else {
          store.accumulate(node.name, Matrix<Real>::Zero(node.rows, node.cols));
        }
      }
    } else if (slot && node.requires_grad) {
      propagate(node, *slot, grads);
      ledger_->release(byte_count(*slot));
    } else if (slot) {
      ledger_->release(byte_count(*slot));
    }
    slot.reset();
  }

  for (auto& node : nodes_) node.cached.clear();
  retained_sources_.clear();
  backward_done_ = true;
  return store;
}

// Tape: accounting ------------------------------------------------------------

template <RealScalar Real>
std::size_t Tape<Real>::cached_activation_elements() const {
  std::size_t total = 0;
  for (const auto& node : nodes_) total += node.cached_elements();
  return total;
}

template <RealScalar Real>
std::size_t Tape<Real>::cached_elements_for_layer(int layer) const {
  std::size_t total = 0;
  for (const auto& node : nodes_) {
    if (node.layer == layer) total += node.cached_elements();
  }
  return total;
}

template <RealScalar Real>
std::size_t Tape<Real>::cached_elements_for_op(OpKind op) const {
  std::size_t total = 0;
  for (const auto& node : nodes_) {
    if (node.op == op) total += node.cached_elements();
  }
  return total;
}

template class Tape<float>;
template class Tape<double>;
template class GradStore<float>;
template class GradStore<double>;
template class Tape<long double>;
template class GradStore<long double>;

}  // namespace tokentune

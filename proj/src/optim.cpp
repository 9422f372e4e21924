// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/optim.hpp"

#include <cmath>

namespace tokentune {

void AdamConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train.lr", "must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train.eps", "must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
}

template <RealScalar Real>
AdamState<Real>::AdamState(const TransformerModel<Real>& model, AdamConfig cfg)
    : config(cfg) {
  config.validate();
  for (const auto& p : model.params()) {
    if (p.frozen) continue;
    m.emplace(p.name, Matrix<Real>::Zero(p.value.rows(), p.value.cols()));
    v.emplace(p.name, Matrix<Real>::Zero(p.value.rows(), p.value.cols()));
  }
}

template <RealScalar Real>
std::size_t AdamState<Real>::element_count() const {
  std::size_t total = 0;
  for (const auto& [name, x] : m) total += static_cast<std::size_t>(x.size());
  for (const auto& [name, x] : v) total += static_cast<std::size_t>(x.size());
  return total;
}

template <RealScalar Real>
void adam_step(TransformerModel<Real>& model, const GradStore<Real>& grads, AdamState<Real>& state) {
  for (const auto& [name, g] : grads) {
    if (!model.has_param(name)) throw StateError("adam_step: gradient for unknown parameter " + name);
    const auto& p = model.param(name);
    if (g.rows() != p.value.rows() || g.cols() != p.value.cols()) {
      throw ShapeError("adam_step: gradient for " + name + " is " + shape_string(g) +
                       ", parameter is " + shape_string(p.value));
    }
    if (!g.allFinite()) throw NumericError("adam_step: non-finite gradient for parameter " + name);
  }

  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const Real b1 = static_cast<Real>(c.beta1);
  const Real b2 = static_cast<Real>(c.beta2);
  const Real correction1 = static_cast<Real>(1.0 - std::pow(c.beta1, t));
  const Real correction2 = static_cast<Real>(1.0 - std::pow(c.beta2, t));
  const Real lr = static_cast<Real>(c.learning_rate);
  const Real eps = static_cast<Real>(c.eps);
  const Real decay = static_cast<Real>(c.learning_rate * c.weight_decay);

  for (auto& p : model.params()) {
    if (p.frozen) continue;
    auto& m = state.m.at(p.name);
    auto& v = state.v.at(p.name);
    if (const Matrix<Real>* g = grads.find(p.name)) {
      m.array() = b1 * m.array() + (Real{1} - b1) * g->array();
      v.array() = b2 * v.array() + (Real{1} - b2) * g->array().square();
    } else {
      m *= b1;
      v *= b2;
    }
    if (decay != Real{0}) p.value.array() -= decay * p.value.array();
    p.value.array() -=
        lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + eps);
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(TransformerModel<float>&, const GradStore<float>&, AdamState<float>&);
template void adam_step(TransformerModel<double>&, const GradStore<double>&, AdamState<double>&);

}  // namespace tokentune

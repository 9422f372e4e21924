// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/adapters.hpp"

#include <algorithm>
#include <array>
#include <random>

namespace tokentune {

namespace {
constexpr std::array<const char*, 6> kAdaptable{"W_Q", "W_K", "W_V", "W_O", "W1", "W2"};
}  // namespace

void AdapterConfig::validate() const {
  if (rank < 1) throw ConfigError("lora.rank", "must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("lora.alpha", "must be > 0");
  if (targets.empty()) throw ConfigError("lora.targets", "must name at least one weight");
  for (const auto& t : targets) {
    if (std::find(kAdaptable.begin(), kAdaptable.end(), t) == kAdaptable.end()) {
      throw ConfigError("lora.targets", "unknown target '" + t + "'");
    }
  }
}

template <RealScalar Real>
void attach(TransformerModel<Real>& model, const AdapterConfig& config) {
  config.validate();
  if (!model.adapters().empty()) throw StateError("attach: model already carries adapters");
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  model.set_all_frozen(true);
  for (Index l = 0; l < model.config().n_layers; ++l) {
    for (const auto& suffix : config.targets) {
      const std::string target = param_names::layer(l, suffix);
      const Matrix<Real>& base = model.param(target).value;
      const Index d_in = base.rows();
      const Index d_out = base.cols();
      Matrix<Real> a(d_in, config.rank);
      for (Index i = 0; i < a.size(); ++i) a.data()[i] = static_cast<Real>(normal(rng));
      LoraAdapter adapter;
      adapter.target = target;
      adapter.a_name = target + ".lora_A";
      adapter.b_name = target + ".lora_B";
      adapter.rank = config.rank;
      adapter.alpha = config.alpha;
      adapter.scaling = config.alpha / static_cast<double>(config.rank);
      model.add_param(adapter.a_name, std::move(a), false);
      model.add_param(adapter.b_name, Matrix<Real>::Zero(config.rank, d_out), false);
      model.adapters().emplace(target, std::move(adapter));
    }
  }
}

template <RealScalar Real>
void merge(TransformerModel<Real>& model) {
  if (model.adapters().empty()) throw StateError("merge: model has no adapters");
  for (const auto& [target, adapter] : model.adapters()) {
    if (adapter.merged) throw StateError("merge: adapter on '" + target + "' is already merged");
  }
  for (auto& [target, adapter] : model.adapters()) {
    const Matrix<Real>& a = model.param(adapter.a_name).value;
    const Matrix<Real>& b = model.param(adapter.b_name).value;
    Matrix<Real> delta(a.rows(), b.cols());
    delta.noalias() = static_cast<Real>(adapter.scaling) * a * b;
    model.param(target).value += delta;
    adapter.merged = true;
  }
}

template <RealScalar Real>
TransformerModel<Real> strip_adapters(const TransformerModel<Real>& model) {
  std::vector<std::string> factor_names;
  for (const auto& [target, adapter] : model.adapters()) {
    if (!adapter.merged) {
      throw StateError("strip_adapters: adapter on '" + target + "' is not merged");
    }
    factor_names.push_back(adapter.a_name);
    factor_names.push_back(adapter.b_name);
  }
  TransformerModel<Real> out(model.config());
  for (const auto& p : model.params()) {
    if (std::find(factor_names.begin(), factor_names.end(), p.name) != factor_names.end()) continue;
    out.add_param(p.name, p.value, p.frozen);
  }
  return out;
}

template void attach(TransformerModel<float>&, const AdapterConfig&);
template void attach(TransformerModel<double>&, const AdapterConfig&);
template void merge(TransformerModel<float>&);
template void merge(TransformerModel<double>&);
template TransformerModel<float> strip_adapters(const TransformerModel<float>&);
template TransformerModel<double> strip_adapters(const TransformerModel<double>&);

}  // namespace tokentune

// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace tokentune {

namespace {

constexpr const char* kMagic = "TOKENTUNE-CKPT 1";
constexpr const char* kLengthKey = "header-bytes ";

using nlohmann::json;

template <class T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw IoError(where + ": missing '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw IoError(where + ": field '" + std::string(key) + "' has the wrong type");
  }
}

DType parse_dtype(const std::string& name) {
  if (name == "float32") return DType::kFloat32;
  if (name == "float64") return DType::kFloat64;
  throw IoError("checkpoint: unknown dtype '" + name + "'");
}

template <class T>
void to_little_endian(T* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < count; ++i) {
      auto* bytes = reinterpret_cast<unsigned char*>(data + i);
      std::reverse(bytes, bytes + sizeof(T));
    }
  } else {
    (void)data;
    (void)count;
  }
}

struct RawFile {
  CheckpointHeader header;
  std::vector<char> payload;
};

json adapter_json(const LoraAdapter& a) {
  return json{{"target", a.target}, {"a", a.a_name},     {"b", a.b_name}, {"rank", a.rank},
              {"alpha", a.alpha},   {"scaling", a.scaling}, {"merged", a.merged}};
}

LoraAdapter adapter_from_json(const json& j) {
  LoraAdapter a;
  a.target = field<std::string>(j, "target", "checkpoint adapter");
  a.a_name = field<std::string>(j, "a", "checkpoint adapter");
  a.b_name = field<std::string>(j, "b", "checkpoint adapter");
  a.rank = field<Index>(j, "rank", "checkpoint adapter");
  a.alpha = field<double>(j, "alpha", "checkpoint adapter");
  a.scaling = field<double>(j, "scaling", "checkpoint adapter");
  a.merged = field<bool>(j, "merged", "checkpoint adapter");
  return a;
}

template <RealScalar Real>
void write_file(const std::filesystem::path& path, const std::string& kind,
                const ModelConfig& config, const std::vector<const Parameter<Real>*>& params,
                const std::vector<LoraAdapter>& adapters) {
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto* p : params) {
    tensors.push_back({{"name", p->name},
                       {"rows", p->value.rows()},
                       {"cols", p->value.cols()},
                       {"frozen", p->frozen},
                       {"offset", offset}});
    offset += static_cast<std::size_t>(p->value.size());
  }
  json adapter_list = json::array();
  for (const auto& a : adapters) adapter_list.push_back(adapter_json(a));
  const json header{{"kind", kind},
                    {"dtype", dtype_name(dtype_of<Real>())},
                    {"config", config},
                    {"tensors", tensors},
                    {"adapters", adapter_list},
                    {"payload-elements", offset}};
  const std::string text = header.dump(1);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << kMagic << '\n' << kLengthKey << text.size() << '\n' << text << '\n';
  std::vector<Real> buffer;
  for (const auto* p : params) {
    buffer.assign(p->value.data(), p->value.data() + p->value.size());
    to_little_endian(buffer.data(), buffer.size());
    out.write(reinterpret_cast<const char*>(buffer.data()),
              static_cast<std::streamsize>(buffer.size() * sizeof(Real)));
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

RawFile read_file(const std::filesystem::path& path, bool with_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw IoError("'" + path.string() + "' is not a tokentune checkpoint (bad magic line)");
  }
  if (!std::getline(in, line) || !line.starts_with(kLengthKey)) {
    throw IoError("checkpoint '" + path.string() + "': missing header length line");
  }
  std::size_t header_bytes = 0;
  try {
    std::size_t used = 0;
    const std::string digits = line.substr(std::strlen(kLengthKey));
    header_bytes = std::stoull(digits, &used);
    if (used != digits.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw IoError("checkpoint '" + path.string() + "': malformed header length");
  }
  std::string text(header_bytes, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_bytes));
  if (static_cast<std::size_t>(in.gcount()) != header_bytes || in.get() != '\n') {
    throw IoError("checkpoint '" + path.string() + "': truncated header");
  }

  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError("checkpoint '" + path.string() + "': header is not valid JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw IoError("checkpoint '" + path.string() + "': header is not an object");

  RawFile raw;
  auto& h = raw.header;
  h.kind = field<std::string>(j, "kind", "checkpoint");
  if (h.kind != "model" && h.kind != "adapters") {
    throw IoError("checkpoint: unknown kind '" + h.kind + "'");
  }
  h.dtype = parse_dtype(field<std::string>(j, "dtype", "checkpoint"));
  try {
    h.config = j.at("config").get<ModelConfig>();
    h.config.validate();
  } catch (const json::exception&) {
    throw IoError("checkpoint: missing or malformed config");
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint: invalid config: ") + e.what());
  }
  if (!j.contains("tensors") || !j["tensors"].is_array()) {
    throw IoError("checkpoint: missing tensor table");
  }
  std::size_t expected_offset = 0;
  std::set<std::string> seen;
  for (const auto& t : j["tensors"]) {
    TensorEntry e;
    e.name = field<std::string>(t, "name", "checkpoint tensor");
    e.rows = field<Index>(t, "rows", "checkpoint tensor " + e.name);
    e.cols = field<Index>(t, "cols", "checkpoint tensor " + e.name);
    e.frozen = field<bool>(t, "frozen", "checkpoint tensor " + e.name);
    e.offset = field<std::size_t>(t, "offset", "checkpoint tensor " + e.name);
    if (e.rows < 0 || e.cols < 0) throw IoError("checkpoint tensor " + e.name + ": negative shape");
    if (e.offset != expected_offset) throw IoError("checkpoint tensor " + e.name + ": bad offset");
    if (!seen.insert(e.name).second) throw IoError("checkpoint: duplicate tensor " + e.name);
    expected_offset += static_cast<std::size_t>(e.rows * e.cols);
    h.tensors.push_back(std::move(e));
  }
  if (field<std::size_t>(j, "payload-elements", "checkpoint") != expected_offset) {
    throw IoError("checkpoint: payload element count disagrees with tensor table");
  }
  if (j.contains("adapters")) {
    for (const auto& a : j["adapters"]) h.adapters.push_back(adapter_from_json(a));
  }

  const std::size_t payload_bytes = expected_offset * dtype_bytes(h.dtype);
  raw.payload.resize(with_payload ? payload_bytes : 0);
  if (with_payload) {
    in.read(raw.payload.data(), static_cast<std::streamsize>(payload_bytes));
    if (static_cast<std::size_t>(in.gcount()) != payload_bytes) {
      throw IoError("checkpoint '" + path.string() + "': payload truncated");
    }
    if (in.peek() != std::char_traits<char>::eof()) {
      throw IoError("checkpoint '" + path.string() + "': trailing bytes after payload");
    }
  } else {
    in.seekg(0, std::ios::end);
    const auto end = static_cast<std::size_t>(in.tellg());
    const std::size_t start = std::strlen(kMagic) + 1 + line.size() + 1 + header_bytes + 1;
    if (end != start + payload_bytes) {
      throw IoError("checkpoint '" + path.string() + "': payload size mismatch");
    }
  }
  return raw;
}

template <RealScalar Real, class Stored>
Matrix<Real> decode(const std::vector<char>& payload, const TensorEntry& e) {
  Matrix<Stored> m(e.rows, e.cols);
  std::memcpy(m.data(), payload.data() + e.offset * sizeof(Stored),
              static_cast<std::size_t>(m.size()) * sizeof(Stored));
  to_little_endian(m.data(), static_cast<std::size_t>(m.size()));
  if constexpr (std::is_same_v<Real, Stored>) {
    return m;
  } else {
    return m.template cast<Real>();
  }
}

template <RealScalar Real>
Matrix<Real> decode_entry(const RawFile& raw, const TensorEntry& e) {
  return raw.header.dtype == DType::kFloat32 ? decode<Real, float>(raw.payload, e)
                                             : decode<Real, double>(raw.payload, e);
}

void check_config(const ModelConfig& found, const ModelConfig& expected,
                  const std::filesystem::path& path) {
  const json a = found;
  const json b = expected;
  for (const auto& [key, value] : b.items()) {
    if (a.at(key) != value) {
      throw ShapeError("checkpoint '" + path.string() + "': model." + key + " is " +
                       a.at(key).dump() + ", expected " + value.dump());
    }
  }
}

}  // namespace

void to_json(json& j, const ModelConfig& c) {
  j = json{{"vocab_size", c.vocab_size}, {"max_positions", c.max_positions},
           {"d_model", c.d_model},       {"n_heads", c.n_heads},
           {"d_ff", c.d_ff},             {"n_layers", c.n_layers},
           {"causal", c.causal},         {"n_classes", c.n_classes},
           {"init_std", c.init_std}};
}

void from_json(const json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model", "must be an object");
  for (const auto& [key, value] : j.items()) {
    const std::string where = "model." + key;
    try {
      if (key == "vocab_size") c.vocab_size = value.get<Index>();
      else if (key == "max_positions") c.max_positions = value.get<Index>();
      else if (key == "d_model") c.d_model = value.get<Index>();
      else if (key == "n_heads") c.n_heads = value.get<Index>();
      else if (key == "d_ff") c.d_ff = value.get<Index>();
      else if (key == "n_layers") c.n_layers = value.get<Index>();
      else if (key == "causal") c.causal = value.get<bool>();
      else if (key == "n_classes") c.n_classes = value.get<Index>();
      else if (key == "init_std") c.init_std = value.get<double>();
      else throw ConfigError(where, "unknown key");
    } catch (const json::exception&) {
      throw ConfigError(where, "wrong type");
    }
  }
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  return read_file(path, false).header;
}

template <RealScalar Real>
void save_checkpoint(const std::filesystem::path& path, const TransformerModel<Real>& model) {
  std::vector<const Parameter<Real>*> params;
  for (const auto& p : model.params()) params.push_back(&p);
  std::vector<LoraAdapter> adapters;
  for (const auto& [target, a] : model.adapters()) adapters.push_back(a);
  write_file<Real>(path, "model", model.config(), params, adapters);
}

template <RealScalar Real>
TransformerModel<Real> load_checkpoint(const std::filesystem::path& path) {
  const RawFile raw = read_file(path, true);
  if (raw.header.kind != "model") {
    throw IoError("'" + path.string() + "' holds adapters, not a model");
  }
  TransformerModel<Real> model(raw.header.config);
  for (const auto& e : raw.header.tensors) {
    model.add_param(e.name, decode_entry<Real>(raw, e), e.frozen);
  }
  // Every parameter a freshly built model of this config has must be present.
  const auto reference = TransformerModel<Real>::initialize(raw.header.config, 0);
  for (const auto& p : reference.params()) {
    if (!model.has_param(p.name)) throw IoError("checkpoint: missing tensor " + p.name);
    const auto& got = model.param(p.name).value;
    if (got.rows() != p.value.rows() || got.cols() != p.value.cols()) {
      throw ShapeError("checkpoint tensor " + p.name + " is " + shape_string(got) + ", expected " +
                       shape_string(p.value));
    }
  }
  for (const auto& a : raw.header.adapters) {
    if (!model.has_param(a.a_name) || !model.has_param(a.b_name) || !model.has_param(a.target)) {
      throw IoError("checkpoint: adapter on " + a.target + " references missing tensors");
    }
    model.adapters().emplace(a.target, a);
  }
  return model;
}

template <RealScalar Real>
TransformerModel<Real> load_checkpoint(const std::filesystem::path& path,
                                       const ModelConfig& expected) {
  check_config(read_checkpoint_header(path).config, expected, path);
  return load_checkpoint<Real>(path);
}

template <RealScalar Real>
void save_adapters(const std::filesystem::path& path, const TransformerModel<Real>& model) {
  if (model.adapters().empty()) throw StateError("save_adapters: model has no adapters");
  std::vector<const Parameter<Real>*> params;
  std::vector<LoraAdapter> adapters;
  for (const auto& [target, a] : model.adapters()) {
    params.push_back(&model.param(a.a_name));
    params.push_back(&model.param(a.b_name));
    adapters.push_back(a);
  }
  // Trainable weights outside the factors (the task head) travel along.
  for (const auto& p : model.params()) {
    if (!p.frozen && p.name.find(".lora_") == std::string::npos) params.push_back(&p);
  }
  write_file<Real>(path, "adapters", model.config(), params, adapters);
}

template <RealScalar Real>
void load_adapters(const std::filesystem::path& path, TransformerModel<Real>& base) {
  const RawFile raw = read_file(path, true);
  if (raw.header.kind != "adapters") {
    throw IoError("'" + path.string() + "' holds a model, not adapters");
  }
  check_config(raw.header.config, base.config(), path);
  if (!base.adapters().empty()) throw StateError("load_adapters: base already carries adapters");
  std::map<std::string, const TensorEntry*> by_name;
  for (const auto& e : raw.header.tensors) by_name[e.name] = &e;
  for (const auto& a : raw.header.adapters) {
    if (!base.has_param(a.target)) throw ShapeError("adapter target " + a.target + " not in base");
    const auto ia = by_name.find(a.a_name);
    const auto ib = by_name.find(a.b_name);
    if (ia == by_name.end() || ib == by_name.end()) {
      throw IoError("adapter file: factors for " + a.target + " missing");
    }
    const auto& w = base.param(a.target).value;
    if (ia->second->rows != w.rows() || ib->second->cols != w.cols() ||
        ia->second->cols != a.rank || ib->second->rows != a.rank) {
      throw ShapeError("adapter factors for " + a.target + " do not fit " + shape_string(w));
    }
  }
  for (const auto& e : raw.header.tensors) {
    if (!base.has_param(e.name) || e.name.find(".lora_") != std::string::npos) continue;
    const auto& w = base.param(e.name).value;
    if (e.rows != w.rows() || e.cols != w.cols()) {
      throw ShapeError("adapter file tensor " + e.name + " does not fit " + shape_string(w));
    }
  }
  base.set_all_frozen(true);
  for (const auto& e : raw.header.tensors) {
    if (base.has_param(e.name)) {
      auto& p = base.param(e.name);
      p.value = decode_entry<Real>(raw, e);
      p.frozen = e.frozen;
    } else {
      base.add_param(e.name, decode_entry<Real>(raw, e), e.frozen);
    }
  }
  for (const auto& a : raw.header.adapters) base.adapters().emplace(a.target, a);
}

template void save_checkpoint(const std::filesystem::path&, const TransformerModel<float>&);
template void save_checkpoint(const std::filesystem::path&, const TransformerModel<double>&);
template TransformerModel<float> load_checkpoint<float>(const std::filesystem::path&);
template TransformerModel<double> load_checkpoint<double>(const std::filesystem::path&);
template TransformerModel<float> load_checkpoint<float>(const std::filesystem::path&,
                                                        const ModelConfig&);
template TransformerModel<double> load_checkpoint<double>(const std::filesystem::path&,
                                                          const ModelConfig&);
template void save_adapters(const std::filesystem::path&, const TransformerModel<float>&);
template void save_adapters(const std::filesystem::path&, const TransformerModel<double>&);
template void load_adapters(const std::filesystem::path&, TransformerModel<float>&);
template void load_adapters(const std::filesystem::path&, TransformerModel<double>&);

}  // namespace tokentune

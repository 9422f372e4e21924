// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

// Python bindings: config loading, the CLI commands, data generation and
// checkpoint inspection.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "tokentune/checkpoint.hpp"
#include "tokentune/commands.hpp"
#include "tokentune/config.hpp"

namespace py = pybind11;
using namespace tokentune;

namespace {

py::object to_python(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

py::tuple run(const std::string& command, const std::filesystem::path& config,
              const std::vector<std::string>& overrides, std::optional<std::string> out,
              std::optional<std::string> checkpoint, std::optional<std::string> inject_bug,
              bool merge_adapters) {
  const CommandOptions options{config, overrides, std::move(out), std::move(checkpoint),
                               std::move(inject_bug), merge_adapters};
  std::ostringstream stdout_text, stderr_text;
  int code = 0;
  {
    py::gil_scoped_release release;
    code = run_command(command, options, stdout_text, stderr_text);
  }
  return py::make_tuple(code, stdout_text.str(), stderr_text.str());
}

py::tuple classification(Index n_examples, Index seq_len, Index n_classes, Index vocab_size,
                         double difficulty, Index min_len, std::uint64_t seed) {
  const Dataset data = gen_classification({.n_examples = n_examples, .seq_len = seq_len,
                                           .min_len = min_len, .n_classes = n_classes,
                                           .vocab_size = vocab_size, .difficulty = difficulty,
                                           .seed = seed});
  py::array_t<std::int64_t> ids({n_examples, seq_len});
  py::array_t<std::uint8_t> mask({n_examples, seq_len});
  py::array_t<std::int64_t> labels(std::vector<py::ssize_t>{n_examples});
  auto i = ids.mutable_unchecked<2>();
  auto m = mask.mutable_unchecked<2>();
  auto y = labels.mutable_unchecked<1>();
  for (Index e = 0; e < n_examples; ++e) {
    const auto& ex = data[static_cast<std::size_t>(e)];
    for (Index t = 0; t < seq_len; ++t) {
      i(e, t) = ex.seq.token_ids[static_cast<std::size_t>(t)];
      m(e, t) = ex.seq.pad_mask[static_cast<std::size_t>(t)];
    }
    y(e) = ex.label;
  }
  return py::make_tuple(ids, mask, labels);
}

py::dict header(const std::filesystem::path& path) {
  const CheckpointHeader h = read_checkpoint_header(path);
  nlohmann::json config;
  to_json(config, h.config);
  py::list tensors;
  for (const auto& t : h.tensors) {
    tensors.append(py::dict(py::arg("name") = t.name, py::arg("rows") = t.rows,
                            py::arg("cols") = t.cols, py::arg("frozen") = t.frozen));
  }
  py::list adapters;
  for (const auto& a : h.adapters) {
    adapters.append(py::dict(py::arg("target") = a.target, py::arg("rank") = a.rank,
                             py::arg("alpha") = a.alpha, py::arg("merged") = a.merged));
  }
  py::dict d;
  d["kind"] = h.kind;
  d["dtype"] = dtype_name(h.dtype);
  d["config"] = to_python(config);
  d["tensors"] = tensors;
  d["adapters"] = adapters;
  return d;
}

py::dict weights(const std::filesystem::path& path) {
  const auto model = load_checkpoint<double>(path);
  py::dict d;
  for (const auto& p : model.params()) {
    py::array_t<double> a({p.value.rows(), p.value.cols()});
    std::copy(p.value.data(), p.value.data() + p.value.size(), a.mutable_data());
    d[py::str(p.name)] = a;
  }
  return d;
}

}  // namespace

PYBIND11_MODULE(_tokentune, m) {
  m.doc() = "Selective-token fine-tuning engine";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def("version", &version_string);
  m.def(
      "load_config",
      [](const std::filesystem::path& path, const std::vector<std::string>& overrides) {
        return to_python(to_json(load_run_config(path, overrides)));
      },
      py::arg("path"), py::arg("overrides") = std::vector<std::string>{},
      "Resolved configuration as a dict, overrides and TOKENTUNE_SEED applied.");
  m.def("default_config", [] { return to_python(default_config_json()); });
  m.def("run", &run, py::arg("command"), py::arg("config"),
        py::arg("overrides") = std::vector<std::string>{}, py::arg("out") = std::nullopt,
        py::arg("checkpoint") = std::nullopt, py::arg("inject_bug") = std::nullopt,
        py::arg("merge_adapters") = false,
        "Runs train, eval, gradcheck or memsweep; returns (exit_code, stdout, stderr).");
  m.def("gen_classification", &classification, py::arg("n_examples"), py::arg("seq_len"),
        py::arg("n_classes") = 2, py::arg("vocab_size") = 32, py::arg("difficulty") = 0.2,
        py::arg("min_len") = 0, py::arg("seed") = 0,
        "Synthetic majority-marker task as (ids, pad_mask, labels) arrays.");
  m.def(
      "dump_classification",
      [](const std::filesystem::path& path, Index n_examples, Index seq_len, Index n_classes,
         Index vocab_size, double difficulty, Index min_len, std::uint64_t seed) {
        dump_classification_jsonl(
            path, gen_classification({.n_examples = n_examples, .seq_len = seq_len,
                                      .min_len = min_len, .n_classes = n_classes,
                                      .vocab_size = vocab_size, .difficulty = difficulty,
                                      .seed = seed}));
      },
      py::arg("path"), py::arg("n_examples"), py::arg("seq_len"), py::arg("n_classes") = 2,
      py::arg("vocab_size") = 32, py::arg("difficulty") = 0.2, py::arg("min_len") = 0,
      py::arg("seed") = 0);
  m.def("generate_text_corpus", [](std::size_t bytes, std::uint64_t seed) {
    return py::bytes(generate_text_corpus(bytes, seed));
  }, py::arg("bytes"), py::arg("seed") = 0);
  m.def("checkpoint_header", &header, py::arg("path"));
  m.def("checkpoint_weights", &weights, py::arg("path"),
        "Every tensor of a model checkpoint as a float64 array.");
}

// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "CLI11.hpp"
#include "tokentune/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Selective-token fine-tuning for small transformers"};
  app.set_version_flag("--version", tokentune::version_string());
  app.require_subcommand(1);

  tokentune::CommandOptions options;
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string bug;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON run configuration")->required();
    sub->add_option("--set", options.overrides, "Override a config field, e.g. train.lr=1e-4")
        ->take_all()
        ->allow_extra_args(false);
    sub->add_option("--out", out, "Output directory (overrides `out`)");
  };

  CLI::App* train = app.add_subcommand("train", "Fine-tune a model and write run artifacts");
  add_common(train);
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to load (default: <out>/model.ckpt)");
  eval->add_flag("--merge-adapters", options.merge_adapters, "Fold LoRA factors before evaluating");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Run the gradient and equivalence checks");
  add_common(gradcheck);
  gradcheck->add_option("--inject-bug", bug,
                        "none | track-unselected-kv | cache-unselected-rows | "
                        "mask-from-storage-order");
  CLI::App* memsweep = app.add_subcommand("memsweep", "Profile step memory over a grid");
  add_common(memsweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  options.config = config;
  if (!out.empty()) options.out = out;
  if (!checkpoint.empty()) options.checkpoint = checkpoint;
  if (!bug.empty()) options.inject_bug = bug;
  const std::string name = app.get_subcommands().front()->get_name();
  return tokentune::run_command(name, options, std::cout, std::cerr);
}

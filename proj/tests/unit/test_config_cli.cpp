// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "tokentune/commands.hpp"
#include "tokentune/config.hpp"

namespace tokentune {
namespace {

using nlohmann::json;
using testing::TempDir;

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json small_config() {
  return json::parse(R"({
    "seed": 3, "regime": "tokentune", "k": 4,
    "model": {"vocab_size": 16, "max_positions": 16, "d_model": 16, "n_heads": 2, "d_ff": 32,
              "n_layers": 1, "causal": false, "n_classes": 2},
    "task": {"kind": "classification", "n_train": 48, "n_test": 16, "seq_len": 12},
    "train": {"batch_size": 8, "epochs": 1, "lr": 0.003}
  })");
}

std::filesystem::path write_config(const TempDir& dir, const json& j, const std::string& name = "c.json") {
  const auto path = dir / name;
  std::ofstream(path) << j.dump(2);
  return path;
}

/// Unsets TOKENTUNE_SEED for the test's lifetime unless a value is given.
class SeedEnv {
 public:
  explicit SeedEnv(const char* value = nullptr) {
    if (value) {
      ::setenv("TOKENTUNE_SEED", value, 1);
    } else {
      ::unsetenv("TOKENTUNE_SEED");
    }
  }
  ~SeedEnv() { ::unsetenv("TOKENTUNE_SEED"); }
};

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(const std::string& command, CommandOptions options) {
  std::ostringstream out, err;
  const int code = run_command(command, options, out, err);
  return {code, out.str(), err.str()};
}

TEST(Config, DefaultsRoundTripThroughJson) {
  const RunConfig defaults = run_config_from_json(default_config_json());
  const json j = to_json(defaults);
  EXPECT_EQ(to_json(run_config_from_json(j)), j);
}

TEST(Config, OverridesAreTypedAndStrict) {
  SeedEnv env;
  TempDir dir("cfg");
  const auto path = write_config(dir, small_config());
  const RunConfig c = load_run_config(path, {"train.lr=0.01", "model.n_layers=2", "regime=full",
                                             "lora.targets=[\"W_Q\"]"});
  EXPECT_DOUBLE_EQ(c.lr, 0.01);
  EXPECT_EQ(c.model.n_layers, 2);
  EXPECT_EQ(c.regime, "full");
  EXPECT_EQ(c.lora.targets, std::vector<std::string>{"W_Q"});
  EXPECT_EQ(c.k, 4);

  EXPECT_THROW(load_run_config(path, {"train.learning_rate=0.1"}), ConfigError);
  EXPECT_THROW(load_run_config(path, {"train.lr=fast"}), ConfigError);
  EXPECT_THROW(load_run_config(path, {"train.lr=-1"}), ConfigError);
  EXPECT_THROW(load_run_config(path, {"no_equals_sign"}), ConfigError);
  EXPECT_THROW(load_run_config(dir / "missing.json", {}), IoError);

  json unknown = small_config();
  unknown["model"]["width"] = 3;
  EXPECT_THROW(load_run_config(write_config(dir, unknown, "u.json"), {}), ConfigError);
  json causal = small_config();
  causal["model"]["causal"] = true;
  EXPECT_THROW(load_run_config(write_config(dir, causal, "x.json"), {}), ConfigError);
}

TEST(Config, SeedEnvironmentVariableWinsOverEverything) {
  TempDir dir("cfg");
  const auto path = write_config(dir, small_config());
  {
    SeedEnv env("42");
    EXPECT_EQ(load_run_config(path, {"seed=5"}).seed, 42u);
  }
  {
    SeedEnv env;
    EXPECT_EQ(load_run_config(path, {"seed=5"}).seed, 5u);
    EXPECT_EQ(load_run_config(path, {}).seed, 3u);
  }
  {
    SeedEnv env("forty-two");
    EXPECT_THROW(load_run_config(path, {}), ConfigError);
  }
}

TEST(Config, ExplicitKWinsOverRatio) {
  SeedEnv env;
  TempDir dir("cfg");
  const auto path = write_config(dir, small_config());
  EXPECT_EQ(load_run_config(path, {"selection_ratio=0.5"}).selection().count, 4);
  const RunConfig ratio = load_run_config(path, {"k=null", "selection_ratio=0.5"});
  EXPECT_FALSE(ratio.selection().count.has_value());
}

TEST(Cli, TrainWritesArtifactsAndEvalReproducesTheScore) {
  SeedEnv env;
  TempDir dir("cli");
  const auto config = write_config(dir, small_config());
  const Outcome trained = run("train", {.config = config, .out = (dir / "run").string()});
  ASSERT_EQ(trained.code, 0) << trained.err;
  for (const char* f : {"config.json", "run.json", "metrics.jsonl", "timings.jsonl", "eval.jsonl",
                        "eval.json", "model.ckpt", "memory.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / "run" / f)) << f;
  }
  EXPECT_FALSE(std::filesystem::exists(dir / "run" / "adapters.ckpt"));
  const json final_eval = json::parse(slurp(dir / "run" / "eval.json"));

  const Outcome evaluated = run("eval", {.config = config, .out = (dir / "run").string()});
  ASSERT_EQ(evaluated.code, 0) << evaluated.err;
  const json line = json::parse(evaluated.out.substr(0, evaluated.out.find('\n')));
  EXPECT_EQ(line.at("accuracy"), final_eval.at("accuracy"));
  EXPECT_EQ(line.at("loss"), final_eval.at("loss"));

  // The resolved config reloads to the same run.
  const RunConfig reloaded = load_run_config(dir / "run" / "config.json", {});
  json expected = to_json(load_run_config(config, {}));
  expected["out"] = (dir / "run").string();
  EXPECT_EQ(to_json(reloaded), expected);
}

TEST(Cli, SameSeedGivesIdenticalMetrics) {
  SeedEnv env;
  TempDir dir("cli");
  const auto config = write_config(dir, small_config());
  ASSERT_EQ(run("train", {.config = config, .out = (dir / "a").string()}).code, 0);
  ASSERT_EQ(run("train", {.config = config, .out = (dir / "b").string()}).code, 0);
  ASSERT_EQ(run("train", {.config = config, .overrides = {"seed=4"}, .out = (dir / "c").string()}).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "metrics.jsonl"), slurp(dir / "b" / "metrics.jsonl"));
  EXPECT_NE(slurp(dir / "a" / "metrics.jsonl"), slurp(dir / "c" / "metrics.jsonl"));
}

TEST(Cli, MergedAdaptersEvaluateLikeTheAdaptedModel) {
  SeedEnv env;
  TempDir dir("cli");
  const auto config = write_config(dir, small_config());
  const CommandOptions train{.config = config, .overrides = {"regime=tokentune+lora"}, .out = (dir / "run").string()};
  ASSERT_EQ(run("train", train).code, 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "adapters.ckpt"));
  CommandOptions eval = train;
  const Outcome plain = run("eval", eval);
  eval.merge_adapters = true;
  const Outcome merged = run("eval", eval);
  ASSERT_EQ(plain.code, 0) << plain.err;
  ASSERT_EQ(merged.code, 0) << merged.err;
  const auto first_line = [](const std::string& s) { return json::parse(s.substr(0, s.find('\n'))); };
  EXPECT_NEAR(first_line(plain.out).at("loss").get<double>(),
              first_line(merged.out).at("loss").get<double>(), 1e-4);
}

TEST(Cli, ErrorsMapToExitCodes) {
  SeedEnv env;
  TempDir dir("cli");
  const auto config = write_config(dir, small_config());
  EXPECT_EQ(run("train", {.config = dir / "missing.json", .out = (dir / "r").string()}).code, 2);
  EXPECT_EQ(run("train", {.config = config, .overrides = {"bogus=1"}, .out = (dir / "r").string()}).code, 2);
  EXPECT_EQ(run("train", {.config = config, .overrides = {"train.lr=0"}, .out = (dir / "r").string()}).code, 2);
  const Outcome diverged = run("train", {.config = config, .overrides = {"train.lr=1e30"}, .out = (dir / "r").string()});
  EXPECT_EQ(diverged.code, 3) << diverged.err;
  EXPECT_FALSE(diverged.err.empty());

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  EXPECT_EQ(run("eval", {.config = config, .checkpoint = (dir / "junk.ckpt").string()}).code, 2);
  ASSERT_EQ(run("train", {.config = config, .out = (dir / "ok").string()}).code, 0);
  EXPECT_EQ(run("eval", {.config = config, .overrides = {"model.d_ff=64"},
                         .checkpoint = (dir / "ok" / "model.ckpt").string()}).code, 2);
  EXPECT_EQ(run("dance", {.config = config}).code, 2);
}

TEST(Cli, GradcheckPassesCleanAndFailsOnInjectedBugs) {
  SeedEnv env;
  TempDir dir("cli");
  const auto config = std::filesystem::path(TOKENTUNE_CONFIGS) / "gradcheck_tiny.json";
  const std::vector<std::string> fast{"gradcheck.points=8"};
  const Outcome clean = run("gradcheck", {.config = config, .overrides = fast, .out = (dir / "g").string()});
  EXPECT_EQ(clean.code, 0) << clean.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "g" / "verify_report.jsonl"));
  const Outcome bug = run("gradcheck", {.config = config, .overrides = fast, .out = (dir / "b").string(),
                                        .inject_bug = "track-unselected-kv"});
  EXPECT_EQ(bug.code, 1);
  EXPECT_NE(bug.err.find("stopgrad-equivalence"), std::string::npos) << bug.err;
}

TEST(Cli, EmptyMemsweepWritesHeaderOnly) {
  SeedEnv env;
  TempDir dir("cli");
  const auto config = std::filesystem::path(TOKENTUNE_CONFIGS) / "memsweep.json";
  const Outcome r = run("memsweep", {.config = config, .overrides = {"memsweep.regimes=[]"}, .out = (dir / "m").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir / "m" / "sweep.csv"), std::string(kSweepHeader) + "\n");
}

int shell(const std::string& args) {
  const std::string command = std::string("\"") + TOKENTUNE_CLI + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Executable, ParsesItsArguments) {
  SeedEnv env;
  TempDir dir("exe");
  EXPECT_EQ(shell("--version"), 0);
  EXPECT_EQ(shell("train"), 2);
  EXPECT_EQ(shell("launch --config x.json"), 2);
  EXPECT_EQ(shell("train --config " + (dir / "missing.json").string()), 2);
  const auto config = write_config(dir, small_config());
  EXPECT_EQ(shell("train --config " + config.string() + " --set train.max_steps=2 --out " +
                  (dir / "run").string()),
            0);
  EXPECT_EQ(shell("eval --config " + config.string() + " --checkpoint " +
                  (dir / "run" / "model.ckpt").string()),
            0);
}

}  // namespace
}  // namespace tokentune

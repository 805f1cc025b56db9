/*
 * Copyright 2026 The groupflow Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "groupflow/cli.h"
#include "groupflow/error.h"
#include "gtest/gtest.h"
#include "nlohmann/json.hpp"

namespace groupflow {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code = 0;
  std::string out, err;
};

Outcome Invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  Outcome o;
  o.code = RunCli(args, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

std::string Slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path Fresh(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

TEST(Config, DefaultsOverridesAndKeys) {
  const RunConfig c = LoadRunConfig(std::nullopt, {{"train.lr", "0.01"}, {"ea.guided", "false"},
                                                   {"data.task", "regression"}});
  EXPECT_EQ(c.train.lr, 0.01);
  EXPECT_FALSE(c.ea.guided);
  EXPECT_EQ(c.data.task, Task::kRegression);
  EXPECT_EQ(c.encoder.n_classes, 1u);
  EXPECT_EQ(c.DatasetPath(), (fs::path("out") / "dataset.jsonl").string());
  const nlohmann::json json = RunConfigToJson(c);
  EXPECT_EQ(json.at("train").at("lr"), 0.01);
  EXPECT_EQ(json.at("data").at("task"), "regression");
  const std::vector<std::string> keys = ConfigKeys();
  EXPECT_NE(std::find(keys.begin(), keys.end(), "explain.method"), keys.end());
}

TEST(Config, FileAndErrors) {
  const fs::path dir = Fresh("groupflow_cfg");
  fs::create_directories(dir);
  const fs::path file = dir / "c.json";
  std::ofstream(file) << R"({"seed": 4, "train": {"epochs": 2}, "explain": {"method": "grad_only"}})";
  const RunConfig c = LoadRunConfig(file.string(), {{"train.epochs", "3"}});
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.explain.method, Method::kGradOnly);
  EXPECT_EQ(c.data.seed, DeriveSeed(4, "data"));

  auto code_of = [](auto fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kIo;
  };
  EXPECT_EQ(code_of([] { LoadRunConfig(std::nullopt, {{"train.nope", "1"}}); }),
            ErrorCode::kUnknownKey);
  EXPECT_EQ(code_of([] { LoadRunConfig(std::nullopt, {{"train.epochs", "-1"}}); }),
            ErrorCode::kInvalidValue);
  EXPECT_EQ(code_of([] { LoadRunConfig(std::nullopt, {{"train.lr", "abc"}}); }),
            ErrorCode::kInvalidValue);
  EXPECT_EQ(code_of([] { LoadRunConfig(std::nullopt, {{"explain.method", "saliency"}}); }),
            ErrorCode::kInvalidValue);
  EXPECT_EQ(code_of([] { LoadRunConfig(std::nullopt, {{"train.dropout", "0.5"}}); }),
            ErrorCode::kInvalidValue);
  std::ofstream(file) << "{";
  EXPECT_EQ(code_of([&] { LoadRunConfig(file.string(), {}); }), ErrorCode::kMalformedJson);
  EXPECT_EQ(code_of([&] { LoadRunConfig((dir / "missing.json").string(), {}); }),
            ErrorCode::kMalformedJson);
  fs::remove_all(dir);
}

TEST(Cli, UsageAndValidationExitCodes) {
  EXPECT_EQ(Invoke({}).code, 1);
  EXPECT_EQ(Invoke({"frobnicate"}).code, 1);
  EXPECT_EQ(Invoke({"train", "stray"}).code, 1);
  EXPECT_EQ(Invoke({"train", "--train.lr"}).code, 1);
  const Outcome bad = Invoke({"train", "--train.nope", "1"});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("UnknownKey"), std::string::npos);
  EXPECT_EQ(Invoke({"gen-data", "--data.annotation_rate=2"}).code, 2);
  const fs::path dir = Fresh("groupflow_cli_missing");
  EXPECT_EQ(Invoke({"train", "--paths.output_dir", dir.string()}).code, 3);
  fs::remove_all(dir);
}

TEST(Cli, PipelineWritesArtifactsDeterministically) {
  const fs::path dir = Fresh("groupflow_cli_pipeline");
  const std::vector<std::string> common = {
      "--paths.output_dir", dir.string(), "--data.n_molecules", "80",  "--data.n_fragment_types",
      "8", "--data.max_length", "8", "--encoder.d_model", "8", "--encoder.d_ff", "16",
      "--encoder.max_len", "10", "--train.epochs", "1", "--pretrain.epochs", "1",
      "--ea.population", "6", "--ea.generations", "3", "--data.annotation_rate", "0.5"};
  auto run = [&](const std::string& command) {
    std::vector<std::string> args = {command};
    args.insert(args.end(), common.begin(), common.end());
    const Outcome o = Invoke(args);
    EXPECT_EQ(o.code, 0) << command << ": " << o.err;
  };
  run("gen-data");
  EXPECT_TRUE(fs::exists(dir / "dataset.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "registry.json"));
  run("pretrain");
  EXPECT_TRUE(fs::exists(dir / "model.lmtn"));
  EXPECT_TRUE(fs::exists(dir / "model.lmtn.json"));
  run("train");
  const std::string metrics = Slurp(dir / "metrics.csv");
  const std::string explanations = Slurp(dir / "explanations.jsonl");
  EXPECT_EQ(metrics.rfind("epoch,split,accuracy", 0), 0u);
  EXPECT_FALSE(explanations.empty());
  run("train");
  EXPECT_EQ(Slurp(dir / "metrics.csv"), metrics);
  EXPECT_EQ(Slurp(dir / "explanations.jsonl"), explanations);

  run("explain");
  EXPECT_EQ(Slurp(dir / "explanations.jsonl"), explanations);
  run("eval");
  const std::string ablation = Slurp(dir / "ablation.csv");
  EXPECT_EQ(ablation.rfind("method,exp_auc,mean_ep,mean_fidelity,random_fidelity\n", 0), 0u);
  EXPECT_NE(ablation.find("attention_only,"), std::string::npos);
  run("edit");
  const std::string history = Slurp(dir / "history.csv");
  EXPECT_EQ(history.rfind("generation,best,mean,vocab_size\n", 0), 0u);
  EXPECT_TRUE(fs::exists(dir / "hits.json"));
  EXPECT_TRUE(fs::exists(dir / "population.jsonl"));
  run("edit");
  EXPECT_EQ(Slurp(dir / "history.csv"), history);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace groupflow

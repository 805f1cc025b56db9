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

// Command-line driver: configuration loading with dotted overrides and the
// subcommands gen-data, pretrain, train, explain, eval, edit and selfcheck.

#ifndef GROUPFLOW_CLI_H_
#define GROUPFLOW_CLI_H_

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "groupflow/data.h"
#include "groupflow/editor.h"
#include "groupflow/encoder.h"
#include "groupflow/explain.h"
#include "groupflow/train.h"
#include "nlohmann/json_fwd.hpp"

namespace groupflow {

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string output_dir = "out";
  std::string dataset;     // default: <output_dir>/dataset.jsonl
  std::string registry;    // default: <output_dir>/registry.json
  std::string checkpoint;  // default: <output_dir>/model.lmtn
  std::string pretrained;  // optional starting point for train
  std::string explain_split = "test";

  GeneratorConfig data;
  EncoderConfig encoder;
  std::size_t min_count = 1;
  PretrainConfig pretrain;
  TrainConfig train;
  ExplanationConfig explain;
  EAConfig ea;

  std::string DatasetPath() const;
  std::string RegistryPath() const;
  std::string CheckpointPath() const;

  // Module seeds derived from `seed`; jobs propagated.
  void Finalize();
  void Validate() const;  // ConfigError(kInvalidValue)
};

// Every accepted dotted key, in a fixed order.
std::vector<std::string> ConfigKeys();

// Reads the JSON file (when given), applies `overrides` in order and
// validates. Throws ConfigError with kMalformedJson, kUnknownKey or
// kInvalidValue.
RunConfig LoadRunConfig(const std::optional<std::string>& path,
                        const std::vector<std::pair<std::string, std::string>>& overrides);

// The effective configuration as nested JSON.
nlohmann::json RunConfigToJson(const RunConfig& config);

// Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime.
int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace groupflow

#endif  // GROUPFLOW_CLI_H_

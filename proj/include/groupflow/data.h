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

// Synthetic planted-motif datasets, the additive property oracle, and JSONL
// persistence.

#ifndef GROUPFLOW_DATA_H_
#define GROUPFLOW_DATA_H_

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "groupflow/grammar.h"

namespace groupflow {

enum class Task { kClassification, kRegression };
std::string_view TaskName(Task task);
Task ParseTask(std::string_view name);  // kInvalidConfig

enum class Split { kTrain, kVal, kTest };
std::string_view SplitName(Split split);

struct GeneratorConfig {
  std::size_t n_molecules = 2000;
  std::size_t min_length = 6;
  std::size_t max_length = 20;
  std::size_t n_fragment_types = 30;
  std::size_t motif_a = 0;  // "benzene" in the default registry
  std::size_t motif_b = 1;  // "nitro"
  double distractor_rate = 0.3;
  double annotation_rate = 0.1;
  Task task = Task::kClassification;
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::size_t top_q = 2;  // regression ground truth size
  double pair_bonus = 1.0;
  std::uint64_t seed = 0;

  void Validate() const;  // kInvalidConfig
};

// Fragment names: a few dozen recognizable groups, then "frag<k>".
GroupRegistry DefaultRegistry(std::size_t n_fragment_types);

struct PropertyOracle {
  std::vector<double> contributions;  // per registry group index
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  double pair_bonus = 0;
};

// c_f ~ N(0, 1) from the seed; the motif pair is the designated pair.
PropertyOracle MakeOracle(const GroupRegistry& registry,
                          const GeneratorConfig& config);

// Sum of contributions plus one bonus per designated pair present.
// Throws kUnknownFragment for tokens outside the registry.
double OracleScore(std::span<const Token> tokens, const PropertyOracle& oracle,
                   const GroupRegistry& registry);

struct DatasetRecord {
  std::int64_t id = 0;
  MoleculeString molecule;  // label always set
  Split split = Split::kTrain;

  bool operator==(const DatasetRecord& other) const;
};

struct Dataset {
  std::vector<DatasetRecord> records;

  std::vector<const DatasetRecord*> Select(Split split) const;
  std::vector<MoleculeString> Molecules(Split split) const;
  std::vector<MoleculeString> AllMolecules() const;
};

// Deterministic in config.seed.
Dataset Generate(const GroupRegistry& registry, const GeneratorConfig& config);

void SaveDataset(const std::string& path, const Dataset& dataset);
// Throws kIo, RecordError(kMalformedRecord | kInvariantViolation, line).
Dataset LoadDataset(const std::string& path, const GroupRegistry& registry);

std::string RecordToJsonLine(const DatasetRecord& record);

}  // namespace groupflow

#endif  // GROUPFLOW_DATA_H_

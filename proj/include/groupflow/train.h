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

// Supervised fine-tuning with the marginal alignment loss, split evaluation,
// metrics files and checkpoints.

#ifndef GROUPFLOW_TRAIN_H_
#define GROUPFLOW_TRAIN_H_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "groupflow/data.h"
#include "groupflow/encoder.h"
#include "groupflow/explain.h"
#include "groupflow/grammar.h"

namespace groupflow {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double margin = 0.1;    // delta_1
  double lambda_m = 1.0;  // weight of the marginal loss
  bool second_order = false;  // differentiate L_M through the state gradients
  double dropout = 0;
  bool eval_every_epoch = true;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;

  // kInvalidConfig; kUnsupported for dropout > 0.
  void Validate() const;
};

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  std::optional<double> accuracy;
  std::optional<double> exp_auc;
  std::optional<double> mean_ep;
  std::optional<double> mean_fidelity;
  std::optional<double> mean_spurious_ratio;
};

struct EvalSummary {
  MetricsRow row;
  std::optional<double> mean_random_fidelity;  // same count, random tokens
  std::vector<ExplanationReport> reports;
};

// Explains every record (in order) and aggregates. Random-removal fidelity
// uses a per-record stream derived from `seed` and the record id.
EvalSummary EvaluateRecords(const EncoderParams& params, const Vocabulary& vocab,
                            std::span<const DatasetRecord* const> records,
                            const ExplanationConfig& config, std::size_t jobs,
                            std::uint64_t seed);

struct TrainResult {
  std::vector<double> epoch_losses;
  std::vector<MetricsRow> metrics;  // val per epoch, then the final test row
};

// Throws kNoLabels when a training record lacks a label.
TrainResult Train(EncoderParams& params, const Vocabulary& vocab,
                  const Dataset& dataset, const TrainConfig& config,
                  const ExplanationConfig& explain_config);

// Mean loss of one batch and its parameter gradients. Exposed for tests.
struct BatchLoss {
  double cross_entropy = 0;  // mean over the batch
  double marginal = 0;       // mean over annotated members, 0 if none
  std::size_t annotated = 0;
  std::vector<Tensor> gradients;
};
BatchLoss ComputeBatchLoss(const EncoderParams& params, const Vocabulary& vocab,
                           std::span<const MoleculeString* const> batch,
                           const TrainConfig& config, Method method);

std::string MetricsCsvHeader();
std::string MetricsCsvLine(const MetricsRow& row);
void WriteMetricsCsv(const std::string& path, std::span<const MetricsRow> rows);

// Tensor file at `path`, JSON sidecar at `path + ".json"`.
void SaveCheckpoint(const std::string& path, const EncoderParams& params,
                    const Vocabulary& vocab);
struct Checkpoint {
  EncoderParams params;
  Vocabulary vocab;
};
Checkpoint LoadCheckpoint(const std::string& path);

std::string FormatReal(double value);

}  // namespace groupflow

#endif  // GROUPFLOW_TRAIN_H_

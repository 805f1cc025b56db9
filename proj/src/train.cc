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

#include "groupflow/train.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "groupflow/error.h"
#include "groupflow/numerics.h"
#include "groupflow/parallel.h"
#include "groupflow/rng.h"
#include "nlohmann/json.hpp"

namespace groupflow {
namespace {

std::vector<Tensor> ZeroLike(const EncoderParams& params) {
  std::vector<Tensor> out;
  params.ForEach([&](const std::string&, const Tensor& t) { out.emplace_back(t.shape()); });
  return out;
}

std::optional<double> Mean(const std::vector<double>& values) {
  if (values.empty()) return std::nullopt;
  double total = 0;
  for (const double v : values) total += v;
  return total / static_cast<double>(values.size());
}

std::string Field(const std::optional<double>& v) {
  return v ? FormatReal(*v) : std::string();
}

// Token mask over the scored positions of an encoding (valid, not a
// structural special or [MASK]); empty unless both values occur.
std::vector<int> UsableMask(const Encoding& encoding,
                            const std::vector<int>& token_mask) {
  std::vector<int> aligned;
  for (std::size_t p = 1; p < encoding.ids.size(); ++p) {
    const int id = encoding.ids[p];
    if (encoding.validity[p] == 0 || id == Vocabulary::kClsId ||
        id == Vocabulary::kSepId || id == Vocabulary::kPadId ||
        id == Vocabulary::kMaskId) {
      continue;
    }
    aligned.push_back(p - 1 < token_mask.size() ? token_mask[p - 1] : 0);
  }
  const auto ones = std::count(aligned.begin(), aligned.end(), 1);
  if (ones == 0 || ones == static_cast<long>(aligned.size())) return {};
  return aligned;
}

}  // namespace

void TrainConfig::Validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::kInvalidConfig, why); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0)) fail("lr must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must be in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be > 0");
  if (!(margin >= 0)) fail("margin must be >= 0");
  if (!(lambda_m >= 0)) fail("lambda_m must be >= 0");
  if (jobs < 1) fail("jobs must be >= 1");
  if (dropout != 0) throw Error(ErrorCode::kUnsupported, "dropout must be 0");
}

std::string FormatReal(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", value);
  return buf;
}

std::string MetricsCsvHeader() {
  return "epoch,split,accuracy,exp_auc,mean_ep,mean_fidelity,mean_spurious_ratio";
}

std::string MetricsCsvLine(const MetricsRow& row) {
  return std::to_string(row.epoch) + "," + row.split + "," + Field(row.accuracy) +
         "," + Field(row.exp_auc) + "," + Field(row.mean_ep) + "," +
         Field(row.mean_fidelity) + "," + Field(row.mean_spurious_ratio);
}

void WriteMetricsCsv(const std::string& path, std::span<const MetricsRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << MetricsCsvHeader() << '\n';
  for (const MetricsRow& r : rows) out << MetricsCsvLine(r) << '\n';
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path);
}

EvalSummary EvaluateRecords(const EncoderParams& params, const Vocabulary& vocab,
                            std::span<const DatasetRecord* const> records,
                            const ExplanationConfig& config, std::size_t jobs,
                            std::uint64_t seed) {
  struct Item {
    ExplanationReport report;
    std::optional<bool> correct;
    std::optional<double> random_fidelity;
  };
  std::vector<Item> items(records.size());
  ParallelFor(records.size(), jobs, [&](std::size_t i) {
    const DatasetRecord& r = *records[i];
    ExplanationDetail detail;
    Item& item = items[i];
    item.report = Explain(params, vocab, r.id, r.molecule, config, &detail);
    if (!params.config.regression() && r.molecule.label) {
      const auto predicted = static_cast<std::size_t>(
          std::max_element(detail.probabilities.begin(), detail.probabilities.end()) -
          detail.probabilities.begin());
      item.correct = predicted == static_cast<std::size_t>(std::llround(*r.molecule.label));
    }
    const std::size_t j = detail.scores.scores.size();
    if (j > 0) {
      Rng rng(DeriveSeed(seed ^ static_cast<std::uint64_t>(r.id), "random-removal"));
      std::vector<std::size_t> removed;
      for (const std::size_t k :
           rng.SampleWithoutReplacement(j, RemovalCount(j, config.removal_ratio))) {
        removed.push_back(detail.scores.token_index[k]);
      }
      item.random_fidelity = FidelityOfRemoval(params, r.molecule.tokens, removed, vocab);
    }
  });

  EvalSummary summary;
  std::vector<double> correct, auc, ep, fidelity, spurious, random_fidelity;
  for (Item& item : items) {
    if (item.correct) correct.push_back(*item.correct ? 1.0 : 0.0);
    if (item.report.auc) auc.push_back(*item.report.auc);
    if (item.report.ep) ep.push_back(*item.report.ep);
    if (item.report.fidelity) fidelity.push_back(*item.report.fidelity);
    if (item.report.spurious_ratio) spurious.push_back(*item.report.spurious_ratio);
    if (item.random_fidelity) random_fidelity.push_back(*item.random_fidelity);
    summary.reports.push_back(std::move(item.report));
  }
  summary.row.accuracy = Mean(correct);
  summary.row.exp_auc = Mean(auc);
  summary.row.mean_ep = Mean(ep);
  summary.row.mean_fidelity = Mean(fidelity);
  summary.row.mean_spurious_ratio = Mean(spurious);
  summary.mean_random_fidelity = Mean(random_fidelity);
  return summary;
}

BatchLoss ComputeBatchLoss(const EncoderParams& params, const Vocabulary& vocab,
                           std::span<const MoleculeString* const> batch,
                           const TrainConfig& config, Method method) {
  BatchLoss result;
  result.gradients = ZeroLike(params);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  std::vector<Encoding> encodings;
  std::vector<std::vector<int>> masks(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const MoleculeString& m = *batch[b];
    if (!m.label) throw Error(ErrorCode::kNoLabels, "training record without a label");
    encodings.push_back(Encode(m, vocab, params.config.max_len));
    if (config.lambda_m > 0 && m.mask) {
      masks[b] = UsableMask(encodings[b], *m.mask);
      if (!masks[b].empty()) ++result.annotated;
    }
  }

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const double label = *batch[b]->label;
    ForwardTrace trace =
        Forward(params, encodings[b].ids, encodings[b].validity, ForwardMode::kTraining);
    Tape& tape = *trace.tape;
    Var loss;
    std::size_t target = 0;
    if (params.config.regression()) {
      const Var diff = tape.Add(
          trace.logits, tape.Constant(Tensor::Scalar(static_cast<Real>(-label))));
      loss = tape.Hadamard(diff, diff);
    } else {
      target = static_cast<std::size_t>(std::llround(label));
      if (target >= params.config.n_classes) {
        throw Error(ErrorCode::kInvalidConfig, "label outside the class range");
      }
      loss = tape.CrossEntropyFromLogits(trace.logits, {target});
    }
    result.cross_entropy += tape.value(loss)[0] * inv_batch;
    Var total = tape.ScalarMul(loss, static_cast<Real>(inv_batch));

    if (!masks[b].empty()) {
      // Gradients of the target logit. Detached by default; with
      // second_order they stay on the tape and L_M differentiates through them.
      Tensor seed = Tensor::Zeros(1, params.config.n_classes);
      seed[target] = 1;
      const std::vector<Var> hidden(trace.hidden.begin() + 1, trace.hidden.end());
      std::vector<Var> state_grads;
      if (config.second_order) {
        state_grads = tape.GradientGraph(trace.logits, seed, hidden);
      } else {
        const Gradients inner = tape.BackwardFrom(trace.logits, seed);
        for (const Var h : hidden) state_grads.push_back(tape.Constant(inner.Of(h)));
      }
      const ImportanceGraph graph = BuildImportanceGraph(
          tape, hidden, trace.attention, state_grads, ScorableRows(trace), method);
      const Var marginal = MarginalLossOnTape(tape, graph.scores, masks[b], config.margin);
      const double share = 1.0 / static_cast<double>(result.annotated);
      result.marginal += tape.value(marginal)[0] * share;
      total = tape.Add(total, tape.ScalarMul(marginal, static_cast<Real>(config.lambda_m * share)));
    }
    const Gradients g = tape.Backward(total);
    for (std::size_t i = 0; i < trace.parameters.size(); ++i) {
      if (!g.Has(trace.parameters[i])) continue;
      const Tensor gi = g.Of(trace.parameters[i]);
      for (std::size_t k = 0; k < gi.size(); ++k) result.gradients[i][k] += gi[k];
    }
  }
  return result;
}

TrainResult Train(EncoderParams& params, const Vocabulary& vocab,
                  const Dataset& dataset, const TrainConfig& config,
                  const ExplanationConfig& explain_config) {
  config.Validate();
  explain_config.Validate();
  std::vector<const MoleculeString*> train;
  for (const DatasetRecord* r : dataset.Select(Split::kTrain)) {
    if (!r->molecule.label) {
      throw Error(ErrorCode::kNoLabels, "record " + std::to_string(r->id) + " has no label");
    }
    train.push_back(&r->molecule);
  }
  if (train.empty()) throw Error(ErrorCode::kNoLabels, "no labelled training records");
  const std::vector<const DatasetRecord*> val = dataset.Select(Split::kVal);
  const std::vector<const DatasetRecord*> test = dataset.Select(Split::kTest);

  Rng rng(DeriveSeed(config.seed, "train"));
  const std::uint64_t eval_seed = DeriveSeed(config.seed, "eval");
  AdamOptimizer adam(config.lr, config.beta1, config.beta2, config.adam_eps);
  TrainResult result;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.Shuffle(order);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<const MoleculeString*> batch;
      for (std::size_t b = start; b < std::min(order.size(), start + config.batch_size); ++b) {
        batch.push_back(train[order[b]]);
      }
      const BatchLoss loss =
          ComputeBatchLoss(params, vocab, batch, config, explain_config.method);
      adam.Step(params, loss.gradients);
      total += loss.cross_entropy + config.lambda_m * loss.marginal;
      ++batches;
    }
    result.epoch_losses.push_back(total / static_cast<double>(batches));
    if (!val.empty() && (config.eval_every_epoch || epoch == config.epochs)) {
      EvalSummary s = EvaluateRecords(params, vocab, val, explain_config, config.jobs, eval_seed);
      s.row.epoch = epoch;
      s.row.split = "val";
      result.metrics.push_back(s.row);
    }
  }
  if (!test.empty()) {
    EvalSummary s = EvaluateRecords(params, vocab, test, explain_config, config.jobs, eval_seed);
    s.row.epoch = config.epochs;
    s.row.split = "test";
    result.metrics.push_back(s.row);
  }
  return result;
}

void SaveCheckpoint(const std::string& path, const EncoderParams& params,
                    const Vocabulary& vocab) {
  SaveTensors(path, params.ToNamed());
  nlohmann::ordered_json sidecar;
  sidecar["encoder"] = params.config.ToJson();
  sidecar["vocab"] = vocab.texts();
  std::ofstream out(path + ".json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path + ".json");
  out << sidecar.dump(2) << '\n';
}

Checkpoint LoadCheckpoint(const std::string& path) {
  std::ifstream in(path + ".json");
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path + ".json");
  nlohmann::json sidecar;
  try {
    sidecar = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedJson, path + ".json: " + e.what());
  }
  const EncoderConfig config = EncoderConfig::FromJson(sidecar.at("encoder"));
  Vocabulary vocab(sidecar.at("vocab").get<std::vector<std::string>>());
  return {EncoderParams::FromNamed(config, LoadTensors(path)), std::move(vocab)};
}

}  // namespace groupflow

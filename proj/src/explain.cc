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

#include "groupflow/explain.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "groupflow/error.h"
#include "nlohmann/json.hpp"

namespace groupflow {
namespace {

bool IsScorable(int id) {
  return id != Vocabulary::kClsId && id != Vocabulary::kSepId &&
         id != Vocabulary::kPadId && id != Vocabulary::kMaskId;
}

struct MaskCounts {
  std::size_t ones = 0;
  std::size_t zeros = 0;
};

MaskCounts CheckMask(std::size_t n_scores, std::span<const int> mask) {
  if (mask.size() != n_scores) {
    throw Error(ErrorCode::kLengthMismatch,
                "mask has " + std::to_string(mask.size()) + " entries for " +
                    std::to_string(n_scores) + " scores");
  }
  MaskCounts counts;
  for (const int m : mask) {
    if (m == 1) {
      ++counts.ones;
    } else if (m == 0) {
      ++counts.zeros;
    } else {
      throw Error(ErrorCode::kDegenerateMask, "mask values must be 0 or 1");
    }
  }
  if (counts.ones == 0 || counts.zeros == 0) {
    throw Error(ErrorCode::kDegenerateMask, "mask needs both 0 and 1 entries");
  }
  return counts;
}

std::pair<double, double> MaskedMeans(std::span<const double> scores,
                                      std::span<const int> mask) {
  const MaskCounts counts = CheckMask(scores.size(), mask);
  double in = 0, out = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    (mask[j] == 1 ? in : out) += scores[j];
  }
  return {in / static_cast<double>(counts.ones),
          out / static_cast<double>(counts.zeros)};
}

Tensor SelectionMatrix(std::size_t n, std::span<const std::size_t> rows) {
  Tensor s = Tensor::Zeros(n, rows.size());
  for (std::size_t j = 0; j < rows.size(); ++j) s.at(rows[j], j) = 1;
  return s;
}

std::vector<double> ToVector(const Tensor& t) {
  return {t.values().begin(), t.values().end()};
}

ImportanceScores Compute(const ForwardTrace& trace, const LayerGradients& grads,
                         Method method) {
  const std::size_t n_layers = trace.num_layers();
  if (grads.compact.size() != n_layers || grads.positions != trace.positions) {
    throw Error(ErrorCode::kTraceGradMismatch,
                "gradients were not computed from this trace");
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (grads.compact[l].shape() != trace.tape->value(trace.hidden[l + 1]).shape()) {
      throw Error(ErrorCode::kTraceGradMismatch, "gradient shape differs from state");
    }
  }
  ImportanceScores out;
  out.method = method;
  const std::vector<std::size_t> rows = ScorableRows(trace);
  for (const std::size_t r : rows) out.token_index.push_back(trace.positions[r] - 1);
  if (rows.empty()) return out;

  Tape tape;
  std::vector<Var> hidden;
  std::vector<std::vector<Var>> attention(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    hidden.push_back(tape.Constant(trace.tape->value(trace.hidden[l + 1])));
    for (const Var a : trace.attention[l]) {
      attention[l].push_back(tape.Constant(trace.tape->value(a)));
    }
  }
  const ImportanceGraph graph =
      BuildImportanceGraph(tape, hidden, attention, grads.compact, rows, method);
  out.scores = ToVector(tape.value(graph.scores));
  for (const Var v : graph.per_layer) out.per_layer.push_back(ToVector(tape.value(v)));
  return out;
}

std::vector<double> Probabilities(const EncoderParams& params,
                                  const std::vector<int>& ids,
                                  const std::vector<int>& validity) {
  const ForwardTrace trace = Forward(params, ids, validity);
  return Classify(params, trace);
}

nlohmann::json OptionalJson(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> OptionalFromJson(const nlohmann::json& json,
                                       const char* key) {
  const auto& v = json.at(key);
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

}  // namespace

std::string_view MethodName(Method method) {
  switch (method) {
    case Method::kInfoFlow: return "info_flow";
    case Method::kAttentionOnly: return "attention_only";
    case Method::kGradInput: return "grad_input";
    case Method::kGradOnly: return "grad_only";
  }
  return "unknown";
}

Method ParseMethod(std::string_view name) {
  for (const Method m : AllMethods()) {
    if (MethodName(m) == name) return m;
  }
  throw Error(ErrorCode::kUnknownMethod, "unknown method '" + std::string(name) + "'");
}

const std::vector<Method>& AllMethods() {
  static const std::vector<Method> methods = {
      Method::kInfoFlow, Method::kAttentionOnly, Method::kGradInput,
      Method::kGradOnly};
  return methods;
}

void ExplanationConfig::Validate() const {
  if (!(removal_ratio > 0 && removal_ratio <= 1)) {
    throw Error(ErrorCode::kInvalidConfig, "removal_ratio must be in (0, 1]");
  }
}

std::vector<double> ImportanceScores::PerToken(std::size_t n_tokens) const {
  std::vector<double> out(n_tokens, 0.0);
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (token_index[j] < n_tokens) out[token_index[j]] = scores[j];
  }
  return out;
}

std::vector<std::size_t> ScorableRows(const ForwardTrace& trace) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < trace.positions.size(); ++i) {
    if (IsScorable(trace.ids[trace.positions[i]])) rows.push_back(i);
  }
  return rows;
}

ImportanceGraph BuildImportanceGraph(Tape& tape, std::span<const Var> hidden,
                                     std::span<const std::vector<Var>> attention,
                                     std::span<const Tensor> grads,
                                     std::span<const std::size_t> rows,
                                     Method method) {
  std::vector<Var> nodes;
  for (const Tensor& g : grads) nodes.push_back(tape.Constant(g));
  return BuildImportanceGraph(tape, hidden, attention, nodes, rows, method);
}

ImportanceGraph BuildImportanceGraph(Tape& tape, std::span<const Var> hidden,
                                     std::span<const std::vector<Var>> attention,
                                     std::span<const Var> grads,
                                     std::span<const std::size_t> rows,
                                     Method method) {
  if (hidden.empty() || hidden.size() != attention.size() ||
      hidden.size() != grads.size()) {
    throw Error(ErrorCode::kTraceGradMismatch, "layer counts disagree");
  }
  if (rows.empty()) {
    throw Error(ErrorCode::kPoolingDegenerate, "no scorable position");
  }
  const std::size_t n = tape.value(hidden[0]).rows();
  const Var select = tape.Constant(SelectionMatrix(n, rows));
  ImportanceGraph graph;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    // Attention received by each key, averaged over queries and heads.
    auto alpha_bar = [&] {
      Var sum = tape.Mean(attention[l][0], 0);
      for (std::size_t h = 1; h < attention[l].size(); ++h) {
        sum = tape.Add(sum, tape.Mean(attention[l][h], 0));
      }
      const Var avg = tape.ScalarMul(sum, 1 / static_cast<Real>(attention[l].size()));
      return tape.Matmul(avg, select);
    };
    auto w_bar = [&] {
      const Var w = tape.Hadamard(grads[l], hidden[l]);
      return tape.Matmul(tape.Transpose(tape.Mean(w, 1)), select);
    };
    Var contribution;
    switch (method) {
      case Method::kInfoFlow:
        contribution = tape.SqrtClamped(
            tape.Hadamard(tape.Tanh(alpha_bar()), tape.Tanh(w_bar())));
        break;
      case Method::kAttentionOnly:
        contribution = alpha_bar();
        break;
      case Method::kGradInput:
        contribution = tape.Relu(tape.Tanh(w_bar()));
        break;
      case Method::kGradOnly: {
        const Tensor& g = tape.value(grads[l]);
        Tensor mean_abs = Tensor::Zeros(1, rows.size());
        for (std::size_t j = 0; j < rows.size(); ++j) {
          double total = 0;
          for (std::size_t c = 0; c < g.cols(); ++c) total += std::abs(g.at(rows[j], c));
          mean_abs[j] = static_cast<Real>(total / static_cast<double>(g.cols()));
        }
        contribution = tape.Constant(std::move(mean_abs));
        break;
      }
    }
    graph.per_layer.push_back(contribution);
  }
  Var total = graph.per_layer[0];
  for (std::size_t l = 1; l < graph.per_layer.size(); ++l) {
    total = tape.Add(total, graph.per_layer[l]);
  }
  graph.scores = tape.Softmax(total, 1);
  return graph;
}

ImportanceScores Importance(const ForwardTrace& trace,
                            const LayerGradients& grads,
                            const ExplanationConfig& config) {
  return Compute(trace, grads, config.method);
}

ImportanceScores BaselineScores(const ForwardTrace& trace,
                                const LayerGradients& grads, Method method) {
  if (method == Method::kInfoFlow) {
    throw Error(ErrorCode::kUnknownMethod, "info_flow is not a baseline");
  }
  return Compute(trace, grads, method);
}

double MarginalLoss(std::span<const double> scores, std::span<const int> mask,
                    double delta) {
  const auto [in, out] = MaskedMeans(scores, mask);
  return std::max(0.0, out - in + delta);
}

Tensor MarginalCoefficients(std::span<const int> mask) {
  const MaskCounts counts = CheckMask(mask.size(), mask);
  Tensor c = Tensor::Zeros(mask.size(), 1);
  for (std::size_t j = 0; j < mask.size(); ++j) {
    c[j] = mask[j] == 1 ? static_cast<Real>(-1.0 / static_cast<double>(counts.ones))
                        : static_cast<Real>(1.0 / static_cast<double>(counts.zeros));
  }
  return c;
}

Var MarginalLossOnTape(Tape& tape, Var scores, std::span<const int> mask,
                       double delta) {
  const Var gap = tape.Matmul(scores, tape.Constant(MarginalCoefficients(mask)));
  return tape.Relu(tape.Add(gap, tape.Constant(Tensor::Scalar(static_cast<Real>(delta)))));
}

double Ep(std::span<const double> scores, std::span<const int> mask) {
  const auto [in, out] = MaskedMeans(scores, mask);
  return (in - out) / out;
}

double ExplanationAuc(std::span<const double> scores, std::span<const int> mask) {
  const MaskCounts counts = CheckMask(scores.size(), mask);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double positive_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t k = i;
    while (k + 1 < order.size() && scores[order[k + 1]] == scores[order[i]]) ++k;
    const double rank = (static_cast<double>(i + k) / 2) + 1;
    for (std::size_t t = i; t <= k; ++t) {
      if (mask[order[t]] == 1) positive_rank_sum += rank;
    }
    i = k + 1;
  }
  const double n1 = static_cast<double>(counts.ones);
  const double n0 = static_cast<double>(counts.zeros);
  return (positive_rank_sum - n1 * (n1 + 1) / 2) / (n1 * n0);
}

double FidelityOfRemoval(const EncoderParams& params,
                         std::span<const Token> tokens,
                         std::span<const std::size_t> removed,
                         const Vocabulary& vocab) {
  const Encoding encoding = Encode(tokens, vocab, params.config.max_len);
  const std::vector<double> before =
      Probabilities(params, encoding.ids, encoding.validity);
  std::vector<int> ids = encoding.ids;
  for (const std::size_t t : removed) {
    const std::size_t p = t + 1;
    if (p < ids.size() && encoding.validity[p] == 1) ids[p] = Vocabulary::kMaskId;
  }
  const std::vector<double> after = Probabilities(params, ids, encoding.validity);
  if (params.config.regression()) return std::abs(before[0] - after[0]);
  const auto c = static_cast<std::size_t>(
      std::max_element(before.begin(), before.end()) - before.begin());
  return before[c] - after[c];
}

std::size_t RemovalCount(std::size_t scorable, double ratio) {
  const auto count = static_cast<std::size_t>(
      std::ceil(ratio * static_cast<double>(scorable) - 1e-9));
  return std::min(count, scorable);
}

std::vector<std::size_t> TopTokens(const ImportanceScores& scores,
                                   std::size_t count) {
  std::vector<std::size_t> order(scores.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores.scores[a] != scores.scores[b]) return scores.scores[a] > scores.scores[b];
    return scores.token_index[a] < scores.token_index[b];
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < order.size() && i < count; ++i) {
    out.push_back(scores.token_index[order[i]]);
  }
  return out;
}

double Fidelity(const EncoderParams& params, std::span<const Token> tokens,
                const ImportanceScores& scores, double ratio,
                const Vocabulary& vocab) {
  const std::vector<std::size_t> removed =
      TopTokens(scores, RemovalCount(scores.scores.size(), ratio));
  return FidelityOfRemoval(params, tokens, removed, vocab);
}

double SpuriousGradientRatio(const LayerGradients& grads,
                             std::span<const std::size_t> token_index,
                             std::span<const int> mask) {
  std::vector<int> aligned;
  for (const std::size_t t : token_index) {
    if (t >= mask.size()) {
      throw Error(ErrorCode::kLengthMismatch, "token index beyond mask");
    }
    aligned.push_back(mask[t]);
  }
  CheckMask(aligned.size(), aligned);
  double causal = 0, spurious = 0;
  for (const Tensor& g : grads.compact) {
    for (std::size_t j = 0; j < token_index.size(); ++j) {
      const auto it = std::find(grads.positions.begin(), grads.positions.end(),
                                token_index[j] + 1);
      if (it == grads.positions.end()) {
        throw Error(ErrorCode::kTraceGradMismatch, "token has no gradient row");
      }
      const auto row = static_cast<std::size_t>(it - grads.positions.begin());
      double mean = 0;
      for (std::size_t c = 0; c < g.cols(); ++c) mean += g.at(row, c);
      mean /= static_cast<double>(g.cols());
      (aligned[j] == 1 ? causal : spurious) += mean * mean;
    }
  }
  causal = std::sqrt(causal);
  spurious = std::sqrt(spurious);
  if (causal + spurious == 0) return 0.5;
  return spurious / (causal + spurious);
}

std::vector<int> AlignMask(const ImportanceScores& scores,
                           std::span<const int> token_mask) {
  std::vector<int> out;
  out.reserve(scores.token_index.size());
  for (const std::size_t t : scores.token_index) {
    if (t >= token_mask.size()) {
      throw Error(ErrorCode::kLengthMismatch, "token index beyond mask");
    }
    out.push_back(token_mask[t]);
  }
  return out;
}

nlohmann::json ExplanationReport::ToJson() const {
  nlohmann::json json;
  json["id"] = id;
  json["tokens"] = tokens;
  json["scores"] = scores;
  json["ep"] = OptionalJson(ep);
  json["auc"] = OptionalJson(auc);
  json["fidelity"] = OptionalJson(fidelity);
  json["spurious_ratio"] = OptionalJson(spurious_ratio);
  json["method"] = std::string(MethodName(method));
  return json;
}

ExplanationReport ExplanationReport::FromJson(const nlohmann::json& json) {
  ExplanationReport report;
  report.id = json.at("id").get<std::int64_t>();
  report.tokens = json.at("tokens").get<std::vector<std::string>>();
  report.scores = json.at("scores").get<std::vector<double>>();
  report.ep = OptionalFromJson(json, "ep");
  report.auc = OptionalFromJson(json, "auc");
  report.fidelity = OptionalFromJson(json, "fidelity");
  report.spurious_ratio = OptionalFromJson(json, "spurious_ratio");
  report.method = ParseMethod(json.at("method").get<std::string>());
  return report;
}

ExplanationReport Explain(const EncoderParams& params, const Vocabulary& vocab,
                          std::int64_t id, const MoleculeString& molecule,
                          const ExplanationConfig& config,
                          ExplanationDetail* detail) {
  config.Validate();
  const Encoding encoding = Encode(molecule, vocab, params.config.max_len);
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  const std::size_t target = ExplanationTarget(params, trace, molecule.label);
  const LayerGradients grads = ComputeLayerGradients(params, trace, target);
  const ImportanceScores scores = Compute(trace, grads, config.method);

  ExplanationReport report;
  report.id = id;
  report.method = config.method;
  report.tokens = DisplayLabels(molecule.tokens);
  report.scores = scores.PerToken(molecule.tokens.size());
  if (detail != nullptr) {
    detail->probabilities = Classify(params, trace);
    detail->scores = scores;
  }
  if (scores.scores.empty()) return report;
  report.fidelity =
      Fidelity(params, molecule.tokens, scores, config.removal_ratio, vocab);
  if (molecule.mask) {
    const std::vector<int> aligned = AlignMask(scores, *molecule.mask);
    const bool has_one = std::count(aligned.begin(), aligned.end(), 1) > 0;
    const bool has_zero = std::count(aligned.begin(), aligned.end(), 0) > 0;
    if (has_one && has_zero) {
      report.ep = Ep(scores.scores, aligned);
      report.auc = ExplanationAuc(scores.scores, aligned);
      report.spurious_ratio =
          SpuriousGradientRatio(grads, scores.token_index, *molecule.mask);
    }
  }
  return report;
}

void WriteReports(const std::string& path,
                  std::span<const ExplanationReport> reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  for (const ExplanationReport& r : reports) out << r.ToJson().dump() << '\n';
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path);
}

std::vector<ExplanationReport> ReadReports(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  std::vector<ExplanationReport> reports;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      reports.push_back(ExplanationReport::FromJson(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw RecordError(ErrorCode::kMalformedRecord, line_no, e.what());
    }
  }
  return reports;
}

}  // namespace groupflow

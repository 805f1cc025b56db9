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

// Token attributions that combine attention and gradient x input signals,
// the marginal alignment loss, and explanation-quality metrics.
//
// Scores live on "scorable" positions: valid, non-special positions plus
// [UNK]. Position p of an encoding corresponds to token p - 1.

#ifndef GROUPFLOW_EXPLAIN_H_
#define GROUPFLOW_EXPLAIN_H_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "groupflow/encoder.h"
#include "groupflow/grammar.h"
#include "groupflow/tape.h"
#include "nlohmann/json_fwd.hpp"

namespace groupflow {

enum class Method { kInfoFlow, kAttentionOnly, kGradInput, kGradOnly };

std::string_view MethodName(Method method);
// Throws kUnknownMethod.
Method ParseMethod(std::string_view name);
const std::vector<Method>& AllMethods();

struct ExplanationConfig {
  Method method = Method::kInfoFlow;
  double removal_ratio = 0.2;

  void Validate() const;  // kInvalidConfig
};

struct ImportanceScores {
  std::vector<std::size_t> token_index;      // molecule token of each score
  std::vector<double> scores;                // softmax output, sums to 1
  std::vector<std::vector<double>> per_layer;  // [l-1][j], pre-softmax
  Method method = Method::kInfoFlow;

  // Scores spread over `n_tokens` token slots, 0 where unscored.
  std::vector<double> PerToken(std::size_t n_tokens) const;
};

// Compact rows of the trace that take part in the score softmax.
std::vector<std::size_t> ScorableRows(const ForwardTrace& trace);

// Records the scores of `method` onto `tape` as a 1 x J node. `hidden` and
// `attention` are nodes on `tape` (layers 1..L); `grads` are the matching
// compact state gradients and enter as constants. The Var overload takes the
// gradients as nodes (e.g. from Tape::GradientGraph); grad_only still uses
// their values only.
struct ImportanceGraph {
  Var scores;
  std::vector<Var> per_layer;
};
ImportanceGraph BuildImportanceGraph(Tape& tape, std::span<const Var> hidden,
                                     std::span<const std::vector<Var>> attention,
                                     std::span<const Tensor> grads,
                                     std::span<const std::size_t> rows,
                                     Method method);
ImportanceGraph BuildImportanceGraph(Tape& tape, std::span<const Var> hidden,
                                     std::span<const std::vector<Var>> attention,
                                     std::span<const Var> grads,
                                     std::span<const std::size_t> rows,
                                     Method method);

// Throws kTraceGradMismatch when `grads` does not belong to `trace`.
ImportanceScores Importance(const ForwardTrace& trace,
                            const LayerGradients& grads,
                            const ExplanationConfig& config = {});
// Throws kUnknownMethod for kInfoFlow.
ImportanceScores BaselineScores(const ForwardTrace& trace,
                                const LayerGradients& grads, Method method);

// max(0, mean_{m=0} v - mean_{m=1} v + delta). Throws kDegenerateMask.
double MarginalLoss(std::span<const double> scores, std::span<const int> mask,
                    double delta);
// Coefficients c with c . v = mean_{m=0} v - mean_{m=1} v.
Tensor MarginalCoefficients(std::span<const int> mask);
// Hinge on the tape; `scores` is 1 x J.
Var MarginalLossOnTape(Tape& tape, Var scores, std::span<const int> mask,
                       double delta);

// (mean_{m=1} v - mean_{m=0} v) / mean_{m=0} v. Throws kDegenerateMask.
double Ep(std::span<const double> scores, std::span<const int> mask);

// Rank-sum ROC AUC with average ranks for ties. Throws kDegenerateMask.
double ExplanationAuc(std::span<const double> scores, std::span<const int> mask);

// Drop in the probability of the originally predicted class (output change
// magnitude in regression mode) after replacing the given tokens by [MASK].
double FidelityOfRemoval(const EncoderParams& params,
                         std::span<const Token> tokens,
                         std::span<const std::size_t> removed,
                         const Vocabulary& vocab);
// Removes the top ceil(ratio * J) scored tokens.
double Fidelity(const EncoderParams& params, std::span<const Token> tokens,
                const ImportanceScores& scores, double ratio,
                const Vocabulary& vocab);
// The tokens Fidelity() would remove; ties go to the lower token index.
std::vector<std::size_t> TopTokens(const ImportanceScores& scores,
                                   std::size_t count);
std::size_t RemovalCount(std::size_t scorable, double ratio);

// |g(1-m)| / (|g(1-m)| + |g m|) over signed, dimension-averaged state
// gradients of every layer. `mask` is per token. Throws kDegenerateMask.
double SpuriousGradientRatio(const LayerGradients& grads,
                             std::span<const std::size_t> token_index,
                             std::span<const int> mask);

// Mask entries of the scored tokens.
std::vector<int> AlignMask(const ImportanceScores& scores,
                           std::span<const int> token_mask);

struct ExplanationReport {
  std::int64_t id = 0;
  std::vector<std::string> tokens;  // display labels
  std::vector<double> scores;       // per token
  std::optional<double> ep;
  std::optional<double> auc;
  std::optional<double> fidelity;
  std::optional<double> spurious_ratio;
  Method method = Method::kInfoFlow;

  nlohmann::json ToJson() const;
  static ExplanationReport FromJson(const nlohmann::json& json);
};

// By-products of Explain() that callers aggregating metrics need.
struct ExplanationDetail {
  std::vector<double> probabilities;
  ImportanceScores scores;
};

// One molecule: forward, gradients for the explanation target, scores and
// every metric whose prerequisites are present.
ExplanationReport Explain(const EncoderParams& params, const Vocabulary& vocab,
                          std::int64_t id, const MoleculeString& molecule,
                          const ExplanationConfig& config,
                          ExplanationDetail* detail = nullptr);

void WriteReports(const std::string& path,
                  std::span<const ExplanationReport> reports);
std::vector<ExplanationReport> ReadReports(const std::string& path);

}  // namespace groupflow

#endif  // GROUPFLOW_EXPLAIN_H_

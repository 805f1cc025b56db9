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

#include "groupflow/selfcheck.h"

#include <algorithm>

#include "groupflow/encoder.h"
#include "groupflow/grammar.h"
#include "groupflow/numerics.h"
#include "groupflow/rng.h"

namespace groupflow {
namespace {

// Cross-entropy of one molecule in double precision, no tape bookkeeping kept.
double Loss(const EncoderParams& params, const Encoding& enc, std::size_t label) {
  const ForwardTrace trace = Forward(params, enc.ids, enc.validity);
  const std::vector<double> z = trace.Logits();
  const double max_z = *std::max_element(z.begin(), z.end());
  double total = 0;
  for (const double v : z) total += std::exp(v - max_z);
  return std::log(total) + max_z - z[label];
}

}  // namespace

SelfCheckResult RunSelfCheck(const SelfCheckConfig& config) {
  Rng rng(config.seed);
  std::vector<std::string> texts = SpecialTexts();
  for (std::size_t i = 0; i < config.n_tokens; ++i) {
    texts.push_back("[t" + std::to_string(i) + "]");
  }
  const Vocabulary vocab(texts);
  EncoderConfig ec;
  ec.layers = config.layers;
  ec.heads = config.heads;
  ec.d_model = config.d_model;
  ec.d_ff = config.d_ff;
  ec.max_len = config.max_len;
  ec.vocab_size = vocab.size();
  ec.seed = config.seed;
  EncoderParams params = InitParams(ec);
  // Larger than the training init so every derivative is well above the
  // finite-difference noise floor.
  params.ForEach([&](const std::string&, Tensor& t) {
    for (Real& v : t.values()) v = static_cast<Real>(rng.Normal(0, config.init_scale));
  });

  std::vector<Token> tokens;
  const std::size_t length = config.max_len - 3;  // leaves PAD positions
  for (std::size_t i = 0; i < length; ++i) {
    tokens.push_back({texts[Vocabulary::kNumSpecials + rng.UniformIndex(config.n_tokens)],
                      TokenKind::kAtom});
  }
  const Encoding enc = Encode(tokens, vocab, ec.max_len);
  const std::size_t label = 1;

  SelfCheckResult result;
  auto record = [&](std::string name, double err, std::size_t count) {
    result.entries.push_back({std::move(name), err});
    result.max_rel_error = std::max(result.max_rel_error, err);
    result.checked += count;
  };

  const LossAndGradients analytic = SupervisedLossGradients(params, enc, label);
  std::size_t index = 0;
  params.ForEach([&](const std::string& name, Tensor& tensor) {
    const Tensor grad = analytic.gradients[index++];
    const Tensor original = tensor;
    auto f = [&](const Tensor& probe) {
      tensor = probe;
      const double loss = Loss(params, enc, label);
      tensor = original;
      return loss;
    };
    if (name == "mlm_bias") return;  // not on the supervised path
    record(name, FiniteDiffCompare(f, original, grad, config.eps), grad.size());
  });

  const ForwardTrace trace = Forward(params, enc.ids, enc.validity);
  const LayerGradients grads = ComputeLayerGradients(params, trace, label);
  for (std::size_t l = 1; l <= ec.layers; ++l) {
    const Tensor h = trace.tape->value(trace.hidden[l]);
    auto f = [&](const Tensor& probe) {
      return LogitsFromLayer(params, trace, l, probe)[label];
    };
    record("hidden" + std::to_string(l),
           FiniteDiffCompare(f, h, grads.compact[l - 1], config.eps), h.size());
  }
  return result;
}

}  // namespace groupflow

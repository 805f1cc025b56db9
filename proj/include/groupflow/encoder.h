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

// A small post-layer-norm Transformer encoder with attention-weighted
// pooling and an MLP head.
//
//   h(0)   = token_embedding[id] + position_embedding[pos]
//   h(l)   = LN(x1 + FFN(x1)),  x1 = LN(h(l-1) + MHA(h(l-1)))
//   alpha  = head-averaged last-layer attention from the [CLS] query,
//            zeroed on structural specials, renormalized
//   pooled = sum_j alpha_j h_j(L)
//   logits = W2 relu(W1 pooled + b1) + b2
//
// The forward pass only evaluates valid (non-PAD) positions. PAD keys are
// excluded from every softmax, so their rows never influence valid
// positions; ForwardTrace reports their states and attention as zero.

#ifndef GROUPFLOW_ENCODER_H_
#define GROUPFLOW_ENCODER_H_

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "groupflow/grammar.h"
#include "groupflow/numerics.h"
#include "groupflow/rng.h"
#include "groupflow/tape.h"
#include "groupflow/tensor.h"
#include "nlohmann/json_fwd.hpp"

namespace groupflow {

inline constexpr Real kLayerNormEps = 1e-5;

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 0;
  std::size_t max_len = 64;
  std::size_t n_classes = 2;  // 1 selects regression
  std::uint64_t seed = 0;

  bool regression() const { return n_classes == 1; }
  std::size_t head_width() const { return d_model / heads; }

  // Throws kInvalidConfig.
  void Validate() const;

  nlohmann::json ToJson() const;
  static EncoderConfig FromJson(const nlohmann::json& json);
};

struct LayerParams {
  Tensor wq, bq, wk, wv, bv, wo, bo;
  Tensor ln1_gain, ln1_bias;
  Tensor w1, b1, w2, b2;
  Tensor ln2_gain, ln2_bias;
};

struct EncoderParams {
  EncoderConfig config;
  Tensor token_embedding;     // vocab_size x d_model
  Tensor position_embedding;  // max_len x d_model
  std::vector<LayerParams> layers;
  Tensor head_w1, head_b1;  // d_model x d_model, 1 x d_model
  Tensor head_w2, head_b2;  // d_model x n_classes, 1 x n_classes
  Tensor mlm_bias;          // 1 x vocab_size; output bias of the tied MLM head

  // Visits every parameter in a fixed order with its checkpoint name.
  template <typename F>
  void ForEach(F&& fn) {
    fn("token_embedding", token_embedding);
    fn("position_embedding", position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      LayerParams& layer = layers[l];
      fn(p + "wq", layer.wq);
      fn(p + "bq", layer.bq);
      fn(p + "wk", layer.wk);
      fn(p + "wv", layer.wv);
      fn(p + "bv", layer.bv);
      fn(p + "wo", layer.wo);
      fn(p + "bo", layer.bo);
      fn(p + "ln1_gain", layer.ln1_gain);
      fn(p + "ln1_bias", layer.ln1_bias);
      fn(p + "w1", layer.w1);
      fn(p + "b1", layer.b1);
      fn(p + "w2", layer.w2);
      fn(p + "b2", layer.b2);
      fn(p + "ln2_gain", layer.ln2_gain);
      fn(p + "ln2_bias", layer.ln2_bias);
    }
    fn("head_w1", head_w1);
    fn("head_b1", head_b1);
    fn("head_w2", head_w2);
    fn("head_b2", head_b2);
    fn("mlm_bias", mlm_bias);
  }
  template <typename F>
  void ForEach(F&& fn) const {
    const_cast<EncoderParams*>(this)->ForEach(
        [&fn](const std::string& name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
  }

  std::size_t ParameterCount() const;
  NamedTensors ToNamed() const;
  static EncoderParams FromNamed(const EncoderConfig& config,
                                 const NamedTensors& named);
};

// Weights ~ N(0, 0.02), biases and layer-norm offsets 0, gains 1.
EncoderParams InitParams(const EncoderConfig& config);

enum class ForwardMode {
  kInference,  // parameters are constants; gradients reach hidden states only
  kTraining,   // parameters are leaves; Backward() yields parameter gradients
};

// Everything recorded by one forward pass. Compact tensors cover the valid
// positions only, in order; `positions[i]` is the encoded position of
// compact row i (position 0 is [CLS]).
struct ForwardTrace {
  std::unique_ptr<Tape> tape;
  std::size_t max_len = 0;
  std::size_t d_model = 0;
  std::vector<int> ids;
  std::vector<int> validity;
  std::vector<std::size_t> positions;

  std::vector<Var> hidden;                  // layers 0..L, each n x d_model
  std::vector<std::vector<Var>> attention;  // [l-1][head], each n x n
  Var pool_weights;                         // 1 x n, sums to 1
  Var pooled;                               // 1 x d_model
  Var logits;                               // 1 x n_classes
  std::vector<Var> parameters;              // EncoderParams::ForEach order

  std::size_t num_layers() const { return attention.size(); }
  std::size_t num_valid() const { return positions.size(); }

  // Padded views over all max_len positions.
  Tensor HiddenState(std::size_t layer) const;  // max_len x d_model
  Tensor Attention(std::size_t layer, std::size_t head) const;  // 1-based layer
  std::vector<double> PoolingWeights() const;                   // max_len
  Tensor Pooled() const;
  std::vector<double> Logits() const;
};

// Throws kLengthMismatch when ids/validity are not max_len long and
// kPoolingDegenerate when no non-special valid position exists.
ForwardTrace Forward(const EncoderParams& params, const std::vector<int>& ids,
                     const std::vector<int>& validity,
                     ForwardMode mode = ForwardMode::kInference);

// Logits obtained by replacing the compact states of `layer` (1..L) with
// `hidden` and re-running the rest of the network.
std::vector<double> LogitsFromLayer(const EncoderParams& params,
                                    const ForwardTrace& trace,
                                    std::size_t layer, const Tensor& hidden);

// softmax(logits); the raw output in regression mode.
std::vector<double> Classify(const EncoderParams& params,
                             const ForwardTrace& trace);

// Gradients of logit `target_class` w.r.t. the states of layers 1..L.
struct LayerGradients {
  std::vector<Tensor> compact;  // [l-1], each n x d_model
  std::vector<std::size_t> positions;
  std::size_t max_len = 0;

  Tensor Padded(std::size_t layer) const;  // 1-based, max_len x d_model
};

LayerGradients ComputeLayerGradients(const EncoderParams& params,
                                     const ForwardTrace& trace,
                                     std::size_t target_class);

// Default explanation target: the label class when known, else argmax.
std::size_t ExplanationTarget(const EncoderParams& params,
                              const ForwardTrace& trace,
                              std::optional<double> label);

struct Prediction {
  std::vector<double> probabilities;
  ForwardTrace trace;
};

Prediction Predict(const EncoderParams& params, const MoleculeString& molecule,
                   const Vocabulary& vocab);
Prediction Predict(const EncoderParams& params, std::span<const Token> tokens,
                   const Vocabulary& vocab);

// Loss value and parameter gradients (ForEach order) of the cross-entropy (or
// squared error in regression mode) of one molecule.
struct LossAndGradients {
  double loss = 0;
  std::vector<Tensor> gradients;
};
LossAndGradients SupervisedLossGradients(const EncoderParams& params,
                                         const Encoding& encoding,
                                         double label);

class AdamOptimizer {
 public:
  AdamOptimizer(double lr, double beta1, double beta2, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void Step(EncoderParams& params, const std::vector<Tensor>& gradients);
  std::size_t steps() const { return step_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t step_ = 0;
  std::vector<Tensor> m_, v_;
};

struct PretrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double mask_rate = 0.15;
  std::uint64_t seed = 0;
};

// Masked-token choice for one molecule: each chosen position with the id
// fed to the model (MASK 80%, random 10%, unchanged 10%).
struct MlmMasking {
  std::vector<std::size_t> positions;  // encoded positions
  std::vector<int> input_ids;          // full max_len ids after corruption
};
MlmMasking SampleMlmMasking(const Encoding& encoding, std::size_t vocab_size,
                            double mask_rate, Rng& rng);

// Mean cross-entropy of predicting the original ids at the masked
// positions via the tied embedding projection; fills gradients when given.
double MlmLoss(const EncoderParams& params, const Encoding& original,
               const MlmMasking& masking, std::vector<Tensor>* gradients);

struct PretrainResult {
  double initial_loss = 0;           // before any update, on the first batch
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

// Throws kEmptyCorpus.
PretrainResult MlmPretrain(EncoderParams& params,
                           std::span<const MoleculeString> corpus,
                           const Vocabulary& vocab,
                           const PretrainConfig& config);

}  // namespace groupflow

#endif  // GROUPFLOW_ENCODER_H_

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

#include "groupflow/encoder.h"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <utility>

#include "groupflow/error.h"
#include "nlohmann/json.hpp"

namespace groupflow {
namespace {

constexpr double kInitStd = 0.02;

struct BoundLayer {
  Var wq, bq, wk, wv, bv, wo, bo, ln1_gain, ln1_bias, w1, b1, w2, b2,
      ln2_gain, ln2_bias;
};

struct BoundParams {
  Var token_embedding, position_embedding;
  std::vector<BoundLayer> layers;
  Var head_w1, head_b1, head_w2, head_b2, mlm_bias;
  std::vector<Var> all;
};

BoundParams Bind(Tape& tape, const EncoderParams& params, bool as_leaves) {
  BoundParams bound;
  params.ForEach([&](const std::string&, const Tensor& t) {
    bound.all.push_back(as_leaves ? tape.Leaf(t) : tape.Constant(t));
  });
  std::size_t i = 0;
  bound.token_embedding = bound.all[i++];
  bound.position_embedding = bound.all[i++];
  bound.layers.resize(params.layers.size());
  for (BoundLayer& layer : bound.layers) {
    for (Var* v : {&layer.wq, &layer.bq, &layer.wk, &layer.wv, &layer.bv,
                   &layer.wo, &layer.bo, &layer.ln1_gain, &layer.ln1_bias,
                   &layer.w1, &layer.b1, &layer.w2, &layer.b2,
                   &layer.ln2_gain, &layer.ln2_bias}) {
      *v = bound.all[i++];
    }
  }
  bound.head_w1 = bound.all[i++];
  bound.head_b1 = bound.all[i++];
  bound.head_w2 = bound.all[i++];
  bound.head_b2 = bound.all[i++];
  bound.mlm_bias = bound.all[i++];
  return bound;
}

// Structural specials carry no content and get no pooling weight. [MASK] and
// [UNK] stand in for content and keep theirs.
bool IsPoolable(int id) {
  return id != Vocabulary::kClsId && id != Vocabulary::kSepId &&
         id != Vocabulary::kPadId;
}

struct LayerOutput {
  Var state;
  std::vector<Var> attention;
};

LayerOutput RunLayer(Tape& tape, const BoundLayer& layer,
                     const EncoderConfig& config, Var x) {
  const std::size_t width = config.head_width();
  const Real scale = 1 / std::sqrt(static_cast<Real>(width));
  const Var q = tape.Add(tape.Matmul(x, layer.wq), layer.bq);
  const Var k = tape.Matmul(x, layer.wk);
  const Var v = tape.Add(tape.Matmul(x, layer.wv), layer.bv);
  LayerOutput out;
  std::vector<Var> head_outputs;
  for (std::size_t h = 0; h < config.heads; ++h) {
    const std::size_t begin = h * width, end = (h + 1) * width;
    const Var qh = tape.Slice(q, 1, begin, end);
    const Var kh = tape.Slice(k, 1, begin, end);
    const Var vh = tape.Slice(v, 1, begin, end);
    const Var scores = tape.ScalarMul(tape.Matmul(qh, tape.Transpose(kh)), scale);
    const Var weights = tape.Softmax(scores, 1);
    out.attention.push_back(weights);
    head_outputs.push_back(tape.Matmul(weights, vh));
  }
  const Var heads = config.heads == 1 ? head_outputs[0]
                                      : tape.Concat(head_outputs, 1);
  const Var attended = tape.Add(tape.Matmul(heads, layer.wo), layer.bo);
  const Var x1 = tape.LayerNorm(tape.Add(x, attended), layer.ln1_gain,
                                layer.ln1_bias, kLayerNormEps);
  const Var hidden = tape.Relu(tape.Add(tape.Matmul(x1, layer.w1), layer.b1));
  const Var ff = tape.Add(tape.Matmul(hidden, layer.w2), layer.b2);
  out.state = tape.LayerNorm(tape.Add(x1, ff), layer.ln2_gain, layer.ln2_bias,
                             kLayerNormEps);
  return out;
}

Tensor PoolMask(const std::vector<int>& ids,
                const std::vector<std::size_t>& positions) {
  Tensor mask = Tensor::Zeros(1, positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    mask[i] = IsPoolable(ids[positions[i]]) ? 1 : 0;
  }
  return mask;
}

// Pooling weights from the [CLS] row (compact row 0) of the last layer.
Var PoolWeights(Tape& tape, const std::vector<Var>& last_attention,
                const Tensor& pool_mask) {
  Var sum = tape.Slice(last_attention[0], 0, 0, 1);
  for (std::size_t h = 1; h < last_attention.size(); ++h) {
    sum = tape.Add(sum, tape.Slice(last_attention[h], 0, 0, 1));
  }
  const Var averaged =
      tape.ScalarMul(sum, 1 / static_cast<Real>(last_attention.size()));
  return tape.Normalize(tape.Hadamard(averaged, tape.Constant(pool_mask)));
}

Var Head(Tape& tape, const BoundParams& bound, Var pooled) {
  const Var hidden =
      tape.Relu(tape.Add(tape.Matmul(pooled, bound.head_w1), bound.head_b1));
  return tape.Add(tape.Matmul(hidden, bound.head_w2), bound.head_b2);
}

Tensor Scatter(const Tensor& compact, const std::vector<std::size_t>& positions,
               std::size_t max_len) {
  Tensor out = Tensor::Zeros(max_len, compact.cols());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t c = 0; c < compact.cols(); ++c) {
      out.at(positions[i], c) = compact.at(i, c);
    }
  }
  return out;
}

Tensor NormalTensor(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = Tensor::Zeros(rows, cols);
  for (Real& v : t.values()) v = static_cast<Real>(rng.Normal(0, kInitStd));
  return t;
}

Tensor Ones(std::size_t rows, std::size_t cols) {
  Tensor t = Tensor::Zeros(rows, cols);
  t.Fill(1);
  return t;
}

std::vector<Tensor> ZeroGradients(const EncoderParams& params) {
  std::vector<Tensor> grads;
  params.ForEach([&](const std::string&, const Tensor& t) {
    grads.emplace_back(t.shape());
  });
  return grads;
}

void AccumulateParameterGradients(const Gradients& grads,
                                  const std::vector<Var>& parameters,
                                  double scale, std::vector<Tensor>& into) {
  for (std::size_t i = 0; i < parameters.size(); ++i) {
    if (!grads.Has(parameters[i])) continue;
    const Tensor g = grads.Of(parameters[i]);
    for (std::size_t k = 0; k < g.size(); ++k) {
      into[i][k] += static_cast<Real>(scale * g[k]);
    }
  }
}

}  // namespace

void EncoderConfig::Validate() const {
  auto fail = [](const std::string& why) {
    throw Error(ErrorCode::kInvalidConfig, why);
  };
  if (layers < 1) fail("layers must be >= 1");
  if (heads < 1) fail("heads must be >= 1");
  if (d_model < 1 || d_model % heads != 0) {
    fail("d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
         std::to_string(heads) + ")");
  }
  if (d_ff < 1) fail("d_ff must be >= 1");
  if (vocab_size <= static_cast<std::size_t>(Vocabulary::kNumSpecials)) {
    fail("vocab_size must exceed the special-token count");
  }
  if (max_len < 2) fail("max_len must be >= 2");
  if (n_classes < 1) fail("n_classes must be >= 1");
}

nlohmann::json EncoderConfig::ToJson() const {
  return {{"layers", layers},         {"heads", heads},
          {"d_model", d_model},       {"d_ff", d_ff},
          {"vocab_size", vocab_size}, {"max_len", max_len},
          {"n_classes", n_classes},   {"seed", seed}};
}

EncoderConfig EncoderConfig::FromJson(const nlohmann::json& json) {
  EncoderConfig config;
  try {
    config.layers = json.at("layers").get<std::size_t>();
    config.heads = json.at("heads").get<std::size_t>();
    config.d_model = json.at("d_model").get<std::size_t>();
    config.d_ff = json.at("d_ff").get<std::size_t>();
    config.vocab_size = json.at("vocab_size").get<std::size_t>();
    config.max_len = json.at("max_len").get<std::size_t>();
    config.n_classes = json.at("n_classes").get<std::size_t>();
    config.seed = json.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("encoder config: ") + e.what());
  }
  config.Validate();
  return config;
}

std::size_t EncoderParams::ParameterCount() const {
  std::size_t total = 0;
  ForEach([&](const std::string&, const Tensor& t) { total += t.size(); });
  return total;
}

NamedTensors EncoderParams::ToNamed() const {
  NamedTensors named;
  ForEach([&](const std::string& name, const Tensor& t) { named.emplace_back(name, t); });
  return named;
}

EncoderParams EncoderParams::FromNamed(const EncoderConfig& config,
                                       const NamedTensors& named) {
  EncoderParams params = InitParams(config);
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [name, tensor] : named) by_name[name] = &tensor;
  params.ForEach([&](const std::string& name, Tensor& t) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw Error(ErrorCode::kInvalidConfig, "checkpoint lacks tensor " + name);
    }
    if (it->second->shape() != t.shape()) {
      throw Error(ErrorCode::kShapeMismatch,
                  name + ": checkpoint shape " + ShapeToString(it->second->shape()) +
                      ", expected " + ShapeToString(t.shape()));
    }
    t = *it->second;
  });
  if (by_name.size() != named.size() || named.size() != params.ToNamed().size()) {
    throw Error(ErrorCode::kInvalidConfig, "checkpoint has unexpected tensors");
  }
  return params;
}

EncoderParams InitParams(const EncoderConfig& config) {
  config.Validate();
  Rng rng(config.seed);
  const std::size_t d = config.d_model;
  EncoderParams params;
  params.config = config;
  params.token_embedding = NormalTensor(config.vocab_size, d, rng);
  params.position_embedding = NormalTensor(config.max_len, d, rng);
  params.layers.resize(config.layers);
  for (LayerParams& layer : params.layers) {
    layer.wq = NormalTensor(d, d, rng);
    layer.bq = Tensor::Zeros(1, d);
    layer.wk = NormalTensor(d, d, rng);
    layer.wv = NormalTensor(d, d, rng);
    layer.bv = Tensor::Zeros(1, d);
    layer.wo = NormalTensor(d, d, rng);
    layer.bo = Tensor::Zeros(1, d);
    layer.ln1_gain = Ones(1, d);
    layer.ln1_bias = Tensor::Zeros(1, d);
    layer.w1 = NormalTensor(d, config.d_ff, rng);
    layer.b1 = Tensor::Zeros(1, config.d_ff);
    layer.w2 = NormalTensor(config.d_ff, d, rng);
    layer.b2 = Tensor::Zeros(1, d);
    layer.ln2_gain = Ones(1, d);
    layer.ln2_bias = Tensor::Zeros(1, d);
  }
  params.head_w1 = NormalTensor(d, d, rng);
  params.head_b1 = Tensor::Zeros(1, d);
  params.head_w2 = NormalTensor(d, config.n_classes, rng);
  params.head_b2 = Tensor::Zeros(1, config.n_classes);
  params.mlm_bias = Tensor::Zeros(1, config.vocab_size);
  return params;
}

Tensor ForwardTrace::HiddenState(std::size_t layer) const {
  return Scatter(tape->value(hidden.at(layer)), positions, max_len);
}

Tensor ForwardTrace::Attention(std::size_t layer, std::size_t head) const {
  const Tensor& compact = tape->value(attention.at(layer - 1).at(head));
  Tensor out = Tensor::Zeros(max_len, max_len);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = 0; j < positions.size(); ++j) {
      out.at(positions[i], positions[j]) = compact.at(i, j);
    }
  }
  return out;
}

std::vector<double> ForwardTrace::PoolingWeights() const {
  const Tensor& compact = tape->value(pool_weights);
  std::vector<double> out(max_len, 0.0);
  for (std::size_t i = 0; i < positions.size(); ++i) out[positions[i]] = compact[i];
  return out;
}

Tensor ForwardTrace::Pooled() const { return tape->value(pooled); }

std::vector<double> ForwardTrace::Logits() const {
  const Tensor& z = tape->value(logits);
  return {z.values().begin(), z.values().end()};
}

ForwardTrace Forward(const EncoderParams& params, const std::vector<int>& ids,
                     const std::vector<int>& validity, ForwardMode mode) {
  const EncoderConfig& config = params.config;
  if (ids.size() != config.max_len || validity.size() != config.max_len) {
    throw Error(ErrorCode::kLengthMismatch,
                "expected " + std::to_string(config.max_len) + " ids, got " +
                    std::to_string(ids.size()) + " ids and " +
                    std::to_string(validity.size()) + " validity flags");
  }
  if (ids[0] != Vocabulary::kClsId || validity[0] != 1) {
    throw Error(ErrorCode::kInvalidConfig, "position 0 must be a valid [CLS]");
  }
  ForwardTrace trace;
  trace.tape = std::make_unique<Tape>();
  trace.max_len = config.max_len;
  trace.d_model = config.d_model;
  trace.ids = ids;
  trace.validity = validity;
  std::vector<std::size_t> token_ids;
  for (std::size_t p = 0; p < ids.size(); ++p) {
    if (validity[p] == 0) continue;
    if (ids[p] < 0 || static_cast<std::size_t>(ids[p]) >= config.vocab_size) {
      throw Error(ErrorCode::kInvalidConfig,
                  "token id " + std::to_string(ids[p]) + " out of range");
    }
    trace.positions.push_back(p);
    token_ids.push_back(static_cast<std::size_t>(ids[p]));
  }
  const Tensor pool_mask = PoolMask(ids, trace.positions);
  if (std::none_of(pool_mask.values().begin(), pool_mask.values().end(),
                   [](Real v) { return v > 0; })) {
    throw Error(ErrorCode::kPoolingDegenerate, "no non-special valid position");
  }

  Tape& tape = *trace.tape;
  const bool training = mode == ForwardMode::kTraining;
  const BoundParams bound = Bind(tape, params, training);
  trace.parameters = bound.all;

  Var x;
  if (training) {
    x = tape.Add(tape.EmbeddingLookup(bound.token_embedding, token_ids),
                 tape.EmbeddingLookup(bound.position_embedding, trace.positions));
  } else {
    // Recorded as a leaf so inference still yields gradients at every layer.
    Tensor h0 = Tensor::Zeros(trace.positions.size(), config.d_model);
    for (std::size_t i = 0; i < trace.positions.size(); ++i) {
      for (std::size_t c = 0; c < config.d_model; ++c) {
        h0.at(i, c) = params.token_embedding.at(token_ids[i], c) +
                      params.position_embedding.at(trace.positions[i], c);
      }
    }
    x = tape.Leaf(std::move(h0));
  }
  trace.hidden.push_back(x);
  for (const BoundLayer& layer : bound.layers) {
    LayerOutput out = RunLayer(tape, layer, config, x);
    x = out.state;
    trace.hidden.push_back(x);
    trace.attention.push_back(std::move(out.attention));
  }
  trace.pool_weights = PoolWeights(tape, trace.attention.back(), pool_mask);
  trace.pooled = tape.Matmul(trace.pool_weights, x);
  trace.logits = Head(tape, bound, trace.pooled);
  return trace;
}

std::vector<double> LogitsFromLayer(const EncoderParams& params,
                                    const ForwardTrace& trace,
                                    std::size_t layer, const Tensor& hidden) {
  const std::size_t num_layers = params.layers.size();
  if (layer < 1 || layer > num_layers) {
    throw Error(ErrorCode::kInvalidConfig, "layer out of range");
  }
  Tape tape;
  const BoundParams bound = Bind(tape, params, false);
  Var x = tape.Leaf(hidden);
  std::vector<Var> last_attention;
  for (std::size_t l = layer; l < num_layers; ++l) {
    LayerOutput out = RunLayer(tape, bound.layers[l], params.config, x);
    x = out.state;
    last_attention = std::move(out.attention);
  }
  if (layer == num_layers) {
    // The last layer's attention is computed from h(L-1), so it is fixed.
    for (const Var a : trace.attention.back()) {
      last_attention.push_back(tape.Constant(trace.tape->value(a)));
    }
  }
  const Var weights =
      PoolWeights(tape, last_attention, PoolMask(trace.ids, trace.positions));
  const Var logits = Head(tape, bound, tape.Matmul(weights, x));
  const Tensor& z = tape.value(logits);
  return {z.values().begin(), z.values().end()};
}

std::vector<double> Classify(const EncoderParams& params,
                             const ForwardTrace& trace) {
  std::vector<double> z = trace.Logits();
  if (params.config.regression()) return z;
  const double max_z = *std::max_element(z.begin(), z.end());
  double total = 0;
  for (double& v : z) {
    v = std::exp(v - max_z);
    total += v;
  }
  for (double& v : z) v /= total;
  return z;
}

Tensor LayerGradients::Padded(std::size_t layer) const {
  return Scatter(compact.at(layer - 1), positions, max_len);
}

LayerGradients ComputeLayerGradients(const EncoderParams& params,
                                     const ForwardTrace& trace,
                                     std::size_t target_class) {
  const std::size_t n_out = params.config.n_classes;
  if (target_class >= n_out) {
    throw Error(ErrorCode::kInvalidConfig, "target class out of range");
  }
  Tensor seed = Tensor::Zeros(1, n_out);
  seed[target_class] = 1;
  const Gradients grads = trace.tape->BackwardFrom(trace.logits, seed);
  LayerGradients out;
  out.positions = trace.positions;
  out.max_len = trace.max_len;
  for (std::size_t l = 1; l < trace.hidden.size(); ++l) {
    out.compact.push_back(grads.Of(trace.hidden[l]));
  }
  return out;
}

std::size_t ExplanationTarget(const EncoderParams& params,
                              const ForwardTrace& trace,
                              std::optional<double> label) {
  if (params.config.regression()) return 0;
  if (label) {
    const auto c = static_cast<std::size_t>(std::llround(*label));
    if (c < params.config.n_classes) return c;
  }
  const std::vector<double> z = trace.Logits();
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

Prediction Predict(const EncoderParams& params, std::span<const Token> tokens,
                   const Vocabulary& vocab) {
  const Encoding encoding = Encode(tokens, vocab, params.config.max_len);
  Prediction prediction;
  prediction.trace = Forward(params, encoding.ids, encoding.validity);
  prediction.probabilities = Classify(params, prediction.trace);
  return prediction;
}

Prediction Predict(const EncoderParams& params, const MoleculeString& molecule,
                   const Vocabulary& vocab) {
  return Predict(params, molecule.tokens, vocab);
}

LossAndGradients SupervisedLossGradients(const EncoderParams& params,
                                         const Encoding& encoding,
                                         double label) {
  ForwardTrace trace =
      Forward(params, encoding.ids, encoding.validity, ForwardMode::kTraining);
  Tape& tape = *trace.tape;
  Var loss;
  if (params.config.regression()) {
    const Var diff = tape.Add(trace.logits, tape.Constant(Tensor::Scalar(static_cast<Real>(-label))));
    loss = tape.Hadamard(diff, diff);
  } else {
    loss = tape.CrossEntropyFromLogits(
        trace.logits, {static_cast<std::size_t>(std::llround(label))});
  }
  LossAndGradients out;
  out.loss = tape.value(loss)[0];
  out.gradients = ZeroGradients(params);
  AccumulateParameterGradients(tape.Backward(loss), trace.parameters, 1.0,
                               out.gradients);
  return out;
}

void AdamOptimizer::Step(EncoderParams& params,
                         const std::vector<Tensor>& gradients) {
  if (m_.empty()) {
    params.ForEach([&](const std::string&, const Tensor& t) {
      m_.emplace_back(t.shape());
      v_.emplace_back(t.shape());
    });
  }
  ++step_;
  const double correction1 = 1 - std::pow(beta1_, static_cast<double>(step_));
  const double correction2 = 1 - std::pow(beta2_, static_cast<double>(step_));
  std::size_t i = 0;
  params.ForEach([&](const std::string&, Tensor& t) {
    const Tensor& g = gradients[i];
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t k = 0; k < t.size(); ++k) {
      m[k] = static_cast<Real>(beta1_ * m[k] + (1 - beta1_) * g[k]);
      v[k] = static_cast<Real>(beta2_ * v[k] + (1 - beta2_) * g[k] * g[k]);
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      t[k] -= static_cast<Real>(lr_ * m_hat / (std::sqrt(v_hat) + eps_));
    }
    ++i;
  });
}

MlmMasking SampleMlmMasking(const Encoding& encoding, std::size_t vocab_size,
                            double mask_rate, Rng& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t p = 1; p < encoding.ids.size(); ++p) {
    if (encoding.validity[p] == 1) candidates.push_back(p);
  }
  MlmMasking masking;
  masking.input_ids = encoding.ids;
  if (candidates.empty()) return masking;
  const auto count = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(mask_rate * static_cast<double>(candidates.size()))));
  for (const std::size_t pick : rng.SampleWithoutReplacement(candidates.size(), count)) {
    masking.positions.push_back(candidates[pick]);
  }
  std::sort(masking.positions.begin(), masking.positions.end());
  const std::size_t n_regular = vocab_size - Vocabulary::kNumSpecials;
  for (const std::size_t p : masking.positions) {
    const double r = rng.Uniform();
    if (r < 0.8) {
      masking.input_ids[p] = Vocabulary::kMaskId;
    } else if (r < 0.9 && n_regular > 0) {
      masking.input_ids[p] =
          Vocabulary::kNumSpecials + static_cast<int>(rng.UniformIndex(n_regular));
    }
  }
  return masking;
}

double MlmLoss(const EncoderParams& params, const Encoding& original,
               const MlmMasking& masking, std::vector<Tensor>* gradients) {
  if (masking.positions.empty()) return 0;
  ForwardTrace trace = Forward(params, masking.input_ids, original.validity,
                               ForwardMode::kTraining);
  Tape& tape = *trace.tape;
  // One-hot rows selecting the masked positions from the compact states.
  Tensor select = Tensor::Zeros(masking.positions.size(), trace.num_valid());
  std::vector<std::size_t> targets;
  for (std::size_t r = 0; r < masking.positions.size(); ++r) {
    const auto it = std::find(trace.positions.begin(), trace.positions.end(),
                              masking.positions[r]);
    select.at(r, static_cast<std::size_t>(it - trace.positions.begin())) = 1;
    targets.push_back(static_cast<std::size_t>(original.ids[masking.positions[r]]));
  }
  const Var states = tape.Matmul(tape.Constant(std::move(select)), trace.hidden.back());
  const Var token_embedding = trace.parameters[0];
  const Var mlm_bias = trace.parameters.back();
  const Var logits = tape.Add(tape.Matmul(states, tape.Transpose(token_embedding)), mlm_bias);
  const Var loss = tape.CrossEntropyFromLogits(logits, std::move(targets));
  if (gradients != nullptr) {
    AccumulateParameterGradients(tape.Backward(loss), trace.parameters, 1.0, *gradients);
  }
  return tape.value(loss)[0];
}

PretrainResult MlmPretrain(EncoderParams& params,
                           std::span<const MoleculeString> corpus,
                           const Vocabulary& vocab,
                           const PretrainConfig& config) {
  if (corpus.empty()) throw Error(ErrorCode::kEmptyCorpus, "nothing to pretrain on");
  if (config.batch_size < 1) throw Error(ErrorCode::kInvalidConfig, "batch_size must be >= 1");
  Rng rng(config.seed);
  AdamOptimizer adam(config.lr, 0.9, 0.999, 1e-8);
  std::vector<Encoding> encodings;
  encodings.reserve(corpus.size());
  for (const MoleculeString& m : corpus) {
    encodings.push_back(Encode(m, vocab, params.config.max_len));
  }
  PretrainResult result;
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  bool first = true;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.Shuffle(order);
    double epoch_loss = 0;
    std::size_t counted = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> grads = ZeroGradients(params);
      double batch_loss = 0;
      std::size_t batch_count = 0;
      for (std::size_t b = start; b < end; ++b) {
        const Encoding& enc = encodings[order[b]];
        const MlmMasking masking =
            SampleMlmMasking(enc, params.config.vocab_size, config.mask_rate, rng);
        if (masking.positions.empty()) continue;
        std::vector<Tensor> sample_grads = ZeroGradients(params);
        batch_loss += MlmLoss(params, enc, masking, &sample_grads);
        for (std::size_t i = 0; i < grads.size(); ++i) {
          for (std::size_t k = 0; k < grads[i].size(); ++k) grads[i][k] += sample_grads[i][k];
        }
        ++batch_count;
      }
      if (batch_count == 0) continue;
      for (Tensor& g : grads) {
        for (Real& v : g.values()) v /= static_cast<Real>(batch_count);
      }
      if (first) {
        result.initial_loss = batch_loss / static_cast<double>(batch_count);
        first = false;
      }
      adam.Step(params, grads);
      epoch_loss += batch_loss;
      counted += batch_count;
    }
    result.epoch_losses.push_back(counted ? epoch_loss / static_cast<double>(counted) : 0.0);
  }
  return result;
}

}  // namespace groupflow

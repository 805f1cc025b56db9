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

#include <cmath>
#include <numeric>
#include <vector>

#include "groupflow/encoder.h"
#include "groupflow/error.h"
#include "groupflow/numerics.h"
#include "gtest/gtest.h"
#include "nlohmann/json.hpp"
#include "test_util.h"

namespace groupflow {
namespace {

using testing::Molecule;
using testing::RandomModel;
using testing::SmallRegistry;
using testing::VocabFor;

class EncoderTest : public ::testing::Test {
 protected:
  GroupRegistry registry = SmallRegistry();
  Vocabulary vocab = VocabFor(registry);
  EncoderParams params = RandomModel(vocab.size(), 11);
  MoleculeString molecule = Molecule("[benzene][amine][nitro][hydroxyl][benzene]", registry);
  Encoding encoding = Encode(molecule, vocab, 12);
};

TEST_F(EncoderTest, AttentionRowsSumToOneOverValidKeys) {
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  for (std::size_t l = 1; l <= 2; ++l) {
    for (std::size_t h = 0; h < 2; ++h) {
      const Tensor a = trace.Attention(l, h);
      for (std::size_t q = 0; q < 12; ++q) {
        double sum = 0;
        for (std::size_t k = 0; k < 12; ++k) {
          if (!encoding.validity[k] || !encoding.validity[q]) {
            EXPECT_EQ(a.at(q, k), 0.0);
          }
          sum += a.at(q, k);
        }
        EXPECT_NEAR(sum, encoding.validity[q] ? 1.0 : 0.0, 1e-12);
      }
    }
  }
}

TEST_F(EncoderTest, PooledIsWeightedAverageOfLastStates) {
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  const std::vector<double> alpha = trace.PoolingWeights();
  EXPECT_EQ(alpha[0], 0.0);  // [CLS] never pools
  EXPECT_NEAR(std::accumulate(alpha.begin(), alpha.end(), 0.0), 1.0, 1e-12);
  const Tensor h = trace.HiddenState(2);
  const Tensor pooled = trace.Pooled();
  for (std::size_t c = 0; c < 8; ++c) {
    double direct = 0;
    for (std::size_t p = 0; p < 12; ++p) direct += alpha[p] * h.at(p, c);
    EXPECT_NEAR(pooled[c], direct, 1e-12);
  }
  // The CLS-query attention of the last layer, head-averaged and renormalized.
  const Tensor a0 = trace.Attention(2, 0), a1 = trace.Attention(2, 1);
  double total = 0;
  for (std::size_t p = 1; p <= 5; ++p) total += 0.5 * (a0.at(0, p) + a1.at(0, p));
  for (std::size_t p = 1; p <= 5; ++p) {
    EXPECT_NEAR(alpha[p], 0.5 * (a0.at(0, p) + a1.at(0, p)) / total, 1e-12);
  }
}

TEST_F(EncoderTest, PaddingLengthDoesNotChangeOutputs) {
  EncoderParams longer = RandomModel(vocab.size(), 11, 20);
  EncoderParams shorter = longer;
  shorter.config.max_len = 12;
  shorter.position_embedding = Tensor::Zeros(12, 8);
  for (std::size_t r = 0; r < 12; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      shorter.position_embedding.at(r, c) = longer.position_embedding.at(r, c);
    }
  }
  const auto a = Predict(shorter, molecule, vocab).probabilities;
  const auto b = Predict(longer, molecule, vocab).probabilities;
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST_F(EncoderTest, PredictIsDeterministicAndMatchesComposition) {
  const Prediction p1 = Predict(params, molecule, vocab);
  const Prediction p2 = Predict(params, molecule, vocab);
  EXPECT_EQ(p1.probabilities, p2.probabilities);
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  EXPECT_EQ(p1.probabilities, Classify(params, trace));
  EXPECT_NEAR(p1.probabilities[0] + p1.probabilities[1], 1.0, 1e-12);
  const auto logits = trace.Logits();
  EXPECT_NEAR(p1.probabilities[1], 1.0 / (1.0 + std::exp(logits[0] - logits[1])), 1e-12);
}

TEST_F(EncoderTest, Errors) {
  MoleculeString empty;
  try {
    Predict(params, empty, vocab);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kPoolingDegenerate);
  }
  try {
    Forward(params, std::vector<int>(5, 0), std::vector<int>(5, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kLengthMismatch);
  }
  Encoding bad = encoding;
  bad.ids[1] = static_cast<int>(vocab.size()) + 3;
  EXPECT_THROW(Forward(params, bad.ids, bad.validity), Error);
  EncoderConfig c = params.config;
  c.heads = 3;
  EXPECT_THROW(c.Validate(), Error);
}

TEST_F(EncoderTest, LogitsFromLayerReproducesForward) {
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  for (std::size_t l = 1; l <= 2; ++l) {
    const Tensor compact = trace.tape->value(trace.hidden[l]);
    const auto logits = LogitsFromLayer(params, trace, l, compact);
    const auto direct = trace.Logits();
    for (std::size_t k = 0; k < logits.size(); ++k) EXPECT_NEAR(logits[k], direct[k], 1e-12);
  }
}

TEST_F(EncoderTest, LayerGradientsMatchFiniteDifferences) {
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  for (std::size_t target = 0; target < 2; ++target) {
    const LayerGradients g = ComputeLayerGradients(params, trace, target);
    for (std::size_t l = 1; l <= 2; ++l) {
      const double err = FiniteDiffCompare(
          [&](const Tensor& h) { return LogitsFromLayer(params, trace, l, h)[target]; },
          trace.tape->value(trace.hidden[l]), g.compact[l - 1], 1e-5);
      EXPECT_LT(err, 1e-5) << "layer " << l;
    }
  }
}

TEST_F(EncoderTest, SupervisedGradientsMatchFiniteDifferences) {
  const LossAndGradients lg = SupervisedLossGradients(params, encoding, 1);
  std::size_t index = 0;
  params.ForEach([&](const std::string& name, Tensor& t) {
    const std::size_t mine = index++;
    if (name != "head_w2" && name != "layer1.wq" && name != "token_embedding") return;
    const double err = FiniteDiffCompare(
        [&](const Tensor& value) {
          EncoderParams copy = params;
          std::size_t j = 0;
          copy.ForEach([&](const std::string&, Tensor& u) {
            if (j++ == mine) u = value;
          });
          return SupervisedLossGradients(copy, encoding, 1).loss;
        },
        t, lg.gradients[mine], 1e-6);
    EXPECT_LT(err, 1e-4) << name;
  });
}

TEST_F(EncoderTest, RegressionHeadReturnsRawOutput) {
  EncoderParams reg = RandomModel(vocab.size(), 5, 12, 1);
  const ForwardTrace trace = Forward(reg, encoding.ids, encoding.validity);
  const auto out = Classify(reg, trace);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], trace.Logits()[0]);
  const LossAndGradients lg = SupervisedLossGradients(reg, encoding, 0.5);
  EXPECT_NEAR(lg.loss, (out[0] - 0.5) * (out[0] - 0.5), 1e-12);
}

TEST_F(EncoderTest, ConfigAndParamsRoundTrip) {
  const EncoderConfig back = EncoderConfig::FromJson(params.config.ToJson());
  EXPECT_EQ(back.ToJson(), params.config.ToJson());
  const EncoderParams copy = EncoderParams::FromNamed(params.config, params.ToNamed());
  EXPECT_EQ(copy.ToNamed(), params.ToNamed());
  NamedTensors broken = params.ToNamed();
  broken[0].second = Tensor::Zeros(1, 1);
  EXPECT_THROW(EncoderParams::FromNamed(params.config, broken), Error);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  EncoderConfig c;
  c.vocab_size = 6;
  c.d_model = 4;
  c.d_ff = 4;
  c.max_len = 4;
  c.layers = 1;
  EncoderParams p = InitParams(c);
  const EncoderParams before = p;
  std::vector<Tensor> grads;
  p.ForEach([&](const std::string&, Tensor& t) {
    Tensor g = t;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (i % 2 ? 0.5 : -2.0);
    grads.push_back(g);
  });
  AdamOptimizer adam(0.01, 0.9, 0.999, 1e-8);
  adam.Step(p, grads);
  std::size_t k = 0;
  const NamedTensors b = before.ToNamed(), a = p.ToNamed();
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (std::size_t i = 0; i < a[t].second.size(); ++i) {
      const double g = grads[t][i];
      EXPECT_NEAR(a[t].second[i] - b[t].second[i], -0.01 * g / (std::abs(g) + 1e-8), 1e-12);
      ++k;
    }
  }
  EXPECT_EQ(k, p.ParameterCount());
}

TEST(Mlm, MaskingCountsAndSplit) {
  const GroupRegistry registry = SmallRegistry();
  const Vocabulary vocab = VocabFor(registry);
  const MoleculeString m = Molecule("[benzene][amine][nitro][hydroxyl][benzene][amine]", registry);
  const Encoding e = Encode(m, vocab, 10);
  Rng rng(4);
  std::size_t masked = 0, kept = 0, total = 0;
  for (int trial = 0; trial < 4000; ++trial) {
    const MlmMasking mk = SampleMlmMasking(e, vocab.size(), 0.34, rng);
    ASSERT_EQ(mk.positions.size(), 2u);  // round(0.34 * 6)
    for (const std::size_t p : mk.positions) {
      ASSERT_GE(p, 1u);
      ASSERT_LE(p, 6u);
      ++total;
      if (mk.input_ids[p] == Vocabulary::kMaskId) ++masked;
      if (mk.input_ids[p] == e.ids[p]) ++kept;
    }
  }
  EXPECT_NEAR(static_cast<double>(masked) / total, 0.8, 0.02);
  // Unchanged 10% plus random draws that hit the original id.
  EXPECT_GT(static_cast<double>(kept) / total, 0.09);
  EXPECT_LT(static_cast<double>(kept) / total, 0.13);
  EXPECT_EQ(SampleMlmMasking(e, vocab.size(), 0.01, rng).positions.size(), 1u);
}

TEST(Mlm, PretrainingLowersLoss) {
  const GroupRegistry registry = SmallRegistry();
  const Vocabulary vocab = VocabFor(registry);
  std::vector<MoleculeString> corpus;
  for (int i = 0; i < 40; ++i) {
    corpus.push_back(Molecule(i % 2 ? "[benzene][nitro][benzene][nitro]"
                                    : "[amine][hydroxyl][amine][hydroxyl]",
                              registry));
  }
  EncoderConfig c;
  c.vocab_size = vocab.size();
  c.d_model = 16;
  c.d_ff = 32;
  c.max_len = 8;
  c.seed = 2;
  EncoderParams p = InitParams(c);
  PretrainConfig pc;
  pc.epochs = 20;
  pc.lr = 1e-2;
  pc.mask_rate = 0.25;
  const PretrainResult r = MlmPretrain(p, corpus, vocab, pc);
  ASSERT_EQ(r.epoch_losses.size(), 20u);
  EXPECT_LT(r.epoch_losses.back(), 0.7 * r.initial_loss);
  EXPECT_THROW(MlmPretrain(p, std::span<const MoleculeString>(), vocab, pc), Error);
}

}  // namespace
}  // namespace groupflow

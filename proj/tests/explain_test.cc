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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "groupflow/encoder.h"
#include "groupflow/error.h"
#include "groupflow/explain.h"
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

// Pairwise definition of AUC: P(score of a positive > score of a negative),
// ties counted as one half.
double PairwiseAuc(const std::vector<double>& s, const std::vector<int>& m) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (m[i] != 1 || m[j] != 0) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

TEST(Metrics, EpAndMarginalLossExamples) {
  const std::vector<double> v = {0.6, 0.2, 0.2};
  const std::vector<int> m = {1, 0, 0};
  // (0.6 - 0.2) / 0.2 is not representable exactly in binary floating point.
  EXPECT_NEAR(Ep(v, m), 2.0, 1e-12);
  EXPECT_EQ(MarginalLoss(v, m, 0.1), 0.0);
  const std::vector<double> flat = {0.3, 0.4, 0.3};
  EXPECT_NEAR(MarginalLoss(flat, m, 0.1), 0.35 - 0.3 + 0.1, 1e-15);
  EXPECT_THROW(Ep(v, std::vector<int>{0, 0, 0}), Error);
  EXPECT_THROW(Ep(v, std::vector<int>{1, 1, 1}), Error);
  EXPECT_THROW(MarginalLoss(v, std::vector<int>{1, 0}, 0.1), Error);
}

TEST(Metrics, AucKnownCases) {
  EXPECT_EQ(ExplanationAuc(std::vector<double>{0.9, 0.1, 0.05}, std::vector<int>{1, 0, 0}), 1.0);
  EXPECT_EQ(ExplanationAuc(std::vector<double>{0.1, 0.9, 0.5}, std::vector<int>{1, 0, 0}), 0.0);
  EXPECT_EQ(ExplanationAuc(std::vector<double>{0.2, 0.2, 0.2}, std::vector<int>{1, 0, 0}), 0.5);
}

TEST(Metrics, AucMatchesPairwiseDefinitionWithTies) {
  Rng rng(10);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.UniformIndex(15);
    std::vector<double> s(n);
    std::vector<int> m(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.UniformIndex(5));  // many ties
      m[i] = rng.Bernoulli(0.4) ? 1 : 0;
    }
    m[0] = 1;
    m[1] = 0;
    EXPECT_NEAR(ExplanationAuc(s, m), PairwiseAuc(s, m), 1e-12);
  }
}

TEST(Metrics, RandomScoresGiveChanceAuc) {
  Rng rng(11);
  double total = 0;
  const int trials = 4000;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> s(12);
    std::vector<int> m(12, 0);
    for (double& v : s) v = rng.Uniform();
    m[rng.UniformIndex(12)] = 1;
    m[rng.UniformIndex(12)] = 1;
    total += ExplanationAuc(s, m);
  }
  EXPECT_NEAR(total / trials, 0.5, 0.02);
}

TEST(Metrics, RemovalCountAndTopTokens) {
  EXPECT_EQ(RemovalCount(10, 0.2), 2u);
  EXPECT_EQ(RemovalCount(11, 0.2), 3u);
  EXPECT_EQ(RemovalCount(5, 1.0), 5u);
  EXPECT_EQ(RemovalCount(1, 0.2), 1u);
  ImportanceScores s;
  s.token_index = {0, 1, 2, 4};
  s.scores = {0.3, 0.1, 0.3, 0.3};
  EXPECT_EQ(TopTokens(s, 2), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(TopTokens(s, 9).size(), 4u);
  EXPECT_EQ(s.PerToken(5), (std::vector<double>{0.3, 0.1, 0.3, 0, 0.3}));
  EXPECT_EQ(AlignMask(s, std::vector<int>{1, 0, 0, 0, 1}), (std::vector<int>{1, 0, 0, 1}));
}

class ExplainModelTest : public ::testing::Test {
 protected:
  GroupRegistry registry = SmallRegistry();
  Vocabulary vocab = VocabFor(registry);
  EncoderParams params = RandomModel(vocab.size(), 21);
  MoleculeString molecule =
      Molecule("[benzene][amine][C][nitro][hydroxyl]", registry, {1, 0, 0, 1, 0});
  Encoding encoding = Encode(molecule, vocab, 12);
};

// Independent per-position recomputation from the padded trace accessors.
std::vector<double> DirectInfoFlow(const ForwardTrace& trace, const LayerGradients& g,
                                   const std::vector<std::size_t>& positions) {
  std::vector<double> z(positions.size(), 0.0);
  const std::size_t n = trace.num_valid();
  for (std::size_t l = 1; l <= trace.num_layers(); ++l) {
    const Tensor h = trace.HiddenState(l);
    const Tensor grad = g.Padded(l);
    const std::size_t heads = trace.attention[l - 1].size();
    for (std::size_t j = 0; j < positions.size(); ++j) {
      const std::size_t p = positions[j];
      double alpha = 0;
      for (std::size_t head = 0; head < heads; ++head) {
        const Tensor a = trace.Attention(l, head);
        for (std::size_t q = 0; q < trace.max_len; ++q) alpha += a.at(q, p);
      }
      alpha /= static_cast<double>(heads * n);
      double w = 0;
      for (std::size_t c = 0; c < h.cols(); ++c) w += grad.at(p, c) * h.at(p, c);
      w /= static_cast<double>(h.cols());
      z[j] += std::sqrt(std::max(0.0, std::tanh(alpha) * std::tanh(w)));
    }
  }
  double total = 0;
  for (double& v : z) total += (v = std::exp(v));
  for (double& v : z) v /= total;
  return z;
}

TEST_F(ExplainModelTest, InfoFlowMatchesDirectFormula) {
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  for (std::size_t target = 0; target < 2; ++target) {
    const LayerGradients g = ComputeLayerGradients(params, trace, target);
    const ImportanceScores s = Importance(trace, g);
    EXPECT_EQ(s.token_index, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
    const auto direct = DirectInfoFlow(trace, g, {1, 2, 3, 4, 5});
    ASSERT_EQ(s.scores.size(), direct.size());
    double sum = 0;
    for (std::size_t j = 0; j < direct.size(); ++j) {
      EXPECT_NEAR(s.scores[j], direct[j], 1e-12);
      EXPECT_GE(s.scores[j], 0);
      sum += s.scores[j];
    }
    EXPECT_NEAR(sum, 1, 1e-12);
    EXPECT_EQ(s.per_layer.size(), 2u);
  }
}

TEST_F(ExplainModelTest, ZeroGradientsGiveUniformScores) {
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  LayerGradients g = ComputeLayerGradients(params, trace, 1);
  for (Tensor& t : g.compact) t.Fill(0);
  const ImportanceScores s = Importance(trace, g);
  for (const double v : s.scores) EXPECT_DOUBLE_EQ(v, 0.2);
}

// With one layer and flat attention, the attention factor is the same for
// every token, so info_flow orders tokens exactly as grad_input does.
TEST_F(ExplainModelTest, SingleLayerUniformAttentionRanksLikeGradInput) {
  const char* texts[] = {"[benzene][amine][C][nitro][hydroxyl]", "[C][N][nitro][O][amine][C]",
                         "[hydroxyl][benzene][C][C]"};
  int strict = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    EncoderParams one = RandomModel(vocab.size(), 100 + seed);
    one.config.layers = 1;
    one.layers.resize(1);
    one.layers[0].wq.Fill(0);
    one.layers[0].bq.Fill(0);
    for (const char* text : texts) {
      const Encoding e = Encode(Molecule(text, registry), vocab, 12);
      const ForwardTrace trace = Forward(one, e.ids, e.validity);
      for (std::size_t target = 0; target < 2; ++target) {
        const LayerGradients g = ComputeLayerGradients(one, trace, target);
        const ImportanceScores info = Importance(trace, g);
        const ImportanceScores gi = BaselineScores(trace, g, Method::kGradInput);
        ASSERT_EQ(info.scores.size(), gi.scores.size());
        for (std::size_t i = 0; i < info.scores.size(); ++i) {
          for (std::size_t j = 0; j < info.scores.size(); ++j) {
            const auto order = [](double a, double b) { return (a > b) - (a < b); };
            EXPECT_EQ(order(info.scores[i], info.scores[j]), order(gi.scores[i], gi.scores[j]))
                << text << " seed " << seed << " tokens " << i << "," << j;
            strict += order(gi.scores[i], gi.scores[j]) > 0;
          }
        }
      }
    }
  }
  EXPECT_GT(strict, 50);
}

TEST_F(ExplainModelTest, BaselinesMatchDirectFormulas) {
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  const LayerGradients g = ComputeLayerGradients(params, trace, 1);
  const ImportanceScores att = BaselineScores(trace, g, Method::kAttentionOnly);
  const ImportanceScores gi = BaselineScores(trace, g, Method::kGradInput);
  const ImportanceScores go = BaselineScores(trace, g, Method::kGradOnly);
  const std::size_t n = trace.num_valid();
  std::vector<double> za(5, 0), zg(5, 0), zo(5, 0);
  for (std::size_t l = 1; l <= 2; ++l) {
    const Tensor h = trace.HiddenState(l);
    const Tensor grad = g.Padded(l);
    for (std::size_t j = 0; j < 5; ++j) {
      const std::size_t p = j + 1;
      double alpha = 0, w = 0, mag = 0;
      for (std::size_t head = 0; head < 2; ++head) {
        const Tensor a = trace.Attention(l, head);
        for (std::size_t q = 0; q < 12; ++q) alpha += a.at(q, p);
      }
      for (std::size_t c = 0; c < 8; ++c) {
        w += grad.at(p, c) * h.at(p, c) / 8;
        mag += std::abs(grad.at(p, c)) / 8;
      }
      za[j] += alpha / (2.0 * n);
      zg[j] += std::max(0.0, std::tanh(w));
      zo[j] += mag;
    }
  }
  auto softmax = [](std::vector<double> z) {
    double t = 0;
    for (double& v : z) t += (v = std::exp(v));
    for (double& v : z) v /= t;
    return z;
  };
  za = softmax(za);
  zg = softmax(zg);
  zo = softmax(zo);
  for (std::size_t j = 0; j < 5; ++j) {
    EXPECT_NEAR(att.scores[j], za[j], 1e-12);
    EXPECT_NEAR(gi.scores[j], zg[j], 1e-12);
    EXPECT_NEAR(go.scores[j], zo[j], 1e-12);
  }
  try {
    BaselineScores(trace, g, Method::kInfoFlow);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownMethod);
  }
}

TEST_F(ExplainModelTest, GradientsFromAnotherTraceAreRejected) {
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  const Encoding other = Encode(Molecule("[nitro][C]", registry), vocab, 12);
  const ForwardTrace trace2 = Forward(params, other.ids, other.validity);
  const LayerGradients g = ComputeLayerGradients(params, trace2, 1);
  try {
    Importance(trace, g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTraceGradMismatch);
  }
}

TEST_F(ExplainModelTest, MarginalLossOnTapeMatchesAndDifferentiates) {
  const std::vector<int> mask = {1, 0, 0, 1, 0};
  const Tensor v = Tensor::Matrix(1, 5, {0.1, 0.3, 0.2, 0.15, 0.25});
  Tape tape;
  const Var s = tape.Leaf(v);
  const Var loss = MarginalLossOnTape(tape, s, mask, 0.1);
  EXPECT_NEAR(tape.value(loss)[0], MarginalLoss(v.values(), mask, 0.1), 1e-15);
  EXPECT_LT(FiniteDiffCheck([&](Tape& t, Var x) { return MarginalLossOnTape(t, x, mask, 0.1); },
                            v, 1e-7),
            1e-7);
  const Tensor c = MarginalCoefficients(mask);
  EXPECT_EQ(c.values()[0], -0.5);
  EXPECT_NEAR(c.values()[1], 1.0 / 3, 1e-15);
}

TEST_F(ExplainModelTest, ImportanceGraphDifferentiatesThroughStates) {
  // With gradients held fixed, the score graph is a smooth function of the
  // layer states away from the clamp.
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  const LayerGradients g = ComputeLayerGradients(params, trace, 1);
  const std::vector<std::size_t> rows = ScorableRows(trace);
  const Tensor h2 = trace.tape->value(trace.hidden[2]);
  std::vector<Tensor> attention_values;
  for (const auto& layer : trace.attention) {
    for (const Var a : layer) attention_values.push_back(trace.tape->value(a));
  }
  const Tensor h1 = trace.tape->value(trace.hidden[1]);
  for (const Method method : {Method::kAttentionOnly, Method::kGradInput, Method::kInfoFlow}) {
    const double err = FiniteDiffCheck(
        [&](Tape& t, Var x) {
          const Var hidden[] = {t.Constant(h1), x};
          std::vector<std::vector<Var>> att(2);
          for (std::size_t i = 0; i < attention_values.size(); ++i) {
            att[i / 2].push_back(t.Constant(attention_values[i]));
          }
          const ImportanceGraph graph = BuildImportanceGraph(t, hidden, att, g.compact, rows, method);
          return MarginalLossOnTape(t, graph.scores, molecule.mask.value(), 0.5);
        },
        h2, 1e-6);
    EXPECT_LT(err, 1e-5) << MethodName(method);
  }
}

TEST_F(ExplainModelTest, FidelityOfEmptyRemovalIsZero) {
  EXPECT_EQ(FidelityOfRemoval(params, molecule.tokens, {}, vocab), 0.0);
  const std::vector<std::size_t> all = {0, 1, 2, 3, 4};
  const double f = FidelityOfRemoval(params, molecule.tokens, all, vocab);
  const auto before = Predict(params, molecule, vocab).probabilities;
  MoleculeString masked = molecule;
  for (Token& t : masked.tokens) t.text = "[MASK]";
  const auto after = Predict(params, masked, vocab).probabilities;
  const std::size_t c = before[1] > before[0] ? 1 : 0;
  EXPECT_NEAR(f, before[c] - after[c], 1e-12);
}

TEST_F(ExplainModelTest, SpuriousRatioExtremes) {
  const ForwardTrace trace = Forward(params, encoding.ids, encoding.validity);
  LayerGradients g = ComputeLayerGradients(params, trace, 1);
  const std::vector<std::size_t> tokens = {0, 1, 2, 3, 4};
  const std::vector<int> mask = {1, 0, 0, 1, 0};
  for (Tensor& t : g.compact) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      const std::size_t p = g.positions[r];
      const bool causal = p >= 1 && mask[p - 1] == 1;
      for (std::size_t c = 0; c < t.cols(); ++c) t.at(r, c) = causal ? 0.0 : 1.0;
    }
  }
  EXPECT_EQ(SpuriousGradientRatio(g, tokens, mask), 1.0);
  for (Tensor& t : g.compact) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      const std::size_t p = g.positions[r];
      const bool causal = p >= 1 && mask[p - 1] == 1;
      for (std::size_t c = 0; c < t.cols(); ++c) t.at(r, c) = causal ? 2.0 : 0.0;
    }
  }
  EXPECT_EQ(SpuriousGradientRatio(g, tokens, mask), 0.0);
  EXPECT_THROW(SpuriousGradientRatio(g, tokens, std::vector<int>{0, 0, 0, 0, 0}), Error);
}

TEST_F(ExplainModelTest, ReportsCarryMetricsIffPrerequisitesExist) {
  ExplanationDetail detail;
  const ExplanationReport full = Explain(params, vocab, 7, molecule, {}, &detail);
  EXPECT_TRUE(full.ep && full.auc && full.fidelity && full.spurious_ratio);
  EXPECT_EQ(full.tokens.size(), 5u);
  EXPECT_EQ(detail.probabilities.size(), 2u);
  MoleculeString bare = molecule;
  bare.mask.reset();
  bare.label.reset();
  const ExplanationReport partial = Explain(params, vocab, 8, bare, {});
  EXPECT_FALSE(partial.ep || partial.auc || partial.spurious_ratio);
  EXPECT_TRUE(partial.fidelity.has_value());

  const auto path = std::filesystem::temp_directory_path() / "groupflow_reports.jsonl";
  const std::vector<ExplanationReport> reports = {full, partial};
  WriteReports(path.string(), reports);
  const auto back = ReadReports(path.string());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].ToJson(), full.ToJson());
  EXPECT_EQ(back[1].ToJson(), partial.ToJson());
  std::filesystem::remove(path);
}

TEST(Methods, NamesRoundTrip) {
  for (const Method m : AllMethods()) EXPECT_EQ(ParseMethod(MethodName(m)), m);
  EXPECT_THROW(ParseMethod("rollout"), Error);
  ExplanationConfig c;
  c.removal_ratio = 0;
  EXPECT_THROW(c.Validate(), Error);
}

}  // namespace
}  // namespace groupflow

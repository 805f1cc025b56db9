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
#include <fstream>
#include <set>

#include "groupflow/data.h"
#include "groupflow/error.h"
#include "gtest/gtest.h"
#include "test_util.h"

namespace groupflow {
namespace {

std::filesystem::path TempFile(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

void WriteText(const std::filesystem::path& path, const std::string& text) {
  std::ofstream(path) << text;
}

std::size_t CountGroup(const MoleculeString& m, const std::string& text) {
  return static_cast<std::size_t>(std::count_if(
      m.tokens.begin(), m.tokens.end(), [&](const Token& t) { return t.text == text; }));
}

TEST(Generator, DefaultDatasetShape) {
  GeneratorConfig config;
  config.seed = 5;
  const GroupRegistry registry = DefaultRegistry(config.n_fragment_types);
  EXPECT_EQ(registry.group_names()[0], "benzene");
  EXPECT_EQ(registry.group_names()[1], "nitro");
  const Dataset d = Generate(registry, config);
  ASSERT_EQ(d.records.size(), 2000u);
  EXPECT_EQ(d.Select(Split::kTrain).size(), 1400u);
  EXPECT_EQ(d.Select(Split::kVal).size(), 200u);
  EXPECT_EQ(d.Select(Split::kTest).size(), 400u);

  std::size_t positives = 0, train_positives = 0, train_masks = 0, negatives_with_motif = 0;
  for (const DatasetRecord& r : d.records) {
    const MoleculeString& m = r.molecule;
    ASSERT_GE(m.tokens.size(), 6u);
    ASSERT_LE(m.tokens.size(), 20u);
    const std::size_t a = CountGroup(m, "[benzene]"), b = CountGroup(m, "[nitro]");
    if (*m.label == 1) {
      ++positives;
      EXPECT_EQ(a, 1u);
      EXPECT_EQ(b, 1u);
      if (r.split == Split::kTrain) {
        ++train_positives;
        if (m.mask) ++train_masks;
      } else {
        ASSERT_TRUE(m.mask.has_value());
      }
      if (m.mask) {
        for (std::size_t t = 0; t < m.tokens.size(); ++t) {
          const bool motif = m.tokens[t].text == "[benzene]" || m.tokens[t].text == "[nitro]";
          EXPECT_EQ((*m.mask)[t], motif ? 1 : 0);
        }
      }
    } else {
      EXPECT_EQ(*m.label, 0);
      EXPECT_FALSE(m.mask.has_value());
      EXPECT_LE(a + b, 1u);
      negatives_with_motif += a + b;
    }
  }
  EXPECT_EQ(positives, 1000u);
  EXPECT_EQ(train_masks, static_cast<std::size_t>(std::lround(0.1 * train_positives)));
  EXPECT_NEAR(negatives_with_motif / 1000.0, 0.3, 0.05);
}

TEST(Generator, DeterministicAndSeedSensitive) {
  const GroupRegistry registry = testing::SmallRegistry();
  const Dataset a = Generate(registry, testing::SmallGenerator(1));
  const Dataset b = Generate(registry, testing::SmallGenerator(1));
  const Dataset c = Generate(registry, testing::SmallGenerator(2));
  EXPECT_EQ(a.records, b.records);
  EXPECT_NE(a.records, c.records);
}

TEST(Generator, ZeroAnnotationRateLeavesTrainUnmasked) {
  GeneratorConfig config = testing::SmallGenerator();
  config.annotation_rate = 0;
  const Dataset d = Generate(testing::SmallRegistry(), config);
  for (const DatasetRecord* r : d.Select(Split::kTrain)) EXPECT_FALSE(r->molecule.mask);
}

TEST(Generator, InvalidConfigs) {
  const GroupRegistry registry = testing::SmallRegistry();
  GeneratorConfig c = testing::SmallGenerator();
  c.min_length = 1;
  EXPECT_THROW(Generate(registry, c), Error);
  c = testing::SmallGenerator();
  c.motif_b = c.motif_a;
  EXPECT_THROW(Generate(registry, c), Error);
  c = testing::SmallGenerator();
  c.train_fraction = 0.9;
  EXPECT_THROW(Generate(registry, c), Error);
  c = testing::SmallGenerator();
  c.n_fragment_types = 9;
  EXPECT_THROW(Generate(registry, c), Error);
}

TEST(Oracle, AdditiveWithPairBonus) {
  const GroupRegistry registry = testing::SmallRegistry();
  GeneratorConfig c = testing::SmallGenerator();
  const PropertyOracle oracle = MakeOracle(registry, c);
  ASSERT_EQ(oracle.contributions.size(), 8u);
  const auto single = Parse("[amine][benzene]", registry);
  EXPECT_NEAR(OracleScore(single, oracle, registry),
              oracle.contributions[*registry.IndexOf("amine")] + oracle.contributions[0], 1e-12);
  const auto pair = Parse("[nitro][amine][benzene][nitro]", registry);
  EXPECT_NEAR(OracleScore(pair, oracle, registry),
              2 * oracle.contributions[1] + oracle.contributions[*registry.IndexOf("amine")] +
                  oracle.contributions[0] + c.pair_bonus,
              1e-12);
  try {
    OracleScore(Parse("[C]", registry), oracle, registry);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownFragment);
  }
}

TEST(Generator, RegressionMasksTopContributors) {
  GeneratorConfig c = testing::SmallGenerator();
  c.task = Task::kRegression;
  const GroupRegistry registry = testing::SmallRegistry();
  const PropertyOracle oracle = MakeOracle(registry, c);
  const Dataset d = Generate(registry, c);
  for (const DatasetRecord* r : d.Select(Split::kTest)) {
    const MoleculeString& m = r->molecule;
    EXPECT_NEAR(*m.label, OracleScore(m.tokens, oracle, registry), 1e-12);
    ASSERT_TRUE(m.mask);
    EXPECT_EQ(std::count(m.mask->begin(), m.mask->end(), 1), 2);
    double lowest_marked = 1e9, highest_unmarked = -1e9;
    for (std::size_t t = 0; t < m.tokens.size(); ++t) {
      const double contribution = oracle.contributions[*registry.IndexOf(m.tokens[t].name())];
      if ((*m.mask)[t]) {
        lowest_marked = std::min(lowest_marked, contribution);
      } else {
        highest_unmarked = std::max(highest_unmarked, contribution);
      }
    }
    EXPECT_GE(lowest_marked, highest_unmarked);
  }
}

TEST(Persistence, RoundTrip) {
  const GroupRegistry registry = testing::SmallRegistry();
  const Dataset d = Generate(registry, testing::SmallGenerator());
  const auto path = TempFile("groupflow_dataset.jsonl");
  SaveDataset(path.string(), d);
  EXPECT_EQ(LoadDataset(path.string(), registry).records, d.records);
  std::filesystem::remove(path);
}

RecordError LoadError(const std::string& text) {
  const auto path = TempFile("groupflow_bad.jsonl");
  WriteText(path, text);
  try {
    LoadDataset(path.string(), testing::SmallRegistry());
  } catch (const RecordError& e) {
    std::filesystem::remove(path);
    return e;
  }
  std::filesystem::remove(path);
  ADD_FAILURE() << "no error for " << text;
  return RecordError(ErrorCode::kIo, 0, "");
}

TEST(Persistence, MalformedRecordsReportLines) {
  const std::string good =
      R"({"id":0,"tokens":["[benzene]","[nitro]","[amine]"],"label":1,"mask":[1,1,0],"split":"train"})"
      "\n";
  RecordError e = LoadError(good + "{not json\n");
  EXPECT_EQ(e.code(), ErrorCode::kMalformedRecord);
  EXPECT_EQ(e.line(), 2u);
  e = LoadError(good + R"({"id":1,"tokens":["[amine]"],"mask":null,"split":"train"})" "\n");
  EXPECT_EQ(e.code(), ErrorCode::kMalformedRecord);
  EXPECT_EQ(e.line(), 2u);
  e = LoadError(R"({"id":1,"tokens":["[amine]","[nitro]"],"label":1,"mask":[1],"split":"val"})");
  EXPECT_EQ(e.code(), ErrorCode::kInvariantViolation);
  e = LoadError(good + good);
  EXPECT_EQ(e.code(), ErrorCode::kInvariantViolation);
  EXPECT_EQ(e.line(), 2u);
  e = LoadError(R"({"id":3,"tokens":["[amine]"],"label":0,"mask":null,"split":"dev"})");
  EXPECT_EQ(e.code(), ErrorCode::kInvariantViolation);
  e = LoadError(R"({"id":3,"tokens":["[a b]"],"label":0,"mask":null,"split":"val"})");
  EXPECT_EQ(e.code(), ErrorCode::kInvariantViolation);
  EXPECT_THROW(LoadDataset(TempFile("groupflow_missing.jsonl").string(), testing::SmallRegistry()),
               Error);
}

TEST(Persistence, LineFormat) {
  DatasetRecord r;
  r.id = 4;
  r.molecule.tokens = Parse("[benzene][nitro]", testing::SmallRegistry());
  r.molecule.label = 1;
  r.split = Split::kVal;
  EXPECT_EQ(RecordToJsonLine(r),
            R"({"id":4,"tokens":["[benzene]","[nitro]"],"label":1,"mask":null,"split":"val"})");
}

}  // namespace
}  // namespace groupflow

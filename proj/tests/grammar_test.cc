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

#include <string>
#include <vector>

#include "groupflow/error.h"
#include "groupflow/grammar.h"
#include "groupflow/rng.h"
#include "gtest/gtest.h"
#include "nlohmann/json.hpp"

namespace groupflow {
namespace {

GroupRegistry Registry() { return GroupRegistry({"benzene", "nitro", "methyl"}); }

// Random token names from the legal alphabet, some of them registered
// groups, branches or rings.
std::string RandomValidString(Rng& rng) {
  static const std::string alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_=#@+-";
  static const std::vector<std::string> fixed = {"benzene", "nitro",  "methyl", "Branch1",
                                                 "Ring2",   "C",      "=O",     "N"};
  std::string s;
  const std::size_t n = rng.UniformIndex(12);
  for (std::size_t i = 0; i < n; ++i) {
    s += '[';
    if (rng.Bernoulli(0.4)) {
      s += fixed[rng.UniformIndex(fixed.size())];
    } else {
      const std::size_t len = 1 + rng.UniformIndex(8);
      for (std::size_t k = 0; k < len; ++k) s += alphabet[rng.UniformIndex(alphabet.size())];
    }
    s += ']';
  }
  return s;
}

ErrorCode ParseCode(const std::string& s) {
  try {
    Parse(s, Registry());
  } catch (const ParseError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error for " << s;
  return ErrorCode::kIo;
}

TEST(Grammar, ParsesKinds) {
  const auto tokens = Parse("[benzene][C][Branch1][=O][Ring1][nitro]", Registry());
  ASSERT_EQ(tokens.size(), 6u);
  EXPECT_EQ(tokens[0].kind, TokenKind::kGroup);
  EXPECT_EQ(tokens[1].kind, TokenKind::kAtom);
  EXPECT_EQ(tokens[2].kind, TokenKind::kBranch);
  EXPECT_EQ(tokens[3].kind, TokenKind::kAtom);
  EXPECT_EQ(tokens[4].kind, TokenKind::kRing);
  EXPECT_EQ(tokens[5].kind, TokenKind::kGroup);
  EXPECT_EQ(tokens[5].name(), "nitro");
  EXPECT_TRUE(Parse("", Registry()).empty());
}

TEST(Grammar, FuzzRoundTrip) {
  Rng rng(2024);
  const GroupRegistry registry = Registry();
  for (int i = 0; i < 10000; ++i) {
    const std::string s = RandomValidString(rng);
    const auto tokens = Parse(s, registry);
    ASSERT_EQ(Render(tokens), s);
    ASSERT_EQ(Parse(Render(tokens), registry), tokens);
  }
}

TEST(Grammar, MalformedInputs) {
  EXPECT_EQ(ParseCode("[benzene"), ErrorCode::kUnbalancedBracket);
  EXPECT_EQ(ParseCode("[C]]"), ErrorCode::kUnbalancedBracket);
  EXPECT_EQ(ParseCode("[C[N]]"), ErrorCode::kUnbalancedBracket);
  EXPECT_EQ(ParseCode("[C][]"), ErrorCode::kEmptyToken);
  EXPECT_EQ(ParseCode("[C C]"), ErrorCode::kIllegalCharacter);
  EXPECT_EQ(ParseCode("C[N]"), ErrorCode::kIllegalCharacter);
  EXPECT_EQ(ParseCode("[N].[O]"), ErrorCode::kIllegalCharacter);
}

TEST(Grammar, ErrorOffsets) {
  try {
    Parse("[C][N][O x]", Registry());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }
  try {
    Parse("[C][N][O", Registry());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 6u);
  }
}

TEST(Grammar, RegistryRejectsReservedAndDuplicates) {
  EXPECT_THROW(GroupRegistry({"Branch1"}), Error);
  EXPECT_THROW(GroupRegistry({"CLS"}), Error);
  EXPECT_THROW(GroupRegistry({"a", "a"}), Error);
  EXPECT_THROW(GroupRegistry({"a b"}), Error);
}

TEST(Grammar, RegistryJsonRoundTrip) {
  const GroupRegistry registry = Registry();
  const GroupRegistry back = GroupRegistry::FromJson(registry.ToJson());
  EXPECT_EQ(back.group_names(), registry.group_names());
  EXPECT_EQ(back.IndexOf("nitro"), std::optional<std::size_t>(1));
  EXPECT_FALSE(back.IndexOf("C").has_value());
}

TEST(Grammar, DisplayLabelsNumberRepeats) {
  const auto tokens = Parse("[benzene][C][benzene][nitro]", Registry());
  EXPECT_EQ(DisplayLabels(tokens),
            (std::vector<std::string>{"benzene-0", "C", "benzene-1", "nitro"}));
}

TEST(Vocabulary, SpecialsFirstThenFirstSeen) {
  const GroupRegistry registry = Registry();
  std::vector<MoleculeString> corpus(2);
  corpus[0].tokens = Parse("[nitro][C][C]", registry);
  corpus[1].tokens = Parse("[benzene][C][N]", registry);
  const Vocabulary v1 = BuildVocabulary(corpus, 1);
  EXPECT_EQ(v1.texts(), (std::vector<std::string>{"[CLS]", "[SEP]", "[PAD]", "[MASK]", "[UNK]",
                                                  "[nitro]", "[C]", "[benzene]", "[N]"}));
  const Vocabulary v2 = BuildVocabulary(corpus, 2);
  EXPECT_EQ(v2.size(), 6u);
  EXPECT_EQ(v2.IdOf("[C]"), std::optional<int>(5));
  EXPECT_THROW(Vocabulary({"[C]"}), Error);
}

TEST(Vocabulary, EncodeLayout) {
  const GroupRegistry registry = Registry();
  std::vector<MoleculeString> corpus(1);
  corpus[0].tokens = Parse("[nitro][C]", registry);
  const Vocabulary vocab = BuildVocabulary(corpus, 1);
  const Encoding e = Encode(Parse("[C][nitro][Xx]", registry), vocab, 6);
  EXPECT_EQ(e.ids, (std::vector<int>{Vocabulary::kClsId, 6, 5, Vocabulary::kUnkId,
                                     Vocabulary::kPadId, Vocabulary::kPadId}));
  EXPECT_EQ(e.validity, (std::vector<int>{1, 1, 1, 1, 0, 0}));
  const Encoding t = Encode(Parse("[C][C][C][C]", registry), vocab, 3);
  EXPECT_EQ(t.ids.size(), 3u);
  EXPECT_EQ(t.validity, (std::vector<int>{1, 1, 1}));
}

TEST(Molecule, MaskValidation) {
  MoleculeString m;
  m.tokens = Parse("[C][nitro]", Registry());
  m.mask = std::vector<int>{0, 1};
  EXPECT_NO_THROW(ValidateMolecule(m));
  m.mask = std::vector<int>{0};
  EXPECT_THROW(ValidateMolecule(m), Error);
  m.mask = std::vector<int>{0, 0};
  EXPECT_THROW(ValidateMolecule(m), Error);
}

}  // namespace
}  // namespace groupflow

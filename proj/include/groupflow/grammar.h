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

// Group-token molecule strings: a flat sequence of bracketed tokens such as
// "[benzene][C][Branch1][=O][nitro]". Bracketed names listed in a
// GroupRegistry are functional groups; Branch1-3 and Ring1-3 are structural
// tokens; every other name is an atom.

#ifndef GROUPFLOW_GRAMMAR_H_
#define GROUPFLOW_GRAMMAR_H_

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nlohmann/json_fwd.hpp"

namespace groupflow {

enum class TokenKind { kGroup, kAtom, kBranch, kRing, kSpecial };

std::string_view TokenKindName(TokenKind kind);

struct Token {
  std::string text;  // "[name]"
  TokenKind kind = TokenKind::kAtom;

  // The name between the brackets.
  std::string_view name() const;

  bool operator==(const Token&) const = default;
};

// True when `c` may appear between the brackets of a token.
bool IsNameChar(char c);

class GroupRegistry {
 public:
  GroupRegistry() = default;
  // Throws kInvalidConfig on duplicate, malformed or reserved names.
  explicit GroupRegistry(std::vector<std::string> group_names);

  static GroupRegistry FromJson(const nlohmann::json& json);
  static GroupRegistry Load(const std::string& path);
  nlohmann::json ToJson() const;
  void Save(const std::string& path) const;

  const std::vector<std::string>& group_names() const { return group_names_; }
  bool IsGroup(std::string_view name) const;
  std::optional<std::size_t> IndexOf(std::string_view name) const;
  TokenKind Classify(std::string_view name) const;

  // Builds a group token for a registered name.
  Token GroupToken(std::string_view name) const;

 private:
  std::vector<std::string> group_names_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Splits `input` into tokens. Throws ParseError carrying the byte offset of
// the first violation.
std::vector<Token> Parse(std::string_view input, const GroupRegistry& registry);

std::string Render(std::span<const Token> tokens);

// Report-time labels: names that occur more than once get an occurrence
// suffix ("benzene-0", "benzene-1").
std::vector<std::string> DisplayLabels(std::span<const Token> tokens);

struct MoleculeString {
  std::vector<Token> tokens;
  std::optional<std::vector<int>> mask;
  std::optional<double> label;
};

// Throws kInvariantViolation when the mask is misaligned or has no causal
// token.
void ValidateMolecule(const MoleculeString& molecule);

class Vocabulary {
 public:
  static constexpr int kClsId = 0;
  static constexpr int kSepId = 1;
  static constexpr int kPadId = 2;
  static constexpr int kMaskId = 3;
  static constexpr int kUnkId = 4;
  static constexpr int kNumSpecials = 5;

  // Specials only.
  Vocabulary();
  // `texts` must start with the five specials in id order.
  explicit Vocabulary(std::vector<std::string> texts);

  std::optional<int> IdOf(std::string_view text) const;
  const std::string& TextOf(int id) const;
  std::size_t size() const { return text_of_.size(); }
  const std::vector<std::string>& texts() const { return text_of_; }

  static bool IsSpecialId(int id) { return id >= 0 && id < kNumSpecials; }

  bool operator==(const Vocabulary& other) const {
    return text_of_ == other.text_of_;
  }

 private:
  std::vector<std::string> text_of_;
  std::unordered_map<std::string, int> id_of_;
};

// Special texts in id order: [CLS] [SEP] [PAD] [MASK] [UNK].
const std::vector<std::string>& SpecialTexts();

// Specials first, then corpus tokens with frequency >= min_count in
// first-seen order.
Vocabulary BuildVocabulary(std::span<const MoleculeString> corpus,
                           std::size_t min_count);

struct Encoding {
  std::vector<int> ids;
  std::vector<int> validity;
};

// [CLS] followed by the molecule tokens, truncated to max_len - 1 tokens and
// padded with [PAD] up to max_len.
Encoding Encode(const MoleculeString& molecule, const Vocabulary& vocab,
                std::size_t max_len);
Encoding Encode(std::span<const Token> tokens, const Vocabulary& vocab,
                std::size_t max_len);

}  // namespace groupflow

#endif  // GROUPFLOW_GRAMMAR_H_

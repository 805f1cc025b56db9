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

#include "groupflow/grammar.h"

#include <algorithm>
#include <array>
#include <fstream>
#include <utility>

#include "groupflow/error.h"
#include "nlohmann/json.hpp"

namespace groupflow {
namespace {

constexpr std::array<std::string_view, 3> kBranchNames = {"Branch1", "Branch2",
                                                          "Branch3"};
constexpr std::array<std::string_view, 3> kRingNames = {"Ring1", "Ring2",
                                                        "Ring3"};
constexpr std::array<std::string_view, 5> kSpecialNames = {"CLS", "SEP", "PAD",
                                                           "MASK", "UNK"};

template <std::size_t N>
bool Contains(const std::array<std::string_view, N>& names,
              std::string_view name) {
  for (const auto& n : names) {
    if (n == name) return true;
  }
  return false;
}

bool IsValidName(std::string_view name) {
  if (name.empty()) return false;
  for (const char c : name) {
    if (!IsNameChar(c)) return false;
  }
  return true;
}

}  // namespace

std::string_view TokenKindName(TokenKind kind) {
  switch (kind) {
    case TokenKind::kGroup: return "Group";
    case TokenKind::kAtom: return "Atom";
    case TokenKind::kBranch: return "Branch";
    case TokenKind::kRing: return "Ring";
    case TokenKind::kSpecial: return "Special";
  }
  return "Unknown";
}

std::string_view Token::name() const {
  std::string_view view = text;
  if (view.size() >= 2) return view.substr(1, view.size() - 2);
  return view;
}

bool IsNameChar(char c) {
  return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
         (c >= '0' && c <= '9') || c == '_' || c == '=' || c == '#' ||
         c == '@' || c == '+' || c == '-';
}

GroupRegistry::GroupRegistry(std::vector<std::string> group_names)
    : group_names_(std::move(group_names)) {
  for (std::size_t i = 0; i < group_names_.size(); ++i) {
    const std::string& name = group_names_[i];
    if (!IsValidName(name)) {
      throw Error(ErrorCode::kInvalidConfig,
                  "group name '" + name + "' is not a valid token name");
    }
    if (Contains(kBranchNames, name) || Contains(kRingNames, name) ||
        Contains(kSpecialNames, name)) {
      throw Error(ErrorCode::kInvalidConfig,
                  "group name '" + name + "' is reserved");
    }
    if (!index_.emplace(name, i).second) {
      throw Error(ErrorCode::kInvalidConfig,
                  "duplicate group name '" + name + "'");
    }
  }
}

GroupRegistry GroupRegistry::FromJson(const nlohmann::json& json) {
  if (!json.is_object() || !json.contains("groups") ||
      !json.at("groups").is_array()) {
    throw Error(ErrorCode::kInvalidConfig,
                "registry must be an object with a \"groups\" array");
  }
  std::vector<std::string> names;
  for (const auto& item : json.at("groups")) {
    if (!item.is_string()) {
      throw Error(ErrorCode::kInvalidConfig, "group names must be strings");
    }
    names.push_back(item.get<std::string>());
  }
  if (json.contains("atoms_implicit") &&
      !json.at("atoms_implicit").is_boolean()) {
    throw Error(ErrorCode::kInvalidConfig, "atoms_implicit must be boolean");
  }
  return GroupRegistry(std::move(names));
}

GroupRegistry GroupRegistry::Load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open registry " + path);
  nlohmann::json json;
  try {
    in >> json;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedJson, path + ": " + e.what());
  }
  return FromJson(json);
}

nlohmann::json GroupRegistry::ToJson() const {
  return {{"groups", group_names_}, {"atoms_implicit", true}};
}

void GroupRegistry::Save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write registry " + path);
  out << ToJson().dump(2) << "\n";
}

std::optional<std::size_t> GroupRegistry::IndexOf(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool GroupRegistry::IsGroup(std::string_view name) const {
  return index_.contains(std::string(name));
}

TokenKind GroupRegistry::Classify(std::string_view name) const {
  if (IsGroup(name)) return TokenKind::kGroup;
  if (Contains(kBranchNames, name)) return TokenKind::kBranch;
  if (Contains(kRingNames, name)) return TokenKind::kRing;
  return TokenKind::kAtom;
}

Token GroupRegistry::GroupToken(std::string_view name) const {
  if (!IsGroup(name)) {
    throw Error(ErrorCode::kUnknownFragment,
                "'" + std::string(name) + "' is not a registered group");
  }
  return Token{"[" + std::string(name) + "]", TokenKind::kGroup};
}

std::vector<Token> Parse(std::string_view input,
                         const GroupRegistry& registry) {
  std::vector<Token> tokens;
  std::size_t pos = 0;
  while (pos < input.size()) {
    const char c = input[pos];
    if (c == ']') throw ParseError(ErrorCode::kUnbalancedBracket, pos);
    if (c != '[') throw ParseError(ErrorCode::kIllegalCharacter, pos);
    const std::size_t open = pos++;
    while (pos < input.size() && input[pos] != ']') {
      if (input[pos] == '[') {
        throw ParseError(ErrorCode::kUnbalancedBracket, open);
      }
      if (!IsNameChar(input[pos])) {
        throw ParseError(ErrorCode::kIllegalCharacter, pos);
      }
      ++pos;
    }
    if (pos == input.size()) {
      throw ParseError(ErrorCode::kUnbalancedBracket, open);
    }
    if (pos == open + 1) throw ParseError(ErrorCode::kEmptyToken, open);
    const std::string_view name = input.substr(open + 1, pos - open - 1);
    tokens.push_back(Token{std::string(input.substr(open, pos - open + 1)),
                           registry.Classify(name)});
    ++pos;
  }
  return tokens;
}

std::string Render(std::span<const Token> tokens) {
  std::string out;
  for (const Token& token : tokens) out += token.text;
  return out;
}

std::vector<std::string> DisplayLabels(std::span<const Token> tokens) {
  std::unordered_map<std::string_view, std::size_t> totals;
  for (const Token& token : tokens) ++totals[token.name()];
  std::unordered_map<std::string_view, std::size_t> seen;
  std::vector<std::string> labels;
  labels.reserve(tokens.size());
  for (const Token& token : tokens) {
    const std::string_view name = token.name();
    if (totals[name] > 1) {
      labels.push_back(std::string(name) + "-" + std::to_string(seen[name]++));
    } else {
      labels.emplace_back(name);
    }
  }
  return labels;
}

void ValidateMolecule(const MoleculeString& molecule) {
  if (!molecule.mask) return;
  const auto& mask = *molecule.mask;
  if (mask.size() != molecule.tokens.size()) {
    throw Error(ErrorCode::kInvariantViolation,
                "mask length " + std::to_string(mask.size()) +
                    " does not match token count " +
                    std::to_string(molecule.tokens.size()));
  }
  bool any_causal = false;
  for (const int m : mask) {
    if (m != 0 && m != 1) {
      throw Error(ErrorCode::kInvariantViolation, "mask values must be 0/1");
    }
    any_causal = any_causal || m == 1;
  }
  if (!any_causal) {
    throw Error(ErrorCode::kInvariantViolation, "mask has no causal token");
  }
}

const std::vector<std::string>& SpecialTexts() {
  static const std::vector<std::string> texts = {"[CLS]", "[SEP]", "[PAD]",
                                                 "[MASK]", "[UNK]"};
  return texts;
}

Vocabulary::Vocabulary() : Vocabulary(SpecialTexts()) {}

Vocabulary::Vocabulary(std::vector<std::string> texts)
    : text_of_(std::move(texts)) {
  const auto& specials = SpecialTexts();
  if (text_of_.size() < specials.size()) {
    throw Error(ErrorCode::kInvalidConfig, "vocabulary lacks special tokens");
  }
  for (std::size_t i = 0; i < specials.size(); ++i) {
    if (text_of_[i] != specials[i]) {
      throw Error(ErrorCode::kInvalidConfig,
                  "vocabulary special " + specials[i] + " out of place");
    }
  }
  for (std::size_t i = 0; i < text_of_.size(); ++i) {
    if (!id_of_.emplace(text_of_[i], static_cast<int>(i)).second) {
      throw Error(ErrorCode::kInvalidConfig,
                  "duplicate vocabulary entry " + text_of_[i]);
    }
  }
}

std::optional<int> Vocabulary::IdOf(std::string_view text) const {
  const auto it = id_of_.find(std::string(text));
  if (it == id_of_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::TextOf(int id) const {
  return text_of_.at(static_cast<std::size_t>(id));
}

Vocabulary BuildVocabulary(std::span<const MoleculeString> corpus,
                           std::size_t min_count) {
  if (corpus.empty()) {
    throw Error(ErrorCode::kEmptyCorpus, "cannot build a vocabulary");
  }
  if (min_count < 1) {
    throw Error(ErrorCode::kInvalidConfig, "min_count must be >= 1");
  }
  std::vector<std::string> order;
  std::unordered_map<std::string, std::size_t> counts;
  for (const MoleculeString& molecule : corpus) {
    for (const Token& token : molecule.tokens) {
      if (counts[token.text]++ == 0) order.push_back(token.text);
    }
  }
  std::vector<std::string> texts = SpecialTexts();
  for (const std::string& text : order) {
    const bool is_special =
        std::find(SpecialTexts().begin(), SpecialTexts().end(), text) !=
        SpecialTexts().end();
    if (!is_special && counts[text] >= min_count) texts.push_back(text);
  }
  return Vocabulary(std::move(texts));
}

Encoding Encode(std::span<const Token> tokens, const Vocabulary& vocab,
                std::size_t max_len) {
  if (max_len < 2) {
    throw Error(ErrorCode::kInvalidConfig, "max_len must be >= 2");
  }
  Encoding encoding;
  encoding.ids.assign(max_len, Vocabulary::kPadId);
  encoding.validity.assign(max_len, 0);
  encoding.ids[0] = Vocabulary::kClsId;
  encoding.validity[0] = 1;
  const std::size_t n = std::min(tokens.size(), max_len - 1);
  for (std::size_t i = 0; i < n; ++i) {
    encoding.ids[i + 1] = vocab.IdOf(tokens[i].text).value_or(Vocabulary::kUnkId);
    encoding.validity[i + 1] = 1;
  }
  return encoding;
}

Encoding Encode(const MoleculeString& molecule, const Vocabulary& vocab,
                std::size_t max_len) {
  return Encode(molecule.tokens, vocab, max_len);
}

}  // namespace groupflow

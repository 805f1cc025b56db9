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

#include "groupflow/data.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "groupflow/error.h"
#include "groupflow/rng.h"
#include "nlohmann/json.hpp"

namespace groupflow {
namespace {

const std::vector<std::string>& NamedFragments() {
  static const std::vector<std::string> names = {
      "benzene",  "nitro",     "amide",     "hydroxyl",   "carboxyl",
      "amine",    "methyl",    "ethyl",     "chloro",     "fluoro",
      "bromo",    "iodo",      "ketone",    "aldehyde",   "ester",
      "ether",    "thiol",     "sulfonyl",  "phenol",     "pyridine",
      "furan",    "thiophene", "imidazole", "nitrile",    "azide",
      "phosphate", "vinyl",    "alkyne",    "cyclohexyl", "isopropyl"};
  return names;
}

void Require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::kInvalidConfig, what);
}

std::size_t ExactCount(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

struct Draft {
  std::vector<std::size_t> groups;
  double label = 0;
  std::vector<int> motif_mask;  // classification ground truth
};

Draft MakePositive(const GeneratorConfig& c, Rng& rng,
                   const std::vector<std::size_t>& fillers, std::size_t length) {
  Draft d;
  d.groups.resize(length);
  d.motif_mask.assign(length, 0);
  for (auto& g : d.groups) g = fillers[rng.UniformIndex(fillers.size())];
  const std::vector<std::size_t> at = rng.SampleWithoutReplacement(length, 2);
  d.groups[at[0]] = c.motif_a;
  d.groups[at[1]] = c.motif_b;
  d.motif_mask[at[0]] = d.motif_mask[at[1]] = 1;
  d.label = 1;
  return d;
}

Draft MakeNegative(const GeneratorConfig& c, Rng& rng,
                   const std::vector<std::size_t>& fillers, std::size_t length) {
  Draft d;
  d.groups.resize(length);
  for (auto& g : d.groups) g = fillers[rng.UniformIndex(fillers.size())];
  if (rng.Bernoulli(c.distractor_rate)) {
    d.groups[rng.UniformIndex(length)] = rng.Bernoulli(0.5) ? c.motif_a : c.motif_b;
  }
  d.label = 0;
  return d;
}

// Positions of the q largest contributions; ties go to the earlier position.
std::vector<int> TopContributionMask(const std::vector<std::size_t>& groups,
                                     const PropertyOracle& oracle, std::size_t q) {
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return oracle.contributions[groups[a]] > oracle.contributions[groups[b]];
  });
  const std::size_t take = std::min(q, groups.size() - 1);
  std::vector<int> mask(groups.size(), 0);
  for (std::size_t i = 0; i < take; ++i) mask[order[i]] = 1;
  return mask;
}

[[noreturn]] void Violation(std::size_t line, const std::string& reason) {
  throw RecordError(ErrorCode::kInvariantViolation, line, reason);
}

}  // namespace

std::string_view TaskName(Task task) {
  return task == Task::kClassification ? "classification" : "regression";
}

Task ParseTask(std::string_view name) {
  if (name == "classification") return Task::kClassification;
  if (name == "regression") return Task::kRegression;
  throw Error(ErrorCode::kInvalidConfig, "unknown task '" + std::string(name) + "'");
}

std::string_view SplitName(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

void GeneratorConfig::Validate() const {
  Require(n_molecules >= 2, "n_molecules must be >= 2");
  Require(min_length >= 2, "min_length must be >= 2");
  Require(max_length >= min_length, "max_length must be >= min_length");
  Require(n_fragment_types >= 3, "n_fragment_types must be >= 3");
  Require(motif_a < n_fragment_types && motif_b < n_fragment_types && motif_a != motif_b,
          "motifs must be two distinct fragment indices");
  Require(distractor_rate >= 0 && distractor_rate <= 1, "distractor_rate must be in [0, 1]");
  Require(annotation_rate >= 0 && annotation_rate <= 1, "annotation_rate must be in [0, 1]");
  Require(train_fraction >= 0 && val_fraction >= 0 && test_fraction >= 0,
          "split fractions must be >= 0");
  Require(std::abs(train_fraction + val_fraction + test_fraction - 1) < 1e-9,
          "split fractions must sum to 1");
  Require(top_q >= 1, "top_q must be >= 1");
}

GroupRegistry DefaultRegistry(std::size_t n_fragment_types) {
  std::vector<std::string> names;
  const auto& named = NamedFragments();
  for (std::size_t i = 0; i < n_fragment_types; ++i) {
    names.push_back(i < named.size() ? named[i] : "frag" + std::to_string(i));
  }
  return GroupRegistry(std::move(names));
}

PropertyOracle MakeOracle(const GroupRegistry& registry,
                          const GeneratorConfig& config) {
  Rng rng(DeriveSeed(config.seed, "oracle"));
  PropertyOracle oracle;
  for (std::size_t i = 0; i < registry.group_names().size(); ++i) {
    oracle.contributions.push_back(rng.Normal(0, 1));
  }
  oracle.pairs.emplace_back(config.motif_a, config.motif_b);
  oracle.pair_bonus = config.pair_bonus;
  return oracle;
}

double OracleScore(std::span<const Token> tokens, const PropertyOracle& oracle,
                   const GroupRegistry& registry) {
  std::vector<bool> present(oracle.contributions.size(), false);
  double score = 0;
  for (const Token& t : tokens) {
    const auto index = registry.IndexOf(t.name());
    if (!index || *index >= oracle.contributions.size()) {
      throw Error(ErrorCode::kUnknownFragment, "no contribution for " + t.text);
    }
    score += oracle.contributions[*index];
    present[*index] = true;
  }
  for (const auto& [a, b] : oracle.pairs) {
    if (present[a] && present[b]) score += oracle.pair_bonus;
  }
  return score;
}

bool DatasetRecord::operator==(const DatasetRecord& other) const {
  return id == other.id && split == other.split &&
         molecule.tokens == other.molecule.tokens &&
         molecule.mask == other.molecule.mask &&
         molecule.label == other.molecule.label;
}

std::vector<const DatasetRecord*> Dataset::Select(Split split) const {
  std::vector<const DatasetRecord*> out;
  for (const DatasetRecord& r : records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

std::vector<MoleculeString> Dataset::Molecules(Split split) const {
  std::vector<MoleculeString> out;
  for (const DatasetRecord* r : Select(split)) out.push_back(r->molecule);
  return out;
}

std::vector<MoleculeString> Dataset::AllMolecules() const {
  std::vector<MoleculeString> out;
  for (const DatasetRecord& r : records) out.push_back(r.molecule);
  return out;
}

Dataset Generate(const GroupRegistry& registry, const GeneratorConfig& config) {
  config.Validate();
  if (registry.group_names().size() != config.n_fragment_types) {
    throw Error(ErrorCode::kInvalidConfig, "registry size differs from n_fragment_types");
  }
  Rng rng(DeriveSeed(config.seed, "data"));
  const PropertyOracle oracle = MakeOracle(registry, config);
  std::vector<std::size_t> fillers, everything;
  for (std::size_t g = 0; g < config.n_fragment_types; ++g) {
    everything.push_back(g);
    if (g != config.motif_a && g != config.motif_b) fillers.push_back(g);
  }
  const std::size_t n = config.n_molecules;
  auto length = [&] {
    return config.min_length + rng.UniformIndex(config.max_length - config.min_length + 1);
  };

  std::vector<Draft> drafts;
  if (config.task == Task::kClassification) {
    const std::size_t positives = n / 2;
    for (std::size_t i = 0; i < n; ++i) {
      drafts.push_back(i < positives ? MakePositive(config, rng, fillers, length())
                                     : MakeNegative(config, rng, fillers, length()));
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      Draft d;
      d.groups.resize(length());
      for (auto& g : d.groups) g = everything[rng.UniformIndex(everything.size())];
      d.motif_mask = TopContributionMask(d.groups, oracle, config.top_q);
      drafts.push_back(std::move(d));
    }
  }
  rng.Shuffle(drafts);

  const std::size_t n_train = ExactCount(config.train_fraction, n);
  const std::size_t n_val = std::min(n - n_train, ExactCount(config.val_fraction, n));
  Dataset dataset;
  std::vector<std::size_t> annotatable;
  for (std::size_t i = 0; i < n; ++i) {
    Draft& d = drafts[i];
    DatasetRecord r;
    r.id = static_cast<std::int64_t>(i);
    r.split = i < n_train ? Split::kTrain : i < n_train + n_val ? Split::kVal : Split::kTest;
    for (const std::size_t g : d.groups) {
      r.molecule.tokens.push_back(registry.GroupToken(registry.group_names()[g]));
    }
    const bool has_truth = !d.motif_mask.empty();
    if (config.task == Task::kRegression) {
      d.label = OracleScore(r.molecule.tokens, oracle, registry);
    }
    r.molecule.label = d.label;
    if (has_truth && r.split != Split::kTrain) r.molecule.mask = d.motif_mask;
    if (has_truth && r.split == Split::kTrain) annotatable.push_back(i);
    dataset.records.push_back(std::move(r));
  }
  // Exactly round(rate * candidates) training annotations.
  rng.Shuffle(annotatable);
  annotatable.resize(ExactCount(config.annotation_rate, annotatable.size()));
  std::sort(annotatable.begin(), annotatable.end());
  for (const std::size_t i : annotatable) {
    dataset.records[i].molecule.mask = drafts[i].motif_mask;
  }
  return dataset;
}

std::string RecordToJsonLine(const DatasetRecord& record) {
  nlohmann::ordered_json json;
  json["id"] = record.id;
  std::vector<std::string> texts;
  for (const Token& t : record.molecule.tokens) texts.push_back(t.text);
  json["tokens"] = texts;
  const double label = record.molecule.label.value_or(0.0);
  if (std::nearbyint(label) == label && std::abs(label) < 9e15) {
    json["label"] = static_cast<std::int64_t>(label);
  } else {
    json["label"] = label;
  }
  json["mask"] = record.molecule.mask ? nlohmann::ordered_json(*record.molecule.mask)
                                      : nlohmann::ordered_json(nullptr);
  json["split"] = std::string(SplitName(record.split));
  return json.dump();
}

void SaveDataset(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  for (const DatasetRecord& r : dataset.records) out << RecordToJsonLine(r) << '\n';
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path);
}

Dataset LoadDataset(const std::string& path, const GroupRegistry& registry) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  Dataset dataset;
  std::unordered_set<std::int64_t> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json json;
    try {
      json = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw RecordError(ErrorCode::kMalformedRecord, line_no, e.what());
    }
    DatasetRecord r;
    std::vector<std::string> texts;
    std::string split;
    try {
      if (!json.is_object()) throw std::runtime_error("record is not an object");
      r.id = json.at("id").get<std::int64_t>();
      texts = json.at("tokens").get<std::vector<std::string>>();
      const auto& label = json.at("label");
      if (!label.is_number()) throw std::runtime_error("label is not a number");
      r.molecule.label = label.get<double>();
      const auto& mask = json.at("mask");
      if (!mask.is_null()) r.molecule.mask = mask.get<std::vector<int>>();
      split = json.at("split").get<std::string>();
    } catch (const std::exception& e) {
      throw RecordError(ErrorCode::kMalformedRecord, line_no, e.what());
    }
    if (split == "train") {
      r.split = Split::kTrain;
    } else if (split == "val") {
      r.split = Split::kVal;
    } else if (split == "test") {
      r.split = Split::kTest;
    } else {
      Violation(line_no, "unknown split '" + split + "'");
    }
    if (!seen.insert(r.id).second) Violation(line_no, "duplicate id " + std::to_string(r.id));
    if (texts.empty()) Violation(line_no, "no tokens");
    for (const std::string& text : texts) {
      std::vector<Token> parsed;
      try {
        parsed = Parse(text, registry);
      } catch (const Error& e) {
        Violation(line_no, "bad token '" + text + "': " + e.what());
      }
      if (parsed.size() != 1) Violation(line_no, "'" + text + "' is not a single token");
      if (parsed[0].kind == TokenKind::kSpecial) {
        Violation(line_no, "special token " + text + " in a molecule");
      }
      r.molecule.tokens.push_back(parsed[0]);
    }
    if (r.molecule.mask) {
      const auto& m = *r.molecule.mask;
      if (m.size() != texts.size()) Violation(line_no, "mask length differs from token count");
      if (std::any_of(m.begin(), m.end(), [](int v) { return v != 0 && v != 1; })) {
        Violation(line_no, "mask values must be 0 or 1");
      }
      if (std::count(m.begin(), m.end(), 1) == 0) Violation(line_no, "mask has no 1");
      if (std::count(m.begin(), m.end(), 0) == 0) Violation(line_no, "mask has no 0");
    }
    dataset.records.push_back(std::move(r));
  }
  return dataset;
}

}  // namespace groupflow

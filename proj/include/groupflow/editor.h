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

// Evolutionary molecular editing guided by key fragments: crossover swaps
// the most important fragments of two parents, mutation draws replacements
// from the registry or from a growing vocabulary of fragments that produced
// improvements. Selection keeps the best N of parents and offspring.

#ifndef GROUPFLOW_EDITOR_H_
#define GROUPFLOW_EDITOR_H_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "groupflow/data.h"
#include "groupflow/encoder.h"
#include "groupflow/grammar.h"
#include "groupflow/rng.h"

namespace groupflow {

enum class Direction { kMaximize, kMinimize };
std::string_view DirectionName(Direction direction);
Direction ParseDirection(std::string_view name);  // kInvalidConfig

struct EAConfig {
  std::size_t population = 20;
  std::size_t generations = 50;
  double crossover_prob = 0.7;
  double mutation_prob = 0.3;
  double vocab_share = 0.5;  // share of mutations drawn from the vocabulary
  std::size_t key_count = 2;
  Direction direction = Direction::kMaximize;
  double hit_threshold = 0;
  bool guided = true;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;

  void Validate() const;  // kInvalidConfig
};

// Supplies the k most important positions of a molecule, most important
// first.
class KeyFragmentRanker {
 public:
  virtual ~KeyFragmentRanker() = default;
  virtual std::vector<std::size_t> Rank(std::span<const Token> tokens,
                                        std::size_t k) const = 0;
};

// info_flow scores of a trained encoder for its predicted class. Ties go to
// the lower position; unscored positions follow in index order.
class ModelRanker : public KeyFragmentRanker {
 public:
  ModelRanker(const EncoderParams& params, const Vocabulary& vocab)
      : params_(params), vocab_(vocab) {}
  std::vector<std::size_t> Rank(std::span<const Token> tokens,
                                std::size_t k) const override;

 private:
  const EncoderParams& params_;
  const Vocabulary& vocab_;
};

struct KeyFragments {
  std::vector<std::size_t> positions;  // importance order
  std::vector<std::string> texts;
};
KeyFragments FindKeyFragments(const KeyFragmentRanker& ranker,
                              std::span<const Token> tokens, std::size_t k);

struct Candidate {
  std::int64_t id = 0;
  std::vector<Token> tokens;
  double fitness = 0;
  std::vector<std::int64_t> parents;
  std::string op;  // seed, crossover, mutate_random, mutate_vocab
  std::size_t generation = 0;
  std::size_t slot = 0;  // index of the originating seed molecule
  KeyFragments keys;
};

struct VocabularyEntry {
  std::string text;
  std::size_t generation = 0;
  double fitness = 0;  // of the child that contributed it
};

class FragmentVocabulary {
 public:
  bool Contains(std::string_view text) const;
  // False when already present.
  bool Insert(VocabularyEntry entry);
  const std::vector<VocabularyEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<VocabularyEntry> entries_;
};

// Replaces m1's key fragments (in position order) by m2's, cycling the
// shorter list, and vice versa. Lengths are preserved.
std::pair<std::vector<Token>, std::vector<Token>> Crossover(
    std::span<const Token> m1, std::span<const Token> m2,
    std::span<const std::size_t> keys1, std::span<const std::size_t> keys2);

enum class MutationMode { kRandom, kVocabulary };
// One uniformly chosen position replaced by a registry group (random) or a
// vocabulary entry; vocabulary mode falls back to random when V is empty.
// Throws kEmptyMolecule.
std::vector<Token> Mutate(std::span<const Token> molecule,
                          const FragmentVocabulary& vocab, MutationMode mode,
                          const GroupRegistry& registry, Rng& rng);

// Inserts the child's key fragments when it beats every parent strictly.
// Returns the number inserted.
std::size_t UpdateVocabulary(FragmentVocabulary& vocab, const Candidate& child,
                             std::span<const double> parent_fitness,
                             Direction direction);

// True when `a` is strictly better than `b`.
bool Better(double a, double b, Direction direction);

struct HistoryRow {
  std::size_t generation = 0;
  double best = 0;
  double mean = 0;
  std::size_t vocab_size = 0;
};

struct SeedOutcome {
  std::int64_t seed_id = 0;
  double seed_fitness = 0;
  double best_fitness = 0;
  bool hit = false;
};

struct CampaignResult {
  std::vector<HistoryRow> history;  // generation 0 is the initial population
  std::vector<SeedOutcome> per_seed;
  double hit_ratio = 0;
  std::vector<Candidate> population;
  FragmentVocabulary vocabulary;
};

class Editor {
 public:
  // `ranker` may be null for unguided campaigns.
  Editor(const EAConfig& config, const GroupRegistry& registry,
         const PropertyOracle& oracle, const KeyFragmentRanker* ranker);

  // N seeds sampled without replacement. Throws kInsufficientSeeds.
  std::vector<Candidate> InitPopulation(std::span<const MoleculeString> pool);
  std::vector<Candidate> Step(const std::vector<Candidate>& population,
                              std::size_t generation);
  CampaignResult Run(std::span<const MoleculeString> pool);

  const FragmentVocabulary& vocabulary() const { return vocab_; }
  // Offspring evaluated by the latest Step(), in creation order.
  const std::vector<Candidate>& last_offspring() const { return last_offspring_; }

 private:
  double Fitness(std::span<const Token> tokens) const;
  KeyFragments Keys(std::span<const Token> tokens);
  std::size_t SampleParent(const std::vector<double>& weights,
                           std::optional<std::size_t> exclude);
  void Finish(std::vector<Candidate>& offspring);

  EAConfig config_;
  const GroupRegistry& registry_;
  const PropertyOracle& oracle_;
  const KeyFragmentRanker* ranker_;
  Rng rng_;
  FragmentVocabulary vocab_;
  std::vector<Candidate> last_offspring_;
  std::int64_t next_id_ = 0;
};

void WriteHistoryCsv(const std::string& path, std::span<const HistoryRow> rows);
void WriteHits(const std::string& path, const CampaignResult& result);
// Final population in the dataset schema (label = fitness, mask null).
void WritePopulation(const std::string& path, std::span<const Candidate> population);

}  // namespace groupflow

#endif  // GROUPFLOW_EDITOR_H_

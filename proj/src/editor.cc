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

#include "groupflow/editor.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "groupflow/error.h"
#include "groupflow/explain.h"
#include "groupflow/parallel.h"
#include "nlohmann/json.hpp"

namespace groupflow {
namespace {

constexpr double kWeightFloor = 1e-6;

std::string Fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

double Improvement(double from, double to, Direction direction) {
  return direction == Direction::kMaximize ? to - from : from - to;
}

}  // namespace

std::string_view DirectionName(Direction direction) {
  return direction == Direction::kMaximize ? "maximize" : "minimize";
}

Direction ParseDirection(std::string_view name) {
  if (name == "maximize") return Direction::kMaximize;
  if (name == "minimize") return Direction::kMinimize;
  throw Error(ErrorCode::kInvalidConfig, "unknown direction '" + std::string(name) + "'");
}

void EAConfig::Validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::kInvalidConfig, why); };
  if (population < 2) fail("population must be >= 2");
  if (key_count < 1) fail("key_count must be >= 1");
  for (const double p : {crossover_prob, mutation_prob, vocab_share}) {
    if (!(p >= 0 && p <= 1)) fail("probabilities must be in [0, 1]");
  }
  if (std::isnan(hit_threshold)) fail("hit_threshold must be a number");
  if (jobs < 1) fail("jobs must be >= 1");
}

std::vector<std::size_t> ModelRanker::Rank(std::span<const Token> tokens,
                                           std::size_t k) const {
  const Encoding encoding = Encode(tokens, vocab_, params_.config.max_len);
  const ForwardTrace trace = Forward(params_, encoding.ids, encoding.validity);
  const std::size_t target = ExplanationTarget(params_, trace, std::nullopt);
  const ImportanceScores scores =
      Importance(trace, ComputeLayerGradients(params_, trace, target));
  std::vector<std::size_t> ranked = TopTokens(scores, k);
  for (std::size_t p = 0; p < tokens.size() && ranked.size() < k; ++p) {
    if (std::find(ranked.begin(), ranked.end(), p) == ranked.end()) ranked.push_back(p);
  }
  return ranked;
}

KeyFragments FindKeyFragments(const KeyFragmentRanker& ranker,
                              std::span<const Token> tokens, std::size_t k) {
  KeyFragments keys;
  keys.positions = ranker.Rank(tokens, std::min(k, tokens.size()));
  for (const std::size_t p : keys.positions) keys.texts.push_back(tokens[p].text);
  return keys;
}

bool FragmentVocabulary::Contains(std::string_view text) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const VocabularyEntry& e) { return e.text == text; });
}

bool FragmentVocabulary::Insert(VocabularyEntry entry) {
  if (Contains(entry.text)) return false;
  entries_.push_back(std::move(entry));
  return true;
}

std::pair<std::vector<Token>, std::vector<Token>> Crossover(
    std::span<const Token> m1, std::span<const Token> m2,
    std::span<const std::size_t> keys1, std::span<const std::size_t> keys2) {
  std::vector<std::size_t> k1(keys1.begin(), keys1.end());
  std::vector<std::size_t> k2(keys2.begin(), keys2.end());
  std::sort(k1.begin(), k1.end());
  std::sort(k2.begin(), k2.end());
  std::vector<Token> c1(m1.begin(), m1.end()), c2(m2.begin(), m2.end());
  if (k1.empty() || k2.empty()) return {c1, c2};
  for (std::size_t i = 0; i < k1.size(); ++i) c1[k1[i]] = m2[k2[i % k2.size()]];
  for (std::size_t i = 0; i < k2.size(); ++i) c2[k2[i]] = m1[k1[i % k1.size()]];
  return {c1, c2};
}

std::vector<Token> Mutate(std::span<const Token> molecule,
                          const FragmentVocabulary& vocab, MutationMode mode,
                          const GroupRegistry& registry, Rng& rng) {
  if (molecule.empty()) throw Error(ErrorCode::kEmptyMolecule, "nothing to mutate");
  std::vector<Token> out(molecule.begin(), molecule.end());
  const std::size_t at = rng.UniformIndex(out.size());
  if (mode == MutationMode::kVocabulary && !vocab.empty()) {
    const std::string& text = vocab.entries()[rng.UniformIndex(vocab.size())].text;
    out[at] = registry.GroupToken(std::string_view(text).substr(1, text.size() - 2));
  } else {
    const auto& names = registry.group_names();
    out[at] = registry.GroupToken(names[rng.UniformIndex(names.size())]);
  }
  return out;
}

bool Better(double a, double b, Direction direction) {
  return direction == Direction::kMaximize ? a > b : a < b;
}

std::size_t UpdateVocabulary(FragmentVocabulary& vocab, const Candidate& child,
                             std::span<const double> parent_fitness,
                             Direction direction) {
  for (const double f : parent_fitness) {
    if (!Better(child.fitness, f, direction)) return 0;
  }
  std::size_t inserted = 0;
  for (const std::string& text : child.keys.texts) {
    if (vocab.Insert({text, child.generation, child.fitness})) ++inserted;
  }
  return inserted;
}

Editor::Editor(const EAConfig& config, const GroupRegistry& registry,
               const PropertyOracle& oracle, const KeyFragmentRanker* ranker)
    : config_(config),
      registry_(registry),
      oracle_(oracle),
      ranker_(ranker),
      rng_(DeriveSeed(config.seed, "editor")) {
  config_.Validate();
  if (config_.guided && ranker_ == nullptr) {
    throw Error(ErrorCode::kInvalidConfig, "guided editing needs a ranker");
  }
}

double Editor::Fitness(std::span<const Token> tokens) const {
  return OracleScore(tokens, oracle_, registry_);
}

KeyFragments Editor::Keys(std::span<const Token> tokens) {
  if (!config_.guided) return {};
  return FindKeyFragments(*ranker_, tokens, config_.key_count);
}

std::vector<Candidate> Editor::InitPopulation(std::span<const MoleculeString> pool) {
  if (pool.size() < config_.population) {
    throw Error(ErrorCode::kInsufficientSeeds,
                "need " + std::to_string(config_.population) + " seed molecules, have " +
                    std::to_string(pool.size()));
  }
  std::vector<Candidate> population;
  const std::vector<std::size_t> picks =
      rng_.SampleWithoutReplacement(pool.size(), config_.population);
  for (std::size_t s = 0; s < picks.size(); ++s) {
    Candidate c;
    c.id = next_id_++;
    c.tokens = pool[picks[s]].tokens;
    c.op = "seed";
    c.slot = s;
    population.push_back(std::move(c));
  }
  Finish(population);
  return population;
}

void Editor::Finish(std::vector<Candidate>& offspring) {
  ParallelFor(offspring.size(), config_.jobs, [&](std::size_t i) {
    offspring[i].fitness = Fitness(offspring[i].tokens);
    offspring[i].keys = Keys(offspring[i].tokens);
  });
}

std::size_t Editor::SampleParent(const std::vector<double>& weights,
                                 std::optional<std::size_t> exclude) {
  double total = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (i != exclude) total += weights[i];
  }
  double r = rng_.Uniform() * total;
  std::size_t last = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (i == exclude) continue;
    last = i;
    if (r < weights[i]) return i;
    r -= weights[i];
  }
  return last;
}

std::vector<Candidate> Editor::Step(const std::vector<Candidate>& population,
                                    std::size_t generation) {
  const std::size_t n = population.size();
  std::vector<double> weights(n, 1.0);
  if (config_.guided) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const Candidate& c : population) {
      lo = std::min(lo, c.fitness);
      hi = std::max(hi, c.fitness);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double shifted = config_.direction == Direction::kMaximize
                                 ? population[i].fitness - lo
                                 : hi - population[i].fitness;
      weights[i] = std::max(shifted, kWeightFloor);
    }
  }

  std::vector<Candidate> offspring;
  std::vector<std::vector<double>> parent_fitness;
  auto add = [&](std::vector<Token> tokens, const Candidate& from,
                 std::vector<const Candidate*> parents, std::string op) {
    Candidate c;
    c.id = next_id_++;
    c.tokens = std::move(tokens);
    c.op = std::move(op);
    c.generation = generation;
    c.slot = from.slot;
    std::vector<double> fitness;
    for (const Candidate* p : parents) {
      c.parents.push_back(p->id);
      fitness.push_back(p->fitness);
    }
    offspring.push_back(std::move(c));
    parent_fitness.push_back(std::move(fitness));
  };

  const std::size_t crossover_trials = (n + 1) / 2;
  for (std::size_t t = 0; t < crossover_trials; ++t) {
    if (!rng_.Bernoulli(config_.crossover_prob)) continue;
    const std::size_t i = SampleParent(weights, std::nullopt);
    const std::size_t j = SampleParent(weights, i);
    const Candidate& a = population[i];
    const Candidate& b = population[j];
    std::vector<std::size_t> keys_a, keys_b;
    if (config_.guided) {
      keys_a = a.keys.positions;
      keys_b = b.keys.positions;
    } else {
      keys_a = rng_.SampleWithoutReplacement(a.tokens.size(),
                                             std::min(config_.key_count, a.tokens.size()));
      keys_b = rng_.SampleWithoutReplacement(b.tokens.size(),
                                             std::min(config_.key_count, b.tokens.size()));
    }
    auto [c1, c2] = Crossover(a.tokens, b.tokens, keys_a, keys_b);
    add(std::move(c1), a, {&a, &b}, "crossover");
    add(std::move(c2), b, {&a, &b}, "crossover");
  }
  for (std::size_t t = 0; t < n; ++t) {
    if (!rng_.Bernoulli(config_.mutation_prob)) continue;
    const Candidate& parent = population[rng_.UniformIndex(n)];
    const bool from_vocab = config_.guided && rng_.Bernoulli(config_.vocab_share);
    const MutationMode mode = from_vocab ? MutationMode::kVocabulary : MutationMode::kRandom;
    std::vector<Token> child = Mutate(parent.tokens, vocab_, mode, registry_, rng_);
    add(std::move(child), parent, {&parent},
        from_vocab && !vocab_.empty() ? "mutate_vocab" : "mutate_random");
  }

  Finish(offspring);
  if (config_.guided) {
    for (std::size_t i = 0; i < offspring.size(); ++i) {
      UpdateVocabulary(vocab_, offspring[i], parent_fitness[i], config_.direction);
    }
  }

  std::vector<Candidate> merged = population;
  merged.insert(merged.end(), offspring.begin(), offspring.end());
  std::stable_sort(merged.begin(), merged.end(), [&](const Candidate& x, const Candidate& y) {
    return Better(x.fitness, y.fitness, config_.direction);
  });
  merged.resize(n);
  last_offspring_ = std::move(offspring);
  return merged;
}

CampaignResult Editor::Run(std::span<const MoleculeString> pool) {
  CampaignResult result;
  std::vector<Candidate> population = InitPopulation(pool);
  std::vector<double> seed_fitness(population.size()), best(population.size());
  for (const Candidate& c : population) seed_fitness[c.slot] = best[c.slot] = c.fitness;
  auto record = [&](std::size_t generation) {
    HistoryRow row;
    row.generation = generation;
    row.best = population[0].fitness;
    double total = 0;
    for (const Candidate& c : population) {
      if (Better(c.fitness, row.best, config_.direction)) row.best = c.fitness;
      total += c.fitness;
    }
    row.mean = total / static_cast<double>(population.size());
    row.vocab_size = vocab_.size();
    result.history.push_back(row);
  };
  record(0);
  for (std::size_t g = 1; g <= config_.generations; ++g) {
    population = Step(population, g);
    for (const Candidate& c : last_offspring_) {
      if (Better(c.fitness, best[c.slot], config_.direction)) best[c.slot] = c.fitness;
    }
    record(g);
  }
  std::size_t hits = 0;
  for (std::size_t s = 0; s < seed_fitness.size(); ++s) {
    SeedOutcome o;
    o.seed_id = static_cast<std::int64_t>(s);
    o.seed_fitness = seed_fitness[s];
    o.best_fitness = best[s];
    o.hit = Improvement(seed_fitness[s], best[s], config_.direction) > config_.hit_threshold;
    hits += o.hit ? 1 : 0;
    result.per_seed.push_back(o);
  }
  result.hit_ratio = static_cast<double>(hits) / static_cast<double>(seed_fitness.size());
  result.population = std::move(population);
  result.vocabulary = vocab_;
  return result;
}

void WriteHistoryCsv(const std::string& path, std::span<const HistoryRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << "generation,best,mean,vocab_size\n";
  for (const HistoryRow& r : rows) {
    out << r.generation << ',' << Fixed(r.best) << ',' << Fixed(r.mean) << ','
        << r.vocab_size << '\n';
  }
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path);
}

void WriteHits(const std::string& path, const CampaignResult& result) {
  nlohmann::ordered_json json;
  json["hit_ratio"] = result.hit_ratio;
  json["per_seed"] = nlohmann::ordered_json::array();
  for (const SeedOutcome& o : result.per_seed) {
    nlohmann::ordered_json entry;
    entry["slot"] = o.seed_id;
    entry["seed_fitness"] = o.seed_fitness;
    entry["best_fitness"] = o.best_fitness;
    entry["hit"] = o.hit;
    json["per_seed"].push_back(entry);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << json.dump(2) << '\n';
}

void WritePopulation(const std::string& path, std::span<const Candidate> population) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  for (const Candidate& c : population) {
    DatasetRecord r;
    r.id = c.id;
    r.molecule.tokens = c.tokens;
    r.molecule.label = c.fitness;
    r.split = Split::kTest;
    out << RecordToJsonLine(r) << '\n';
  }
}

}  // namespace groupflow

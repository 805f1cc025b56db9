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

#include "groupflow/cli.h"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <type_traits>

#include "CLI11.hpp"
#include "groupflow/error.h"
#include "groupflow/rng.h"
#include "groupflow/selfcheck.h"
#include "nlohmann/json.hpp"

namespace groupflow {
namespace {

using Json = nlohmann::json;

struct KeySpec {
  std::string key;
  std::function<void(RunConfig&, const Json&)> set;
  std::function<Json(const RunConfig&)> get;
  bool is_string = false;
};

[[noreturn]] void Invalid(const std::string& key, const std::string& why) {
  throw ConfigError(ErrorCode::kInvalidValue, key, why);
}

template <typename T>
T Convert(const std::string& key, const Json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) Invalid(key, "expected true or false");
    return v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) Invalid(key, "expected a string");
    return v.get<std::string>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) Invalid(key, "expected a number");
    return v.get<T>();
  } else {
    if (!v.is_number_integer()) Invalid(key, "expected a non-negative integer");
    if (v.is_number_unsigned()) return static_cast<T>(v.get<std::uint64_t>());
    const auto i = v.get<std::int64_t>();
    if (i < 0) Invalid(key, "expected a non-negative integer");
    return static_cast<T>(i);
  }
}

template <typename Ref>
KeySpec Plain(std::string key, Ref ref) {
  using T = std::remove_reference_t<decltype(ref(std::declval<RunConfig&>()))>;
  KeySpec spec;
  spec.key = key;
  spec.is_string = std::is_same_v<T, std::string>;
  spec.set = [key, ref](RunConfig& c, const Json& v) { ref(c) = Convert<T>(key, v); };
  spec.get = [ref](const RunConfig& c) { return Json(ref(const_cast<RunConfig&>(c))); };
  return spec;
}

template <typename Ref, typename Parse, typename Name>
KeySpec Named(std::string key, Ref ref, Parse parse, Name name) {
  KeySpec spec;
  spec.key = key;
  spec.is_string = true;
  spec.set = [key, ref, parse](RunConfig& c, const Json& v) {
    const std::string text = Convert<std::string>(key, v);
    try {
      ref(c) = parse(text);
    } catch (const Error& e) {
      Invalid(key, e.what());
    }
  };
  spec.get = [ref, name](const RunConfig& c) {
    return Json(std::string(name(ref(const_cast<RunConfig&>(c)))));
  };
  return spec;
}

#define GF_REF(path) [](RunConfig& c) -> auto& { return c.path; }

const std::vector<KeySpec>& Specs() {
  static const std::vector<KeySpec> specs = {
      Plain("seed", GF_REF(seed)),
      Plain("jobs", GF_REF(jobs)),
      Plain("paths.output_dir", GF_REF(output_dir)),
      Plain("paths.dataset", GF_REF(dataset)),
      Plain("paths.registry", GF_REF(registry)),
      Plain("paths.checkpoint", GF_REF(checkpoint)),
      Plain("paths.pretrained", GF_REF(pretrained)),
      Plain("data.n_molecules", GF_REF(data.n_molecules)),
      Plain("data.min_length", GF_REF(data.min_length)),
      Plain("data.max_length", GF_REF(data.max_length)),
      Plain("data.n_fragment_types", GF_REF(data.n_fragment_types)),
      Plain("data.motif_a", GF_REF(data.motif_a)),
      Plain("data.motif_b", GF_REF(data.motif_b)),
      Plain("data.distractor_rate", GF_REF(data.distractor_rate)),
      Plain("data.annotation_rate", GF_REF(data.annotation_rate)),
      Named("data.task", GF_REF(data.task), ParseTask, TaskName),
      Plain("data.train_fraction", GF_REF(data.train_fraction)),
      Plain("data.val_fraction", GF_REF(data.val_fraction)),
      Plain("data.test_fraction", GF_REF(data.test_fraction)),
      Plain("data.top_q", GF_REF(data.top_q)),
      Plain("data.pair_bonus", GF_REF(data.pair_bonus)),
      Plain("encoder.layers", GF_REF(encoder.layers)),
      Plain("encoder.heads", GF_REF(encoder.heads)),
      Plain("encoder.d_model", GF_REF(encoder.d_model)),
      Plain("encoder.d_ff", GF_REF(encoder.d_ff)),
      Plain("encoder.max_len", GF_REF(encoder.max_len)),
      Plain("encoder.min_count", GF_REF(min_count)),
      Plain("pretrain.epochs", GF_REF(pretrain.epochs)),
      Plain("pretrain.batch_size", GF_REF(pretrain.batch_size)),
      Plain("pretrain.lr", GF_REF(pretrain.lr)),
      Plain("pretrain.mask_rate", GF_REF(pretrain.mask_rate)),
      Plain("train.epochs", GF_REF(train.epochs)),
      Plain("train.batch_size", GF_REF(train.batch_size)),
      Plain("train.lr", GF_REF(train.lr)),
      Plain("train.beta1", GF_REF(train.beta1)),
      Plain("train.beta2", GF_REF(train.beta2)),
      Plain("train.adam_eps", GF_REF(train.adam_eps)),
      Plain("train.margin", GF_REF(train.margin)),
      Plain("train.lambda_m", GF_REF(train.lambda_m)),
      Plain("train.second_order", GF_REF(train.second_order)),
      Plain("train.dropout", GF_REF(train.dropout)),
      Plain("train.eval_every_epoch", GF_REF(train.eval_every_epoch)),
      Named("explain.method", GF_REF(explain.method), ParseMethod, MethodName),
      Plain("explain.removal_ratio", GF_REF(explain.removal_ratio)),
      Plain("explain.split", GF_REF(explain_split)),
      Plain("ea.population", GF_REF(ea.population)),
      Plain("ea.generations", GF_REF(ea.generations)),
      Plain("ea.crossover_prob", GF_REF(ea.crossover_prob)),
      Plain("ea.mutation_prob", GF_REF(ea.mutation_prob)),
      Plain("ea.vocab_share", GF_REF(ea.vocab_share)),
      Plain("ea.key_count", GF_REF(ea.key_count)),
      Named("ea.direction", GF_REF(ea.direction), ParseDirection, DirectionName),
      Plain("ea.hit_threshold", GF_REF(ea.hit_threshold)),
      Plain("ea.guided", GF_REF(ea.guided)),
  };
  return specs;
}

#undef GF_REF

const KeySpec& FindSpec(const std::string& key) {
  for (const KeySpec& s : Specs()) {
    if (s.key == key) return s;
  }
  throw ConfigError(ErrorCode::kUnknownKey, key, "unknown configuration key");
}

void Flatten(const Json& json, const std::string& prefix,
             std::vector<std::pair<std::string, Json>>& out) {
  for (const auto& [k, v] : json.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      Flatten(v, key, out);
    } else {
      out.emplace_back(key, v);
    }
  }
}

void Wrap(const std::string& key, const std::function<void()>& validate) {
  try {
    validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    Invalid(key, e.what());
  }
}

Split ParseSplit(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ConfigError(ErrorCode::kInvalidValue, "explain.split", "must be train, val or test");
}

void EnsureDir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir + ": " + ec.message());
}

std::string Join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

struct Loaded {
  GroupRegistry registry;
  Dataset dataset;
};

Loaded LoadData(const RunConfig& c) {
  Loaded l;
  l.registry = GroupRegistry::Load(c.RegistryPath());
  l.dataset = LoadDataset(c.DatasetPath(), l.registry);
  return l;
}

int GenData(const RunConfig& c, std::ostream& out) {
  EnsureDir(c.output_dir);
  const GroupRegistry registry = DefaultRegistry(c.data.n_fragment_types);
  const Dataset dataset = Generate(registry, c.data);
  registry.Save(c.RegistryPath());
  SaveDataset(c.DatasetPath(), dataset);
  out << "wrote " << dataset.records.size() << " records to " << c.DatasetPath() << '\n';
  return 0;
}

EncoderParams FreshParams(const RunConfig& c, const Vocabulary& vocab) {
  EncoderConfig ec = c.encoder;
  ec.vocab_size = vocab.size();
  return InitParams(ec);
}

int Pretrain(const RunConfig& c, std::ostream& out) {
  EnsureDir(c.output_dir);
  const Loaded l = LoadData(c);
  const std::vector<MoleculeString> corpus = l.dataset.Molecules(Split::kTrain);
  const Vocabulary vocab = BuildVocabulary(l.dataset.AllMolecules(), c.min_count);
  EncoderParams params = FreshParams(c, vocab);
  const PretrainResult r = MlmPretrain(params, corpus, vocab, c.pretrain);
  out << "mlm loss " << FormatReal(r.initial_loss);
  for (const double v : r.epoch_losses) out << " -> " << FormatReal(v);
  out << '\n';
  SaveCheckpoint(c.CheckpointPath(), params, vocab);
  out << "saved " << c.CheckpointPath() << '\n';
  return 0;
}

std::vector<const DatasetRecord*> SplitRecords(const RunConfig& c, const Dataset& d) {
  return d.Select(ParseSplit(c.explain_split));
}

int TrainCommand(const RunConfig& c, std::ostream& out) {
  EnsureDir(c.output_dir);
  const Loaded l = LoadData(c);
  EncoderParams params;
  Vocabulary vocab;
  if (!c.pretrained.empty()) {
    Checkpoint ck = LoadCheckpoint(c.pretrained);
    params = std::move(ck.params);
    vocab = std::move(ck.vocab);
  } else {
    vocab = BuildVocabulary(l.dataset.AllMolecules(), c.min_count);
    params = FreshParams(c, vocab);
  }
  const TrainResult r = Train(params, vocab, l.dataset, c.train, c.explain);
  WriteMetricsCsv(Join(c.output_dir, "metrics.csv"), r.metrics);
  SaveCheckpoint(c.CheckpointPath(), params, vocab);
  const EvalSummary s = EvaluateRecords(params, vocab, SplitRecords(c, l.dataset), c.explain,
                                        c.jobs, DeriveSeed(c.seed, "eval"));
  WriteReports(Join(c.output_dir, "explanations.jsonl"), s.reports);
  for (const MetricsRow& row : r.metrics) out << MetricsCsvLine(row) << '\n';
  return 0;
}

int ExplainCommand(const RunConfig& c, std::ostream& out) {
  EnsureDir(c.output_dir);
  const Loaded l = LoadData(c);
  const Checkpoint ck = LoadCheckpoint(c.CheckpointPath());
  const EvalSummary s = EvaluateRecords(ck.params, ck.vocab, SplitRecords(c, l.dataset),
                                        c.explain, c.jobs, DeriveSeed(c.seed, "eval"));
  WriteReports(Join(c.output_dir, "explanations.jsonl"), s.reports);
  out << "explained " << s.reports.size() << " molecules\n";
  return 0;
}

int EvalCommand(const RunConfig& c, std::ostream& out) {
  EnsureDir(c.output_dir);
  const Loaded l = LoadData(c);
  const Checkpoint ck = LoadCheckpoint(c.CheckpointPath());
  const std::uint64_t eval_seed = DeriveSeed(c.seed, "eval");
  std::vector<MetricsRow> rows;
  for (const Split split : {Split::kVal, Split::kTest}) {
    EvalSummary s = EvaluateRecords(ck.params, ck.vocab, l.dataset.Select(split), c.explain,
                                    c.jobs, eval_seed);
    s.row.split = std::string(SplitName(split));
    rows.push_back(s.row);
    if (split == Split::kTest) WriteReports(Join(c.output_dir, "explanations.jsonl"), s.reports);
  }
  WriteMetricsCsv(Join(c.output_dir, "metrics.csv"), rows);

  std::ofstream ablation(Join(c.output_dir, "ablation.csv"), std::ios::trunc);
  if (!ablation) throw Error(ErrorCode::kIo, "cannot write ablation.csv");
  ablation << "method,exp_auc,mean_ep,mean_fidelity,random_fidelity\n";
  auto field = [](const std::optional<double>& v) { return v ? FormatReal(*v) : std::string(); };
  for (const Method m : AllMethods()) {
    ExplanationConfig xc = c.explain;
    xc.method = m;
    const EvalSummary s = EvaluateRecords(ck.params, ck.vocab, l.dataset.Select(Split::kTest),
                                          xc, c.jobs, eval_seed);
    ablation << MethodName(m) << ',' << field(s.row.exp_auc) << ',' << field(s.row.mean_ep)
             << ',' << field(s.row.mean_fidelity) << ',' << field(s.mean_random_fidelity)
             << '\n';
  }
  for (const MetricsRow& row : rows) out << MetricsCsvLine(row) << '\n';
  return 0;
}

int EditCommand(const RunConfig& c, std::ostream& out) {
  EnsureDir(c.output_dir);
  const Loaded l = LoadData(c);
  const PropertyOracle oracle = MakeOracle(l.registry, c.data);
  std::optional<Checkpoint> ck;
  std::optional<ModelRanker> ranker;
  if (c.ea.guided) {
    ck = LoadCheckpoint(c.CheckpointPath());
    ranker.emplace(ck->params, ck->vocab);
  }
  Editor editor(c.ea, l.registry, oracle, ranker ? &*ranker : nullptr);
  const std::vector<MoleculeString> pool = l.dataset.Molecules(Split::kTest);
  const CampaignResult r = editor.Run(pool);
  WriteHistoryCsv(Join(c.output_dir, "history.csv"), r.history);
  WriteHits(Join(c.output_dir, "hits.json"), r);
  WritePopulation(Join(c.output_dir, "population.jsonl"), r.population);
  out << "hit_ratio " << FormatReal(r.hit_ratio) << " vocab " << r.vocabulary.size() << '\n';
  return 0;
}

int SelfCheck(std::ostream& out) {
  const SelfCheckResult r = RunSelfCheck();
  for (const SelfCheckEntry& e : r.entries) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-22s %.3e\n", e.name.c_str(), e.max_rel_error);
    out << buf;
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max relative error %.3e over %zu derivatives\n",
                r.max_rel_error, r.checked);
  out << buf;
  const bool ok = r.max_rel_error <= 1e-4;
  out << (ok ? "selfcheck passed\n" : "selfcheck FAILED\n");
  return ok ? 0 : 3;
}

int ExitCodeFor(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kMalformedJson:
    case ErrorCode::kUnknownKey:
    case ErrorCode::kInvalidValue:
    case ErrorCode::kMalformedRecord:
    case ErrorCode::kInvariantViolation:
    case ErrorCode::kUnknownMethod:
    case ErrorCode::kUnsupported:
      return 2;
    default:
      return 3;
  }
}

}  // namespace

std::string RunConfig::DatasetPath() const {
  return dataset.empty() ? Join(output_dir, "dataset.jsonl") : dataset;
}
std::string RunConfig::RegistryPath() const {
  return registry.empty() ? Join(output_dir, "registry.json") : registry;
}
std::string RunConfig::CheckpointPath() const {
  return checkpoint.empty() ? Join(output_dir, "model.lmtn") : checkpoint;
}

void RunConfig::Finalize() {
  data.seed = DeriveSeed(seed, "data");
  encoder.seed = DeriveSeed(seed, "encoder");
  encoder.n_classes = data.task == Task::kRegression ? 1 : 2;
  pretrain.seed = DeriveSeed(seed, "pretrain");
  train.seed = DeriveSeed(seed, "train");
  train.jobs = jobs;
  ea.seed = DeriveSeed(seed, "editor");
  ea.jobs = jobs;
}

void RunConfig::Validate() const {
  if (jobs < 1) Invalid("jobs", "must be >= 1");
  if (output_dir.empty()) Invalid("paths.output_dir", "must not be empty");
  Wrap("data", [&] { data.Validate(); });
  Wrap("encoder", [&] {
    EncoderConfig ec = encoder;
    ec.vocab_size = Vocabulary::kNumSpecials + 1;
    ec.Validate();
  });
  if (min_count < 1) Invalid("encoder.min_count", "must be >= 1");
  if (pretrain.batch_size < 1) Invalid("pretrain.batch_size", "must be >= 1");
  if (!(pretrain.lr > 0)) Invalid("pretrain.lr", "must be > 0");
  if (!(pretrain.mask_rate > 0 && pretrain.mask_rate <= 1)) {
    Invalid("pretrain.mask_rate", "must be in (0, 1]");
  }
  Wrap("train", [&] { train.Validate(); });
  Wrap("explain", [&] { explain.Validate(); });
  ParseSplit(explain_split);
  Wrap("ea", [&] { ea.Validate(); });
}

std::vector<std::string> ConfigKeys() {
  std::vector<std::string> keys;
  for (const KeySpec& s : Specs()) keys.push_back(s.key);
  return keys;
}

RunConfig LoadRunConfig(const std::optional<std::string>& path,
                        const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig config;
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError(ErrorCode::kMalformedJson, *path, "cannot read config file");
    Json json;
    try {
      json = Json::parse(in);
    } catch (const Json::exception& e) {
      throw ConfigError(ErrorCode::kMalformedJson, *path, e.what());
    }
    if (!json.is_object()) {
      throw ConfigError(ErrorCode::kMalformedJson, *path, "top level must be an object");
    }
    std::vector<std::pair<std::string, Json>> flat;
    Flatten(json, "", flat);
    for (const auto& [key, value] : flat) FindSpec(key).set(config, value);
  }
  for (const auto& [key, text] : overrides) {
    const KeySpec& spec = FindSpec(key);
    Json value;
    if (spec.is_string) {
      value = text;
    } else if (text == "true" || text == "false") {
      value = text == "true";
    } else {
      try {
        value = Json::parse(text);
      } catch (const Json::exception&) {
        Invalid(key, "cannot parse '" + text + "'");
      }
    }
    spec.set(config, value);
  }
  config.Finalize();
  config.Validate();
  return config;
}

Json RunConfigToJson(const RunConfig& config) {
  Json json = Json::object();
  for (const KeySpec& s : Specs()) json[Json::json_pointer("/" + [&] {
    std::string p = s.key;
    for (char& ch : p) {
      if (ch == '.') ch = '/';
    }
    return p;
  }())] = s.get(config);
  return json;
}

int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Explainable property prediction on group-token molecules", "groupflow"};
  app.require_subcommand(0, 1);
  std::optional<std::string> config_path;
  std::optional<std::size_t> jobs;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "generate a synthetic planted-motif dataset"},
      {"pretrain", "masked-token pretraining"},
      {"train", "fine-tune with the marginal alignment loss"},
      {"explain", "write per-molecule explanations"},
      {"eval", "metrics and ablation tables for a checkpoint"},
      {"edit", "explanation-guided evolutionary editing"},
      {"selfcheck", "finite-difference gradient audit"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->allow_extras();
    sub->add_option("--config", config_path, "JSON configuration file");
    sub->add_option("--jobs", jobs, "parallel evaluation threads");
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n' << app.help();
    return 1;
  }
  const auto subs = app.get_subcommands();
  if (subs.empty()) {
    err << app.help();
    return 1;
  }
  CLI::App* sub = subs.front();
  const std::string command = sub->get_name();

  std::vector<std::pair<std::string, std::string>> overrides;
  const std::vector<std::string> extras = sub->remaining();
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& flag = extras[i];
    if (flag.rfind("--", 0) != 0 || flag.size() <= 2) {
      err << "unexpected argument '" << flag << "'\n";
      return 1;
    }
    std::string key = flag.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else if (i + 1 < extras.size()) {
      value = extras[++i];
    } else {
      err << "flag '" << flag << "' needs a value\n";
      return 1;
    }
    overrides.emplace_back(key, value);
  }
  if (jobs) overrides.emplace_back("jobs", std::to_string(*jobs));

  try {
    if (command == "selfcheck") return SelfCheck(out);
    const RunConfig config = LoadRunConfig(config_path, overrides);
    if (command == "gen-data") return GenData(config, out);
    if (command == "pretrain") return Pretrain(config, out);
    if (command == "train") return TrainCommand(config, out);
    if (command == "explain") return ExplainCommand(config, out);
    if (command == "eval") return EvalCommand(config, out);
    if (command == "edit") return EditCommand(config, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const RecordError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return ExitCodeFor(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  }
  err << "unknown command " << command << '\n';
  return 1;
}

}  // namespace groupflow

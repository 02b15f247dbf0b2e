// neuronscope: identify, intervene on, and fine-tune language-specific
// neurons in a desk-scale decoder-only transformer.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "neuronscope/canonical_json.hpp"
#include "neuronscope/corpus.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/harness.hpp"
#include "neuronscope/hashing.hpp"
#include "neuronscope/identify.hpp"
#include "neuronscope/intervene.hpp"
#include "neuronscope/io.hpp"
#include "neuronscope/lora.hpp"
#include "neuronscope/model.hpp"
#include "neuronscope/report.hpp"
#include "neuronscope/rng.hpp"
#include "neuronscope/stats.hpp"
#include "neuronscope/tasks.hpp"
#include "neuronscope/threads.hpp"
#include "neuronscope/version.hpp"

namespace fs = std::filesystem;
using namespace neuronscope;

namespace {

// NEURONSCOPE_SEED overrides any config- or flag-provided seed.
uint64_t effective_seed(uint64_t config_seed) {
  if (const char* env = std::getenv("NEURONSCOPE_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError("NEURONSCOPE_SEED must be an unsigned integer");
    }
  }
  return config_seed;
}

std::string join_argv(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    if (i) out += " ";
    out += argv[i];
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

std::vector<std::string> parse_str_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::vector<std::string> sorted_files(const std::string& dir, const std::string& suffix) {
  if (!fs::is_directory(dir)) throw ArtifactError("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.size() >= suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      out.push_back(entry.path().string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<NeuronSet> load_sets_dir(const std::string& dir) {
  std::vector<NeuronSet> sets;
  for (const auto& path : sorted_files(dir, ".set.json")) {
    sets.push_back(load_neuron_set(path));
  }
  if (sets.empty()) throw ArtifactError("no .set.json files in " + dir);
  return sets;
}

/// All artifacts derived from the same checkpoint must agree on the model
/// fingerprint they record.
void check_model_lineage(const std::map<std::string, std::string>& fingerprints) {
  std::string expect, from;
  for (const auto& [name, fp] : fingerprints) {
    if (fp.empty()) continue;
    if (expect.empty()) {
      expect = fp;
      from = name;
    } else if (fp != expect) {
      throw ArtifactError("lineage mismatch: " + from + " was built from model " + expect +
                          " but " + name + " from " + fp);
    }
  }
}

// --- run config ------------------------------------------------------------
//
// One JSON drives the pipeline-level commands (finetune, experiment):
// {
//   "seed": 1,
//   "model": {...},
//   "languages": [SynthLanguageSpec, ...],
//   "corpus_tokens": 50000,
//   "train": {"steps":N, "batch_size":8, "lr":1e-3},
//   "stats": {"percentiles":[5,10,25,75,90,95]},
//   "identify": {"bottom_fraction":0.05, "min_prob":0.5, "p":90, "m":60},
//   "ppxc": {"token_budget":20000},
//   "task": {"n_train":2000, "n_eval":500, "steps":200, "batch_size":8,
//            "lr":1e-3, "rank":8, "alpha":16, "random_per_layer":10},
//   "experiment": {"methods":[...], "setups":[...], "interventions":[...],
//                  "seeds":[...], "source":"synthA", "eval_languages":[...]}
// }
struct RunConfig {
  uint64_t seed = 1;
  ModelConfig model;
  std::vector<SynthLanguageSpec> languages;
  size_t corpus_tokens = 200000;
  nlohmann::json raw;

  static RunConfig load(const std::string& path) {
    RunConfig rc;
    rc.raw = parse_json_file(path);
    rc.seed = rc.raw.value("seed", uint64_t{1});
    if (rc.raw.contains("model")) rc.model = ModelConfig::from_json(rc.raw["model"]);
    if (rc.raw.contains("languages")) {
      for (const auto& j : rc.raw["languages"]) {
        rc.languages.push_back(SynthLanguageSpec::from_json(j));
      }
    }
    rc.corpus_tokens = rc.raw.value("corpus_tokens", size_t{200000});
    return rc;
  }

  const SynthLanguageSpec& language(const LanguageCode& code) const {
    for (const auto& s : languages) {
      if (s.code == code) return s;
    }
    throw ArtifactError("language spec not found in config: " + code);
  }
};

TaskHyper task_hyper_from(const nlohmann::json& raw, uint64_t seed) {
  TaskHyper hp;
  const nlohmann::json task = raw.value("task", nlohmann::json::object());
  hp.steps = task.value("steps", 200);
  hp.batch_size = task.value("batch_size", 8);
  hp.opt.lr = task.value("lr", 1e-3);
  hp.opt.weight_decay = task.value("weight_decay", 0.1);
  hp.seed = seed;
  return hp;
}

FinetuneConfig finetune_config_from(const nlohmann::json& raw, uint64_t seed) {
  FinetuneConfig fc;
  const nlohmann::json task = raw.value("task", nlohmann::json::object());
  fc.mlp_lora.rank = task.value("rank", 8);
  fc.mlp_lora.alpha = task.value("alpha", 16.0);
  fc.mlp_lora.target = LoraTarget::MaskedMlp;
  fc.mlp_lora.seed = derive_seed(seed, "mlp-lora");
  fc.attn_lora = fc.mlp_lora;
  fc.attn_lora.target = LoraTarget::Attention;
  fc.attn_lora.seed = derive_seed(seed, "attn-lora");
  fc.random_per_layer = task.value("random_per_layer", 10);
  fc.random_seed = derive_seed(seed, "random-set");
  fc.hyper = task_hyper_from(raw, derive_seed(seed, "task-train-loop"));
  return fc;
}

// --- subcommand implementations ------------------------------------------------

struct CorpusIngestArgs {
  std::string path, lang, out;
  size_t cap = 200000;
  uint64_t seed = 1;
};

void run_corpus_ingest(const CorpusIngestArgs& a, const std::string& cmdline) {
  const uint64_t seed = effective_seed(a.seed);
  const Corpus c = ingest_corpus(a.path, a.lang, a.cap, seed);
  save_corpus(c, a.out);
  ArtifactMeta meta;
  meta.seed = seed;
  meta.command = cmdline;
  meta.parents["input"] = fingerprint_file(a.path);
  write_meta(a.out, meta);
  std::cout << "wrote " << a.out << " (" << c.size() << " tokens, language " << c.language
            << ")\n";
}

struct CorpusSynthArgs {
  std::string spec_path, lang, out;
  size_t tokens = 200000;
};

void run_corpus_synth(const CorpusSynthArgs& a, const std::string& cmdline) {
  const nlohmann::json j = parse_json_file(a.spec_path);
  SynthLanguageSpec spec;
  if (j.contains("languages")) {
    if (a.lang.empty()) {
      throw UsageError("--lang is required when --spec is a run config with many languages");
    }
    RunConfig rc = RunConfig::load(a.spec_path);
    spec = rc.language(a.lang);
  } else {
    spec = SynthLanguageSpec::from_json(j);
  }
  spec.seed = effective_seed(spec.seed);
  const Corpus c = synthesize_corpus(spec, a.tokens);
  save_corpus(c, a.out);
  ArtifactMeta meta;
  meta.seed = spec.seed;
  meta.command = cmdline;
  write_meta(a.out, meta);
  std::cout << "wrote " << a.out << " (" << c.size() << " tokens, language " << c.language
            << ")\n";
}

struct TrainLmArgs {
  std::string config_path, corpus_dir, out;
  int steps = 0;
};

void run_train_lm(const TrainLmArgs& a, const std::string& cmdline) {
  const nlohmann::json raw = parse_json_file(a.config_path);
  ModelConfig mc = raw.contains("model") ? ModelConfig::from_json(raw["model"])
                                         : ModelConfig::from_json(raw);
  const nlohmann::json train = raw.value("train", nlohmann::json::object());

  LmTrainConfig tc;
  tc.steps = a.steps > 0 ? a.steps : train.value("steps", 100);
  tc.batch_size = train.value("batch_size", 8);
  tc.opt.lr = train.value("lr", 1e-3);
  tc.opt.weight_decay = train.value("weight_decay", 0.1);
  tc.seed = effective_seed(train.value("seed", raw.value("seed", uint64_t{1})));
  mc.seed = effective_seed(mc.seed);

  std::vector<Corpus> corpora;
  ArtifactMeta meta;
  for (const auto& path : sorted_files(a.corpus_dir, ".corpus")) {
    corpora.push_back(load_corpus(path));
    meta.parents["corpus:" + corpora.back().language] = fingerprint_file(path);
  }
  if (corpora.empty()) throw ArtifactError("no .corpus files in " + a.corpus_dir);

  Model model = Model::init(mc);
  const LossTrace trace = train_lm(model, corpora, tc);
  save_checkpoint(model, a.out);
  meta.seed = tc.seed;
  meta.command = cmdline;
  write_meta(a.out, meta);

  atomic_write_file(a.out + ".loss.csv", [&](std::ostream& os) {
    os << "step,loss\n";
    for (size_t i = 0; i < trace.per_step.size(); ++i) {
      os << i << "," << format_double(trace.per_step[i]) << "\n";
    }
  });
  std::cout << "wrote " << a.out << " (fingerprint " << model.fingerprint() << ", final loss "
            << trace.per_step.back() << ")\n";
}

struct StatsArgs {
  std::vector<std::string> corpus_paths;
  std::string corpus_dir, ckpt, out, percentiles = "5,10,25,75,90,95";
  int threads = 1;
};

void run_stats_collect(const StatsArgs& a, const std::string& cmdline) {
  Model model = load_checkpoint(a.ckpt);
  std::vector<std::string> paths = a.corpus_paths;
  if (!a.corpus_dir.empty()) {
    for (const auto& p : sorted_files(a.corpus_dir, ".corpus")) paths.push_back(p);
  }
  if (paths.empty()) throw ArtifactError("no corpora given (--corpus or --corpus-dir)");

  std::vector<Corpus> corpora;
  ArtifactMeta meta;
  meta.parents["checkpoint"] = fingerprint_file(a.ckpt);
  meta.parents["model"] = model.fingerprint();
  for (const auto& p : paths) {
    corpora.push_back(load_corpus(p));
    meta.parents["corpus:" + corpora.back().language] = fingerprint_file(p);
  }

  const StatsTable table = collect_stats(model, corpora, parse_int_list(a.percentiles),
                                         a.threads);
  save_stats(table, a.out);
  meta.command = cmdline;
  write_meta(a.out, meta);
  std::cout << "wrote " << a.out << " (" << table.languages.size() << " languages, "
            << table.config.n_neurons() << " neurons)\n";
}

struct IdentifyLapeArgs {
  std::string stats_path, langs, out_dir;
  double bottom = 0.01, min_prob = 0.95;
};

void write_set_files(const std::map<LanguageCode, NeuronSet>& sets, const std::string& out_dir,
                     const std::string& stats_path, const std::string& model_fp,
                     const std::string& cmdline) {
  fs::create_directories(out_dir);
  for (const auto& [lang, set] : sets) {
    const std::string path =
        (fs::path(out_dir) / (std::string(method_name(set.method)) + "_" + lang + ".set.json"))
            .string();
    save_neuron_set(set, path);
    ArtifactMeta meta;
    meta.command = cmdline;
    meta.parents["stats"] = fingerprint_file(stats_path);
    meta.parents["model"] = model_fp;
    write_meta(path, meta);
    std::cout << "wrote " << path << " (" << set.neurons.size() << " neurons)\n";
  }
}

void run_identify_lape(const IdentifyLapeArgs& a, const std::string& cmdline) {
  const StatsTable stats = load_stats(a.stats_path);
  const std::vector<std::string> langs = parse_str_list(a.langs);
  const auto scores = lape_scores(stats, langs);
  const auto sets = select_lape_neurons(scores, stats, langs, a.bottom, a.min_prob);
  write_set_files(sets, a.out_dir, a.stats_path, stats.fingerprint, cmdline);
}

struct IdentifyActProbArgs {
  std::string stats_path, out_dir;
  int p = 90, m = 0;
};

void run_identify_actprob(const IdentifyActProbArgs& a, const std::string& cmdline) {
  const StatsTable stats = load_stats(a.stats_path);
  if (a.m < 1) throw UsageError("--m must be >= 1");
  const auto rel = actprob_relevance(stats, a.p);
  const auto sets = select_topm(rel, stats.config, a.m, a.p);
  write_set_files(sets, a.out_dir, a.stats_path, stats.fingerprint, cmdline);
}

struct ReportArgs {
  std::string sets_dir, ppxc_path, results_path, out_dir;
};

void run_report(const ReportArgs& a, const std::string& cmdline) {
  ReportInputs inputs;
  inputs.sets = load_sets_dir(a.sets_dir);
  int n_layers = 0;
  for (const auto& s : inputs.sets) {
    for (const auto& n : s.neurons) n_layers = std::max(n_layers, n.layer);
  }
  inputs.n_layers = std::max(n_layers, 1);

  std::map<std::string, std::string> lineage;
  for (const auto& path : sorted_files(a.sets_dir, ".set.json")) {
    bool found = false;
    const ArtifactMeta meta = read_meta(path, &found);
    if (found) {
      auto it = meta.parents.find("model");
      if (it != meta.parents.end()) lineage["set " + path] = it->second;
    }
  }

  PpxcMatrix ppxc;
  if (!a.ppxc_path.empty()) {
    ppxc = load_ppxc_csv(a.ppxc_path);
    inputs.ppxc = &ppxc;
    bool found = false;
    const ArtifactMeta meta = read_meta(a.ppxc_path, &found);
    if (found) {
      auto it = meta.parents.find("model");
      if (it != meta.parents.end()) lineage["ppxc " + a.ppxc_path] = it->second;
    }
  }
  std::vector<ExperimentRow> rows;
  if (!a.results_path.empty()) {
    rows = parse_experiment_csv(read_file(a.results_path));
    inputs.results = &rows;
    bool found = false;
    const ArtifactMeta meta = read_meta(a.results_path, &found);
    if (found) {
      auto it = meta.parents.find("model");
      if (it != meta.parents.end()) lineage["results " + a.results_path] = it->second;
    }
  }
  check_model_lineage(lineage);

  DirLock lock(a.out_dir);
  const auto written = emit_report(inputs, a.out_dir, 0, cmdline);
  for (const auto& f : written) std::cout << "wrote " << f << "\n";
}

struct PpxcArgs {
  std::string ckpt, sets_dir, corpora_dir, out_dir;
  size_t budget = 100000;
  int threads = 1;
};

void run_ppxc(const PpxcArgs& a, const std::string& cmdline) {
  Model model = load_checkpoint(a.ckpt);
  const std::string model_fp = model.fingerprint();

  std::map<LanguageCode, NeuronSet> sets;
  std::map<std::string, std::string> lineage;
  lineage["checkpoint " + a.ckpt] = model_fp;
  for (const auto& path : sorted_files(a.sets_dir, ".set.json")) {
    NeuronSet set = load_neuron_set(path);
    bool found = false;
    const ArtifactMeta meta = read_meta(path, &found);
    if (found) {
      auto it = meta.parents.find("model");
      if (it != meta.parents.end()) lineage["set " + path] = it->second;
    }
    sets[set.language] = std::move(set);
  }
  if (sets.empty()) throw ArtifactError("no .set.json files in " + a.sets_dir);
  check_model_lineage(lineage);

  std::map<LanguageCode, Corpus> corpora;
  ArtifactMeta meta;
  meta.parents["checkpoint"] = fingerprint_file(a.ckpt);
  meta.parents["model"] = model_fp;
  for (const auto& path : sorted_files(a.corpora_dir, ".corpus")) {
    Corpus c = load_corpus(path);
    if (sets.count(c.language)) {
      meta.parents["corpus:" + c.language] = fingerprint_file(path);
      corpora.emplace(c.language, std::move(c));
    }
  }

  const PpxcMatrix m = ppxc_matrix(model, sets, corpora, a.budget, a.threads);
  DirLock lock(a.out_dir);
  const std::string csv_path = (fs::path(a.out_dir) / "ppxc.csv").string();
  save_ppxc_csv(m, csv_path);
  meta.command = cmdline;
  write_meta(csv_path, meta);
  const std::string svg_path = (fs::path(a.out_dir) / "ppxc.svg").string();
  atomic_write_file(svg_path, [&](std::ostream& os) {
    os << svg_heatmap(m.languages, m.languages, m.entries,
                      "perplexity change (zero intervention)");
  });
  write_meta(svg_path, meta);
  std::cout << "wrote " << csv_path << " (mean diag " << m.mean_diagonal() << ", mean offdiag "
            << m.mean_off_diagonal() << ")\n";
}

struct FinetuneArgs {
  std::string ckpt, config_path, sets_dir, out;
  std::string task = "nli", method = "lape", setup = "target-only";
  std::string source, target;
  int rank = 8, steps = 0;
  double alpha = 16.0;
};

void run_finetune(const FinetuneArgs& a, const std::string& cmdline) {
  if (a.task != "nli") throw UsageError("unknown task: " + a.task + " (supported: nli)");
  RunConfig rc = RunConfig::load(a.config_path);
  const uint64_t seed = effective_seed(rc.seed);

  Model model = load_checkpoint(a.ckpt);
  const std::string model_fp = model.fingerprint();

  const std::string source =
      a.source.empty()
          ? rc.raw.value("experiment", nlohmann::json::object()).value("source", std::string{})
          : a.source;
  if (source.empty()) throw UsageError("--source (or experiment.source in config) is required");
  const FinetuneSetup setup = setup_from_name(a.setup);
  const std::string target = a.target;
  if (target.empty() &&
      (setup == FinetuneSetup::TargetOnly || setup == FinetuneSetup::SourcePlusTarget)) {
    throw UsageError("--target is required for target-dependent setups");
  }

  const IdentifyMethod method = method_from_name(a.method);
  std::map<LanguageCode, NeuronSet> source_sets, target_sets;
  std::map<std::string, std::string> lineage;
  lineage["checkpoint " + a.ckpt] = model_fp;
  for (const auto& path : sorted_files(a.sets_dir, ".set.json")) {
    NeuronSet set = load_neuron_set(path);
    if (set.method != method) continue;
    bool found = false;
    const ArtifactMeta meta = read_meta(path, &found);
    if (found && meta.parents.count("model")) lineage["set " + path] = meta.parents.at("model");
    if (set.language == source) source_sets[set.language] = set;
    if (!target.empty() && set.language == target) target_sets[set.language] = set;
  }
  check_model_lineage(lineage);
  if (setup == FinetuneSetup::SourceOnly && source_sets.empty()) {
    throw ArtifactError("no source-language set for method " + a.method);
  }
  if ((setup == FinetuneSetup::TargetOnly || setup == FinetuneSetup::SourcePlusTarget) &&
      target_sets.empty()) {
    throw ArtifactError("no target-language set for method " + a.method);
  }

  FinetuneConfig fc = finetune_config_from(rc.raw, seed);
  fc.setup = setup;
  fc.mlp_lora.rank = a.rank;
  fc.mlp_lora.alpha = a.alpha;
  fc.attn_lora.rank = a.rank;
  fc.attn_lora.alpha = a.alpha;
  if (a.steps > 0) fc.hyper.steps = a.steps;

  const nlohmann::json task = rc.raw.value("task", nlohmann::json::object());
  const TaskDataset train_data = gen_classification_task(
      rc.language(source), task.value("n_train", 2000), derive_seed(seed, "task-train"));

  const FinetuneResult result = finetune(model, train_data, source_sets, target_sets, fc);
  save_adapters(model, a.out);
  ArtifactMeta meta;
  meta.seed = seed;
  meta.command = cmdline;
  meta.parents["checkpoint"] = fingerprint_file(a.ckpt);
  meta.parents["model"] = model_fp;
  write_meta(a.out, meta);
  std::cout << "wrote " << a.out << " (train accuracy " << result.train.final_train_accuracy
            << ", final loss " << result.train.loss_trace.back() << ")\n";
}

struct ExperimentArgs {
  std::string config_path, ckpt, stats_path, sets_dir, out_dir;
  int threads = 1;
};

void run_experiment(const ExperimentArgs& a, const std::string& cmdline) {
  RunConfig rc = RunConfig::load(a.config_path);
  const uint64_t seed = effective_seed(rc.seed);
  const nlohmann::json exp = rc.raw.value("experiment", nlohmann::json::object());

  ExperimentConfig ec;
  for (const auto& m : exp.value("methods", std::vector<std::string>{"lape"})) {
    ec.methods.push_back(method_from_name(m));
  }
  for (const auto& s : exp.value("setups", std::vector<std::string>{"none"})) {
    ec.setups.push_back(setup_from_name(s));
  }
  ec.interventions = exp.value(
      "interventions", std::vector<std::string>{"noint", "mean", "p90", "zero", "p10"});
  for (const uint64_t s : exp.value("seeds", std::vector<uint64_t>{1, 2, 3})) {
    ec.seeds.push_back(derive_seed(seed, "experiment-seed", s));
  }
  ec.source_language = exp.value("source", std::string{});
  if (ec.source_language.empty()) throw UsageError("experiment.source missing from config");
  ec.eval_languages = exp.value("eval_languages", std::vector<std::string>{});
  if (ec.eval_languages.empty()) throw UsageError("experiment.eval_languages missing");
  const nlohmann::json task = rc.raw.value("task", nlohmann::json::object());
  ec.n_train = task.value("n_train", 2000);
  ec.n_eval = task.value("n_eval", 500);
  ec.finetune = finetune_config_from(rc.raw, seed);
  ec.n_threads = a.threads;

  Model model = load_checkpoint(a.ckpt);
  const std::string model_fp = model.fingerprint();
  const StatsTable stats = load_stats(a.stats_path);
  std::map<std::string, std::string> lineage;
  lineage["checkpoint " + a.ckpt] = model_fp;
  lineage["stats " + a.stats_path] = stats.fingerprint;

  std::map<IdentifyMethod, std::map<LanguageCode, NeuronSet>> sets;
  for (const auto& path : sorted_files(a.sets_dir, ".set.json")) {
    NeuronSet set = load_neuron_set(path);
    bool found = false;
    const ArtifactMeta meta = read_meta(path, &found);
    if (found && meta.parents.count("model")) lineage["set " + path] = meta.parents.at("model");
    sets[set.method][set.language] = std::move(set);
  }
  check_model_lineage(lineage);

  std::map<LanguageCode, SynthLanguageSpec> specs;
  for (const auto& s : rc.languages) specs[s.code] = s;

  const auto rows = experiment_matrix(model, stats, sets, specs, ec);

  DirLock lock(a.out_dir);
  const std::string csv_path = (fs::path(a.out_dir) / "results.csv").string();
  const std::string body = experiment_csv(rows);
  atomic_write_file(csv_path, [&](std::ostream& os) { os << body; });
  ArtifactMeta meta;
  meta.seed = seed;
  meta.command = cmdline;
  meta.parents["checkpoint"] = fingerprint_file(a.ckpt);
  meta.parents["model"] = model_fp;
  meta.parents["stats"] = fingerprint_file(a.stats_path);
  write_meta(csv_path, meta);
  std::cout << "wrote " << csv_path << " (" << rows.size() << " rows)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"language-specific neuron analysis toolkit"};
  app.set_version_flag("--version", std::string(kToolName) + " " + kToolVersion);
  app.require_subcommand(1);
  const std::string cmdline = join_argv(argc, argv);

  int threads = default_threads();
  app.add_option("--threads", threads, "worker thread cap")->capture_default_str();

  // corpus
  auto* corpus_cmd = app.add_subcommand("corpus", "ingest or synthesize corpora");
  corpus_cmd->require_subcommand(1);
  CorpusIngestArgs ing;
  auto* ingest_cmd = corpus_cmd->add_subcommand("ingest", "tokenize a text file");
  ingest_cmd->add_option("--path", ing.path, "input text file")->required();
  ingest_cmd->add_option("--lang", ing.lang, "language code")->required();
  ingest_cmd->add_option("--cap", ing.cap, "token cap")->capture_default_str();
  ingest_cmd->add_option("--seed", ing.seed, "shuffle seed")->capture_default_str();
  ingest_cmd->add_option("--out", ing.out, "output corpus file")->required();

  CorpusSynthArgs syn;
  auto* synth_cmd = corpus_cmd->add_subcommand("synth", "synthesize a language corpus");
  synth_cmd->add_option("--spec", syn.spec_path, "language spec JSON (or run config)")
      ->required();
  synth_cmd->add_option("--lang", syn.lang, "language to pick from a run config");
  synth_cmd->add_option("--tokens", syn.tokens, "tokens to generate")->capture_default_str();
  synth_cmd->add_option("--out", syn.out, "output corpus file")->required();

  // train-lm
  TrainLmArgs tl;
  auto* train_cmd = app.add_subcommand("train-lm", "train the toy LM");
  train_cmd->add_option("--config", tl.config_path, "model/train config JSON")->required();
  train_cmd->add_option("--corpus-dir", tl.corpus_dir, "directory of .corpus files")
      ->required();
  train_cmd->add_option("--steps", tl.steps, "optimizer steps (overrides config)");
  train_cmd->add_option("--out", tl.out, "output checkpoint")->required();

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "activation statistics");
  stats_cmd->require_subcommand(1);
  StatsArgs st;
  auto* collect_cmd = stats_cmd->add_subcommand("collect", "collect per-language stats");
  collect_cmd->add_option("--ckpt", st.ckpt, "checkpoint")->required();
  collect_cmd->add_option("--corpus", st.corpus_paths, "corpus file (repeatable)");
  collect_cmd->add_option("--corpus-dir", st.corpus_dir, "directory of .corpus files");
  collect_cmd->add_option("--percentiles", st.percentiles, "comma list")
      ->capture_default_str();
  collect_cmd->add_option("--out", st.out, "output stats JSON")->required();

  // identify
  auto* ident_cmd = app.add_subcommand("identify", "turn stats into neuron sets");
  ident_cmd->require_subcommand(1);
  IdentifyLapeArgs il;
  auto* lape_cmd = ident_cmd->add_subcommand("lape", "entropy-based identification");
  lape_cmd->add_option("--stats", il.stats_path, "stats JSON")->required();
  lape_cmd->add_option("--langs", il.langs, "comma-separated language set")->required();
  lape_cmd->add_option("--bottom", il.bottom, "bottom fraction by score")
      ->capture_default_str();
  lape_cmd->add_option("--min-prob", il.min_prob, "attribution threshold")
      ->capture_default_str();
  lape_cmd->add_option("--out", il.out_dir, "output directory")->required();

  IdentifyActProbArgs ia;
  auto* act_cmd = ident_cmd->add_subcommand("actprob", "percentile-threshold identification");
  act_cmd->add_option("--stats", ia.stats_path, "stats JSON")->required();
  act_cmd->add_option("--p", ia.p, "reference percentile")->capture_default_str();
  act_cmd->add_option("--m", ia.m, "neurons per language")->required();
  act_cmd->add_option("--out", ia.out_dir, "output directory")->required();

  ReportArgs ir;
  auto* ident_report_cmd = ident_cmd->add_subcommand("report", "set-level reports");
  ident_report_cmd->add_option("--sets", ir.sets_dir, "directory of .set.json files")
      ->required();
  ident_report_cmd->add_option("--out", ir.out_dir, "output directory")->required();

  // ppxc
  PpxcArgs pp;
  auto* ppxc_cmd = app.add_subcommand("ppxc", "perplexity-change matrix");
  ppxc_cmd->add_option("--ckpt", pp.ckpt, "checkpoint")->required();
  ppxc_cmd->add_option("--sets", pp.sets_dir, "directory of .set.json files")->required();
  ppxc_cmd->add_option("--corpora", pp.corpora_dir, "directory of .corpus files")->required();
  ppxc_cmd->add_option("--budget", pp.budget, "token budget per cell")->capture_default_str();
  ppxc_cmd->add_option("--out", pp.out_dir, "output directory")->required();

  // finetune
  FinetuneArgs ft;
  auto* ft_cmd = app.add_subcommand("finetune", "masked-LoRA task fine-tuning");
  ft_cmd->add_option("--ckpt", ft.ckpt, "checkpoint")->required();
  ft_cmd->add_option("--config", ft.config_path, "run config JSON")->required();
  ft_cmd->add_option("--task", ft.task, "task name")->capture_default_str();
  ft_cmd->add_option("--setup", ft.setup, "none|source|target|source+target|random")
      ->capture_default_str();
  ft_cmd->add_option("--method", ft.method, "which sets to use")->capture_default_str();
  ft_cmd->add_option("--sets", ft.sets_dir, "directory of .set.json files")->required();
  ft_cmd->add_option("--source", ft.source, "source language (default from config)");
  ft_cmd->add_option("--target", ft.target, "target language");
  ft_cmd->add_option("--rank", ft.rank, "LoRA rank")->capture_default_str();
  ft_cmd->add_option("--alpha", ft.alpha, "LoRA alpha")->capture_default_str();
  ft_cmd->add_option("--steps", ft.steps, "fine-tune steps (overrides config)");
  ft_cmd->add_option("--out", ft.out, "output adapter file")->required();

  // experiment
  ExperimentArgs ex;
  auto* exp_cmd = app.add_subcommand("experiment", "run the transfer experiment grid");
  exp_cmd->add_option("--config", ex.config_path, "run config JSON")->required();
  exp_cmd->add_option("--ckpt", ex.ckpt, "checkpoint")->required();
  exp_cmd->add_option("--stats", ex.stats_path, "stats JSON")->required();
  exp_cmd->add_option("--sets-dir", ex.sets_dir, "directory of .set.json files")->required();
  exp_cmd->add_option("--out", ex.out_dir, "output directory")->required();

  // report
  ReportArgs rp;
  auto* report_cmd = app.add_subcommand("report", "emit CSV/SVG reports");
  report_cmd->add_option("--sets", rp.sets_dir, "directory of .set.json files")->required();
  report_cmd->add_option("--ppxc", rp.ppxc_path, "ppxc.csv from the ppxc command");
  report_cmd->add_option("--results", rp.results_path, "results.csv from experiment");
  report_cmd->add_option("--out", rp.out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" ||
        e.get_name() == "CallForVersion") {
      return app.exit(e);
    }
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*ingest_cmd) run_corpus_ingest(ing, cmdline);
    if (*synth_cmd) run_corpus_synth(syn, cmdline);
    if (*train_cmd) run_train_lm(tl, cmdline);
    if (*collect_cmd) {
      st.threads = threads;
      run_stats_collect(st, cmdline);
    }
    if (*lape_cmd) run_identify_lape(il, cmdline);
    if (*act_cmd) run_identify_actprob(ia, cmdline);
    if (*ident_report_cmd) run_report(ir, cmdline);
    if (*ppxc_cmd) {
      pp.threads = threads;
      run_ppxc(pp, cmdline);
    }
    if (*ft_cmd) run_finetune(ft, cmdline);
    if (*exp_cmd) {
      ex.threads = threads;
      run_experiment(ex, cmdline);
    }
    if (*report_cmd) run_report(rp, cmdline);
  } catch (const UsageError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  } catch (const ArtifactError& e) {
    std::cerr << "error: artifact: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

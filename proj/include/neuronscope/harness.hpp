#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "neuronscope/corpus.hpp"
#include "neuronscope/identify.hpp"
#include "neuronscope/intervene.hpp"
#include "neuronscope/lora.hpp"
#include "neuronscope/model.hpp"
#include "neuronscope/stats.hpp"
#include "neuronscope/tasks.hpp"

namespace neuronscope {

/// The full experiment grid: {method} x {finetune setup} x {intervention} x
/// {eval language} x {seed}, with task data regenerated per seed.
struct ExperimentConfig {
  std::vector<IdentifyMethod> methods;
  std::vector<FinetuneSetup> setups;
  std::vector<std::string> interventions;  // "noint", "mean", "p90", "zero", ...
  std::vector<uint64_t> seeds;
  LanguageCode source_language;
  std::vector<LanguageCode> eval_languages;  // targets; may include the source
  int n_train = 2000;
  int n_eval = 500;
  FinetuneConfig finetune;
  int n_threads = 1;
};

struct ExperimentRow {
  std::string method;
  std::string ftl;
  LanguageCode eval_language;
  std::string intervention;
  uint64_t seed = 0;
  double accuracy = 0.0;
  int n = 0;
};

/// Runs the grid. Deterministic: the same inputs produce byte-identical CSV.
/// `sets` maps method -> language -> NeuronSet (targets plus source).
std::vector<ExperimentRow> experiment_matrix(
    const Model& base_model, const StatsTable& stats,
    const std::map<IdentifyMethod, std::map<LanguageCode, NeuronSet>>& sets,
    const std::map<LanguageCode, SynthLanguageSpec>& language_specs,
    const ExperimentConfig& config);

// Results CSV columns: method, ftl, eval_lang, intervention, seed, accuracy, n.
std::string experiment_csv(const std::vector<ExperimentRow>& rows);
std::vector<ExperimentRow> parse_experiment_csv(const std::string& text);

}  // namespace neuronscope

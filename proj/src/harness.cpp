#include "neuronscope/harness.hpp"

#include <algorithm>
#include <sstream>

#include "neuronscope/canonical_json.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/rng.hpp"

namespace neuronscope {

namespace {
std::string ftl_label(FinetuneSetup setup, const LanguageCode& source,
                      const LanguageCode& target) {
  switch (setup) {
    case FinetuneSetup::None: return "none";
    case FinetuneSetup::SourceOnly: return source;
    case FinetuneSetup::TargetOnly: return target;
    case FinetuneSetup::SourcePlusTarget: return source + "+" + target;
    case FinetuneSetup::Random: return "rand";
  }
  return "?";
}

bool target_dependent(FinetuneSetup setup) {
  return setup == FinetuneSetup::TargetOnly || setup == FinetuneSetup::SourcePlusTarget;
}
}  // namespace

std::vector<ExperimentRow> experiment_matrix(
    const Model& base_model, const StatsTable& stats,
    const std::map<IdentifyMethod, std::map<LanguageCode, NeuronSet>>& sets,
    const std::map<LanguageCode, SynthLanguageSpec>& language_specs,
    const ExperimentConfig& config) {
  if (config.methods.empty() || config.setups.empty() || config.interventions.empty() ||
      config.seeds.empty() || config.eval_languages.empty()) {
    throw UsageError("experiment grid has an empty axis");
  }
  if (language_specs.find(config.source_language) == language_specs.end()) {
    throw ArtifactError("missing language spec for source: " + config.source_language);
  }
  for (const auto& lang : config.eval_languages) {
    if (language_specs.find(lang) == language_specs.end()) {
      throw ArtifactError("missing language spec for eval language: " + lang);
    }
  }
  for (IdentifyMethod m : config.methods) {
    auto it = sets.find(m);
    if (it == sets.end()) {
      throw ArtifactError(std::string("missing neuron sets for method: ") + method_name(m));
    }
    for (const auto& lang : config.eval_languages) {
      if (it->second.find(lang) == it->second.end()) {
        throw ArtifactError(std::string("missing neuron set: method ") + method_name(m) +
                            ", language " + lang);
      }
    }
    if (it->second.find(config.source_language) == it->second.end()) {
      throw ArtifactError(std::string("missing neuron set: method ") + method_name(m) +
                          ", language " + config.source_language);
    }
  }

  std::vector<ExperimentRow> rows;
  for (uint64_t seed : config.seeds) {
    const TaskDataset train_data = gen_classification_task(
        language_specs.at(config.source_language), config.n_train,
        derive_seed(seed, "task-train"));
    std::map<LanguageCode, TaskDataset> eval_data;
    {
      uint64_t li = 0;
      for (const auto& lang : config.eval_languages) {
        eval_data.emplace(lang, gen_classification_task(language_specs.at(lang), config.n_eval,
                                                        derive_seed(seed, "task-eval", li++)));
      }
    }

    for (IdentifyMethod method : config.methods) {
      const auto& method_sets = sets.at(method);
      for (FinetuneSetup setup : config.setups) {
        // Target-independent setups share one fine-tuned model per seed.
        std::optional<Model> shared;
        auto tune = [&](const LanguageCode& target) {
          Model tuned = base_model;
          FinetuneConfig fc = config.finetune;
          fc.setup = setup;
          const std::string tag = std::string(method_name(method)) + "/" + setup_name(setup) +
                                  "/" + target;
          fc.hyper.seed = derive_seed(seed, "ft-" + tag);
          fc.mlp_lora.seed = derive_seed(seed, "ft-mlp-" + tag);
          fc.attn_lora.seed = derive_seed(seed, "ft-attn-" + tag);
          fc.random_seed = derive_seed(seed, "ft-rand-" + tag);
          std::map<LanguageCode, NeuronSet> source_sets{
              {config.source_language, method_sets.at(config.source_language)}};
          std::map<LanguageCode, NeuronSet> target_sets;
          if (target_dependent(setup)) {
            target_sets.emplace(target, method_sets.at(target));
          }
          finetune(tuned, train_data, source_sets, target_sets, fc);
          return tuned;
        };

        for (const auto& eval_lang : config.eval_languages) {
          const Model* model = nullptr;
          Model tuned;
          if (target_dependent(setup)) {
            tuned = tune(eval_lang);
            model = &tuned;
          } else {
            if (!shared) shared = tune("-");
            model = &*shared;
          }

          for (const auto& label : config.interventions) {
            TransferResult tr;
            const bool strict = eval_lang != config.source_language;
            if (label == "noint") {
              tr = zero_shot_eval(*model, eval_data.at(eval_lang), nullptr,
                                  {config.source_language}, strict, config.n_threads);
            } else {
              const InterventionSpec spec = make_intervention(
                  method_sets.at(eval_lang), SubstitutionSource::from_label(label), stats);
              tr = zero_shot_eval(*model, eval_data.at(eval_lang), &spec,
                                  {config.source_language}, strict, config.n_threads);
            }
            ExperimentRow row;
            row.method = method_name(method);
            row.ftl = ftl_label(setup, config.source_language, eval_lang);
            row.eval_language = eval_lang;
            row.intervention = label;
            row.seed = seed;
            row.accuracy = tr.accuracy;
            row.n = tr.n_examples;
            rows.push_back(std::move(row));
          }
        }
      }
    }
  }
  return rows;
}

std::string experiment_csv(const std::vector<ExperimentRow>& rows) {
  std::ostringstream os;
  os << "method,ftl,eval_lang,intervention,seed,accuracy,n\n";
  for (const auto& r : rows) {
    os << r.method << "," << r.ftl << "," << r.eval_language << "," << r.intervention << ","
       << r.seed << "," << format_double(r.accuracy) << "," << r.n << "\n";
  }
  return os.str();
}

std::vector<ExperimentRow> parse_experiment_csv(const std::string& text) {
  std::vector<ExperimentRow> rows;
  std::istringstream is(text);
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      continue;  // header
    }
    std::istringstream ls(line);
    std::string cell;
    ExperimentRow r;
    std::getline(ls, r.method, ',');
    std::getline(ls, r.ftl, ',');
    std::getline(ls, r.eval_language, ',');
    std::getline(ls, r.intervention, ',');
    std::getline(ls, cell, ',');
    r.seed = std::stoull(cell);
    std::getline(ls, cell, ',');
    r.accuracy = std::stod(cell);
    std::getline(ls, cell, ',');
    r.n = std::stoi(cell);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace neuronscope

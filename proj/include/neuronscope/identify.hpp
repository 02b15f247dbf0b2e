#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "neuronscope/model.hpp"
#include "neuronscope/stats.hpp"

namespace neuronscope {

/// Shannon entropy (nats) of a neuron's normalized per-language
/// positive-activation probabilities. Low entropy means language-specific.
struct LapeScore {
  NeuronId neuron;
  double score = 0.0;
  std::vector<double> normalized_probs;  // aligned with the language set
  bool degenerate = false;               // all-zero activation probabilities
};

enum class IdentifyMethod { Lape, ActProb90p, Random };
const char* method_name(IdentifyMethod m);
IdentifyMethod method_from_name(const std::string& s);

/// A named set of neurons attributed to one language by one method.
struct NeuronSet {
  LanguageCode language;
  IdentifyMethod method = IdentifyMethod::Lape;
  std::vector<NeuronId> neurons;  // sorted by (layer, index), no duplicates
  nlohmann::json params;          // selection parameters / provenance

  bool contains(const NeuronId& n) const;
  void validate(const ModelConfig& config) const;
};

/// LAPE over the given language set. The result is a pure function of
/// (stats, language_set); nothing is cached across sets.
std::vector<LapeScore> lape_scores(const StatsTable& stats,
                                   const std::vector<LanguageCode>& language_set);

/// Bottom `bottom_fraction` of non-degenerate neurons by score (ties broken
/// by (layer, index) ascending; count = ceil(fraction * n)), each attributed
/// to every language whose activation probability is >= min_prob.
std::map<LanguageCode, NeuronSet> select_lape_neurons(
    const std::vector<LapeScore>& scores, const StatsTable& stats,
    const std::vector<LanguageCode>& language_set, double bottom_fraction,
    double min_prob);

/// Per-(neuron, language) relevance at percentile p: the fraction of the
/// language's per-window mean activations strictly above the neuron's pooled
/// (all-language) percentile-p value. Read from the table's relevance block.
/// Result: language -> flat neuron-indexed vector.
std::map<LanguageCode, std::vector<double>> actprob_relevance(const StatsTable& stats, int p);

/// Per language, the m highest-relevance neurons (ties by (layer, index)).
/// Every language's set has size exactly m.
std::map<LanguageCode, NeuronSet> select_topm(
    const std::map<LanguageCode, std::vector<double>>& relevance,
    const ModelConfig& config, int m, int p);

struct OverlapMatrix {
  std::vector<std::string> labels;     // "<language>" per set
  std::vector<std::vector<int64_t>> counts;  // |A_i intersect A_j|
};

OverlapMatrix overlap_matrix(const std::vector<NeuronSet>& sets);

struct LayerHistogram {
  std::vector<int64_t> counts;  // per layer 1..L
};

LayerHistogram layer_histogram(const NeuronSet& set, int n_layers);

/// Uniform per-layer sample without replacement, seeded.
NeuronSet random_neuron_set(const ModelConfig& config, uint64_t seed, int per_layer,
                            const LanguageCode& language = "rand");

// NeuronSet JSON: {"language":..., "method":..., "params":{...},
//                  "neurons":[[layer,index],...]}
void save_neuron_set(const NeuronSet& set, const std::string& path);
NeuronSet load_neuron_set(const std::string& path);

}  // namespace neuronscope

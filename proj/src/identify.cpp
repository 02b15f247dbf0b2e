#include "neuronscope/identify.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "neuronscope/canonical_json.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/io.hpp"
#include "neuronscope/rng.hpp"

namespace neuronscope {

const char* method_name(IdentifyMethod m) {
  switch (m) {
    case IdentifyMethod::Lape: return "lape";
    case IdentifyMethod::ActProb90p: return "actprob90p";
    case IdentifyMethod::Random: return "random";
  }
  return "?";
}

IdentifyMethod method_from_name(const std::string& s) {
  if (s == "lape") return IdentifyMethod::Lape;
  if (s == "actprob90p") return IdentifyMethod::ActProb90p;
  if (s == "random") return IdentifyMethod::Random;
  throw UsageError("unknown identification method: " + s);
}

bool NeuronSet::contains(const NeuronId& n) const {
  return std::binary_search(neurons.begin(), neurons.end(), n);
}

void NeuronSet::validate(const ModelConfig& config) const {
  if (language.empty()) throw UsageError("neuron set language must be non-empty");
  for (size_t i = 0; i < neurons.size(); ++i) {
    const NeuronId& n = neurons[i];
    if (n.layer < 1 || n.layer > config.n_layers || n.index < 1 || n.index > config.d_ff) {
      throw UsageError("neuron out of model bounds: layer " + std::to_string(n.layer) +
                       ", index " + std::to_string(n.index));
    }
    if (i > 0 && !(neurons[i - 1] < n)) {
      throw UsageError("neuron set must be sorted and duplicate-free");
    }
  }
}

std::vector<LapeScore> lape_scores(const StatsTable& stats,
                                   const std::vector<LanguageCode>& language_set) {
  if (language_set.size() < 2) throw UsageError("LAPE needs at least 2 languages");
  for (const auto& lang : language_set) {
    if (stats.languages.find(lang) == stats.languages.end()) {
      throw ArtifactError("language absent from stats: " + lang);
    }
  }

  const int n_layers = stats.config.n_layers;
  const int d_ff = stats.config.d_ff;
  std::vector<LapeScore> out;
  out.reserve(static_cast<size_t>(n_layers) * d_ff);
  for (int l = 1; l <= n_layers; ++l) {
    for (int j = 1; j <= d_ff; ++j) {
      LapeScore ls;
      ls.neuron = NeuronId{l, j};
      std::vector<double> probs;
      probs.reserve(language_set.size());
      double total = 0.0;
      for (const auto& lang : language_set) {
        const double p = stats.at(lang, ls.neuron).prob_positive;
        probs.push_back(p);
        total += p;
      }
      if (total <= 0.0) {
        ls.degenerate = true;
        ls.score = 0.0;
        ls.normalized_probs.assign(language_set.size(), 0.0);
      } else {
        double entropy = 0.0;
        ls.normalized_probs.resize(probs.size());
        for (size_t i = 0; i < probs.size(); ++i) {
          const double q = probs[i] / total;
          ls.normalized_probs[i] = q;
          if (q > 0.0) entropy -= q * std::log(q);  // 0 log 0 := 0
        }
        ls.score = entropy;
      }
      out.push_back(std::move(ls));
    }
  }
  return out;
}

std::map<LanguageCode, NeuronSet> select_lape_neurons(
    const std::vector<LapeScore>& scores, const StatsTable& stats,
    const std::vector<LanguageCode>& language_set, double bottom_fraction, double min_prob) {
  if (!(bottom_fraction > 0.0 && bottom_fraction <= 1.0)) {
    throw UsageError("bottom_fraction must be in (0, 1]");
  }
  if (min_prob < 0.0 || min_prob >= 1.0) throw UsageError("min_prob must be in [0, 1)");

  std::vector<const LapeScore*> candidates;
  for (const auto& s : scores) {
    if (!s.degenerate) candidates.push_back(&s);
  }
  if (candidates.empty()) throw UsageError("empty LAPE selection: all neurons degenerate");

  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const LapeScore* a, const LapeScore* b) {
                     if (a->score != b->score) return a->score < b->score;
                     return a->neuron < b->neuron;
                   });
  const size_t take = static_cast<size_t>(
      std::ceil(bottom_fraction * static_cast<double>(candidates.size())));

  nlohmann::json params;
  params["languages"] = language_set;
  params["bottom_fraction"] = bottom_fraction;
  params["min_prob"] = min_prob;

  std::map<LanguageCode, NeuronSet> out;
  for (const auto& lang : language_set) {
    NeuronSet set;
    set.language = lang;
    set.method = IdentifyMethod::Lape;
    set.params = params;
    out.emplace(lang, std::move(set));
  }
  for (size_t i = 0; i < take && i < candidates.size(); ++i) {
    const LapeScore& s = *candidates[i];
    for (const auto& lang : language_set) {
      if (stats.at(lang, s.neuron).prob_positive >= min_prob) {
        out[lang].neurons.push_back(s.neuron);
      }
    }
  }
  for (auto& [lang, set] : out) {
    std::sort(set.neurons.begin(), set.neurons.end());
  }
  return out;
}

std::map<LanguageCode, std::vector<double>> actprob_relevance(const StatsTable& stats, int p) {
  if (!stats.has_percentile(p)) {
    throw ArtifactError("percentile " + std::to_string(p) + " missing from stats table");
  }
  if (!stats.pooled) {
    throw ArtifactError("pooled statistics missing from stats table (collect all languages "
                        "in one run)");
  }
  std::map<LanguageCode, std::vector<double>> out;
  for (const auto& [lang, ls] : stats.languages) {
    auto it = ls.relevance.find(p);
    if (it == ls.relevance.end()) {
      throw ArtifactError("relevance at p=" + std::to_string(p) +
                          " missing from stats table for " + lang);
    }
    out[lang] = it->second;
  }
  return out;
}

std::map<LanguageCode, NeuronSet> select_topm(
    const std::map<LanguageCode, std::vector<double>>& relevance, const ModelConfig& config,
    int m, int p) {
  if (m < 1) throw UsageError("m must be >= 1");
  const size_t n_total = static_cast<size_t>(config.n_layers) * config.d_ff;
  if (static_cast<size_t>(m) > n_total) throw UsageError("m exceeds neuron count");

  std::map<LanguageCode, NeuronSet> out;
  for (const auto& [lang, rel] : relevance) {
    if (rel.size() != n_total) throw UsageError("relevance vector size mismatch");
    std::vector<size_t> order(n_total);
    for (size_t i = 0; i < n_total; ++i) order[i] = i;
    // Highest relevance first; ties by (layer, index) ascending == flat index.
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      if (rel[a] != rel[b]) return rel[a] > rel[b];
      return a < b;
    });
    NeuronSet set;
    set.language = lang;
    set.method = IdentifyMethod::ActProb90p;
    set.params["p"] = p;
    set.params["m"] = m;
    set.neurons.reserve(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      const size_t flat = order[static_cast<size_t>(i)];
      set.neurons.push_back(NeuronId{static_cast<int>(flat / config.d_ff) + 1,
                                     static_cast<int>(flat % config.d_ff) + 1});
    }
    std::sort(set.neurons.begin(), set.neurons.end());
    out.emplace(lang, std::move(set));
  }
  return out;
}

OverlapMatrix overlap_matrix(const std::vector<NeuronSet>& sets) {
  if (sets.size() < 2) throw UsageError("overlap matrix needs at least 2 sets");
  OverlapMatrix m;
  m.labels.reserve(sets.size());
  for (const auto& s : sets) m.labels.push_back(s.language);
  m.counts.assign(sets.size(), std::vector<int64_t>(sets.size(), 0));
  for (size_t i = 0; i < sets.size(); ++i) {
    for (size_t j = i; j < sets.size(); ++j) {
      int64_t count = 0;
      for (const auto& n : sets[i].neurons) {
        if (sets[j].contains(n)) ++count;
      }
      m.counts[i][j] = count;
      m.counts[j][i] = count;
    }
  }
  return m;
}

LayerHistogram layer_histogram(const NeuronSet& set, int n_layers) {
  LayerHistogram h;
  h.counts.assign(static_cast<size_t>(n_layers), 0);
  for (const auto& n : set.neurons) {
    if (n.layer < 1 || n.layer > n_layers) throw UsageError("neuron layer out of range");
    ++h.counts[static_cast<size_t>(n.layer - 1)];
  }
  return h;
}

NeuronSet random_neuron_set(const ModelConfig& config, uint64_t seed, int per_layer,
                            const LanguageCode& language) {
  if (per_layer < 0 || per_layer > config.d_ff) {
    throw UsageError("per_layer must be in [0, d_ff]");
  }
  NeuronSet set;
  set.language = language;
  set.method = IdentifyMethod::Random;
  set.params["seed"] = seed;
  set.params["per_layer"] = per_layer;
  for (int l = 1; l <= config.n_layers; ++l) {
    // Partial Fisher-Yates: first per_layer entries are a uniform sample
    // without replacement.
    Rng rng(derive_seed(seed, "random-set", static_cast<uint64_t>(l)));
    std::vector<int> idx(static_cast<size_t>(config.d_ff));
    for (int j = 0; j < config.d_ff; ++j) idx[static_cast<size_t>(j)] = j + 1;
    for (int k = 0; k < per_layer; ++k) {
      const int swap_with =
          k + static_cast<int>(rng.below(static_cast<uint64_t>(config.d_ff - k)));
      std::swap(idx[static_cast<size_t>(k)], idx[static_cast<size_t>(swap_with)]);
    }
    for (int k = 0; k < per_layer; ++k) set.neurons.push_back(NeuronId{l, idx[static_cast<size_t>(k)]});
  }
  std::sort(set.neurons.begin(), set.neurons.end());
  return set;
}

void save_neuron_set(const NeuronSet& set, const std::string& path) {
  nlohmann::json j;
  j["language"] = set.language;
  j["method"] = method_name(set.method);
  j["params"] = set.params;
  nlohmann::json neurons = nlohmann::json::array();
  for (const auto& n : set.neurons) neurons.push_back(nlohmann::json::array({n.layer, n.index}));
  j["neurons"] = std::move(neurons);
  const std::string body = dump_canonical(j);
  atomic_write_file(path, [&](std::ostream& os) { os << body << "\n"; });
}

NeuronSet load_neuron_set(const std::string& path) {
  const nlohmann::json j = parse_json_file(path);
  NeuronSet set;
  try {
    set.language = j.at("language").get<std::string>();
    set.method = method_from_name(j.at("method").get<std::string>());
    set.params = j.value("params", nlohmann::json::object());
    for (const auto& entry : j.at("neurons")) {
      set.neurons.push_back(NeuronId{entry.at(0).get<int>(), entry.at(1).get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("malformed neuron set " + path + ": " + e.what());
  }
  std::sort(set.neurons.begin(), set.neurons.end());
  set.neurons.erase(std::unique(set.neurons.begin(), set.neurons.end()), set.neurons.end());
  return set;
}

}  // namespace neuronscope

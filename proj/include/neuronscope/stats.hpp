#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neuronscope/corpus.hpp"
#include "neuronscope/matrix.hpp"
#include "neuronscope/model.hpp"

namespace neuronscope {

/// Empirical-CDF percentile: the ceil(p/100 * n)-th smallest value,
/// i.e. inf{x in values : CDF(x) >= p/100}. Requires non-empty input and
/// 0 < p < 100.
double percentile(std::vector<double> values, double p);

/// Finalized per-(neuron, language) statistics.
struct NeuronLangStats {
  double prob_positive = 0.0;            // fraction of token activations > 0
  double mean = 0.0;                     // per-window means averaged over windows
  std::map<int, double> percentiles;     // p -> value, over per-window means
};

/// Raw per-language collection state. Retains every per-window mean so merges
/// and percentiles stay exact; finalization sorts by window index, making the
/// result independent of shard order.
struct StatsSlice {
  std::string fingerprint;
  LanguageCode language;
  ModelConfig config;
  std::vector<uint64_t> window_indices;       // one per collected window
  std::vector<Matrix> window_means;           // per layer: (n_windows x d_ff)
  std::vector<std::vector<int64_t>> pos_counts;  // per layer: d_ff counters
  int64_t n_tokens = 0;

  size_t n_windows() const { return window_indices.size(); }
};

/// Finalized slice: complete per-neuron stats for one language.
struct LanguageStats {
  LanguageCode language;
  int64_t n_sequences = 0;
  int64_t n_tokens = 0;
  // indexed by (layer-1) * d_ff + (index-1)
  std::vector<NeuronLangStats> neurons;
  // relevance[p][neuron]: fraction of this language's per-window means
  // strictly above the pooled percentile-p value of that neuron
  std::map<int, std::vector<double>> relevance;
};

struct StatsTable {
  std::string fingerprint;
  ModelConfig config;
  std::vector<int> percentile_list;
  std::map<LanguageCode, LanguageStats> languages;
  std::optional<LanguageStats> pooled;  // all-language pooled statistics

  const NeuronLangStats& at(const LanguageCode& lang, const NeuronId& n) const;
  bool has_percentile(int p) const;
};

/// Streams model activations over a window range of one corpus (B=1 forwards,
/// so results are independent of sharding). Default range: all windows.
StatsSlice collect_slice(const Model& model, const Corpus& corpus,
                         size_t window_begin = 0,
                         size_t window_end = static_cast<size_t>(-1));

/// Feeds one window's tap into a slice. Exposed so tests can drive the
/// accumulator with synthetic activations.
void accumulate_window(StatsSlice& slice, uint64_t window_index, const ActivationTap& tap);
StatsSlice empty_slice(const Model& model, const LanguageCode& language);

/// Exact merge of two slices of the same (fingerprint, language) with
/// disjoint window sets.
StatsSlice merge_stats(const StatsSlice& a, const StatsSlice& b);

/// Finalizes raw slices into a complete StatsTable. Computes per-language
/// aggregates, the pooled (all-language) slice, and relevance-at-p for every
/// requested percentile.
StatsTable finalize_stats(const std::vector<StatsSlice>& slices,
                          const std::vector<int>& percentile_list);

/// Sequential collection over whole corpora, optionally sharded across
/// threads (bit-identical to sequential by construction).
StatsTable collect_stats(const Model& model, const std::vector<Corpus>& corpora,
                         const std::vector<int>& percentile_list, int n_threads = 1);

// Canonical JSON persistence:
// {"fingerprint":..., "config":..., "percentiles":[...],
//  "languages":{code:{"neurons":[[layer,index,prob_positive,mean,{p:value,...}],...],
//                     "n_sequences":N,"n_tokens":N,"relevance":{p:[...]}}},
//  "pooled":{...}}
void save_stats(const StatsTable& table, const std::string& path);
StatsTable load_stats(const std::string& path);

}  // namespace neuronscope

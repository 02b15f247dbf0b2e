#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neuronscope/corpus.hpp"
#include "neuronscope/identify.hpp"
#include "neuronscope/model.hpp"
#include "neuronscope/stats.hpp"

namespace neuronscope {

/// Substitution source for an intervention. Identity is a diagnostic source
/// (write back the just-computed activation); the paper-facing grid is
/// mean / percentile-p / zero.
struct SubstitutionSource {
  enum class Kind { Mean, Percentile, Zero, Identity } kind = Kind::Zero;
  int p = 0;  // percentile, when kind == Percentile

  std::string label() const;  // "mean", "p90", "zero", "identity"
  static SubstitutionSource mean() { return {Kind::Mean, 0}; }
  static SubstitutionSource pct(int p) { return {Kind::Percentile, p}; }
  static SubstitutionSource zero() { return {Kind::Zero, 0}; }
  static SubstitutionSource identity() { return {Kind::Identity, 0}; }
  static SubstitutionSource from_label(const std::string& s);
};

/// A neuron set plus resolved per-neuron substitution values, taken from the
/// TARGET language's statistics.
struct InterventionSpec {
  NeuronSet set;
  SubstitutionSource source;
  std::vector<double> values;  // one per neuron in set (ignored for Identity)

  Intervention compile() const;  // model-level view
};

/// Resolves substitution values for every neuron in `set` from that
/// language's stats (mean field, percentile field, or 0).
InterventionSpec make_intervention(const NeuronSet& set, const SubstitutionSource& source,
                                   const StatsTable& stats);

/// PPXC(i,j) = PPX(j | zero-intervention at language i's set) - PPX(j),
/// both over the same token budget.
struct PpxcMatrix {
  std::vector<LanguageCode> languages;
  std::vector<double> baseline;            // PPX(j)
  std::vector<std::vector<double>> entries;  // [i][j]
  size_t token_budget = 0;

  double mean_diagonal() const;
  double mean_off_diagonal() const;
};

PpxcMatrix ppxc_matrix(const Model& model, const std::map<LanguageCode, NeuronSet>& sets,
                       const std::map<LanguageCode, Corpus>& corpora, size_t token_budget,
                       int n_threads = 1);

/// CSV with a header row/column of language codes; cell (i,j) = PPXC(i,j).
void save_ppxc_csv(const PpxcMatrix& m, const std::string& path);
PpxcMatrix load_ppxc_csv(const std::string& path);

}  // namespace neuronscope

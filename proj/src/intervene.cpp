#include "neuronscope/intervene.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "neuronscope/canonical_json.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/io.hpp"
#include "neuronscope/threads.hpp"

namespace neuronscope {

std::string SubstitutionSource::label() const {
  switch (kind) {
    case Kind::Mean: return "mean";
    case Kind::Percentile: return "p" + std::to_string(p);
    case Kind::Zero: return "zero";
    case Kind::Identity: return "identity";
  }
  return "?";
}

SubstitutionSource SubstitutionSource::from_label(const std::string& s) {
  if (s == "mean") return mean();
  if (s == "zero") return zero();
  if (s == "identity") return identity();
  if (s.size() > 1 && s[0] == 'p') {
    try {
      return pct(std::stoi(s.substr(1)));
    } catch (const std::exception&) {
    }
  }
  throw UsageError("unknown substitution source: " + s);
}

Intervention InterventionSpec::compile() const {
  Intervention iv;
  iv.identity = source.kind == SubstitutionSource::Kind::Identity;
  iv.values.reserve(set.neurons.size());
  for (size_t i = 0; i < set.neurons.size(); ++i) {
    iv.values.emplace_back(set.neurons[i], iv.identity ? 0.0 : values.at(i));
  }
  return iv;
}

InterventionSpec make_intervention(const NeuronSet& set, const SubstitutionSource& source,
                                   const StatsTable& stats) {
  InterventionSpec spec;
  spec.set = set;
  spec.source = source;
  spec.values.reserve(set.neurons.size());
  if (source.kind != SubstitutionSource::Kind::Identity &&
      source.kind != SubstitutionSource::Kind::Zero) {
    if (stats.languages.find(set.language) == stats.languages.end()) {
      throw ArtifactError("stats do not cover intervention language: " + set.language);
    }
  }
  for (const auto& n : set.neurons) {
    double v = 0.0;
    switch (source.kind) {
      case SubstitutionSource::Kind::Zero:
      case SubstitutionSource::Kind::Identity:
        v = 0.0;
        break;
      case SubstitutionSource::Kind::Mean:
        v = stats.at(set.language, n).mean;
        break;
      case SubstitutionSource::Kind::Percentile: {
        const auto& pct = stats.at(set.language, n).percentiles;
        auto it = pct.find(source.p);
        if (it == pct.end()) {
          throw ArtifactError("percentile " + std::to_string(source.p) +
                              " missing from stats for " + set.language);
        }
        v = it->second;
        break;
      }
    }
    if (!std::isfinite(v)) throw NumericError("non-finite substitution value");
    spec.values.push_back(v);
  }
  return spec;
}

double PpxcMatrix::mean_diagonal() const {
  double s = 0.0;
  for (size_t i = 0; i < languages.size(); ++i) s += entries[i][i];
  return s / static_cast<double>(languages.size());
}

double PpxcMatrix::mean_off_diagonal() const {
  double s = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < languages.size(); ++i) {
    for (size_t j = 0; j < languages.size(); ++j) {
      if (i == j) continue;
      s += entries[i][j];
      ++n;
    }
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

PpxcMatrix ppxc_matrix(const Model& model, const std::map<LanguageCode, NeuronSet>& sets,
                       const std::map<LanguageCode, Corpus>& corpora, size_t token_budget,
                       int n_threads) {
  if (sets.size() != corpora.size()) {
    throw UsageError("PPXC: sets and corpora must cover the same language list");
  }
  for (const auto& [lang, set] : sets) {
    if (corpora.find(lang) == corpora.end()) {
      throw UsageError("PPXC: no corpus for language " + lang);
    }
  }
  const size_t windows_per_lang = token_budget / static_cast<size_t>(model.config.t_max);
  if (windows_per_lang == 0) throw UsageError("PPXC token budget smaller than one window");

  PpxcMatrix m;
  for (const auto& [lang, set] : sets) m.languages.push_back(lang);
  const size_t k = m.languages.size();
  m.token_budget = token_budget;
  m.baseline.assign(k, 0.0);
  m.entries.assign(k, std::vector<double>(k, 0.0));

  // Zero-substitution interventions, one per source language; the Fig-style
  // definition fixes the substitution to 0.
  std::vector<Intervention> interventions(k);
  for (size_t i = 0; i < k; ++i) {
    const NeuronSet& set = sets.at(m.languages[i]);
    set.validate(model.config);
    InterventionSpec spec;
    spec.set = set;
    spec.source = SubstitutionSource::zero();
    spec.values.assign(set.neurons.size(), 0.0);
    interventions[i] = spec.compile();
  }

  // Cells are independent; job 0..k-1 are baselines, then k*k intervened cells.
  std::vector<double> cells(k + k * k, 0.0);
  parallel_for(k + k * k, n_threads, [&](size_t job) {
    if (job < k) {
      cells[job] = perplexity(model, corpora.at(m.languages[job]), nullptr, windows_per_lang);
    } else {
      const size_t i = (job - k) / k;
      const size_t j = (job - k) % k;
      cells[job] =
          perplexity(model, corpora.at(m.languages[j]), &interventions[i], windows_per_lang);
    }
  });

  for (size_t j = 0; j < k; ++j) m.baseline[j] = cells[j];
  for (size_t i = 0; i < k; ++i) {
    for (size_t j = 0; j < k; ++j) {
      // Empty set: identical forwards, so the delta is exactly zero.
      m.entries[i][j] = cells[k + i * k + j] - m.baseline[j];
    }
  }
  return m;
}

void save_ppxc_csv(const PpxcMatrix& m, const std::string& path) {
  atomic_write_file(path, [&](std::ostream& os) {
    os << "ppxc";
    for (const auto& lang : m.languages) os << "," << lang;
    os << "\n";
    for (size_t i = 0; i < m.languages.size(); ++i) {
      os << m.languages[i];
      for (size_t j = 0; j < m.languages.size(); ++j) {
        os << "," << format_double(m.entries[i][j]);
      }
      os << "\n";
    }
    os << "baseline";
    for (size_t j = 0; j < m.languages.size(); ++j) {
      os << "," << format_double(m.baseline[j]);
    }
    os << "\n";
  });
}

PpxcMatrix load_ppxc_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ArtifactError("missing PPXC file: " + path);
  PpxcMatrix m;
  std::string line;
  if (!std::getline(f, line)) throw ArtifactError("empty PPXC file: " + path);
  {
    std::stringstream ss(line);
    std::string cell;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      if (!first) m.languages.push_back(cell);
      first = false;
    }
  }
  const size_t k = m.languages.size();
  if (k == 0) throw ArtifactError("PPXC header has no languages: " + path);
  m.entries.assign(k, std::vector<double>(k, 0.0));
  m.baseline.assign(k, 0.0);
  size_t row = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    const bool is_baseline = cell == "baseline";
    size_t col = 0;
    while (std::getline(ss, cell, ',') && col < k) {
      const double v = std::stod(cell);
      if (is_baseline) {
        m.baseline[col] = v;
      } else {
        if (row >= k) throw ArtifactError("too many PPXC rows in " + path);
        m.entries[row][col] = v;
      }
      ++col;
    }
    if (!is_baseline) ++row;
  }
  if (row != k) throw ArtifactError("PPXC row count mismatch in " + path);
  return m;
}

}  // namespace neuronscope

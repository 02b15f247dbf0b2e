#include "neuronscope/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "neuronscope/canonical_json.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/io.hpp"
#include "neuronscope/threads.hpp"

namespace neuronscope {

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw UsageError("percentile of empty multiset");
  if (!(p > 0.0 && p < 100.0)) throw UsageError("percentile p must be in (0, 100)");
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  size_t k = static_cast<size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
  if (k < 1) k = 1;
  if (k > n) k = n;
  return values[k - 1];
}

const NeuronLangStats& StatsTable::at(const LanguageCode& lang, const NeuronId& n) const {
  auto it = languages.find(lang);
  if (it == languages.end()) throw ArtifactError("language absent from stats: " + lang);
  const size_t idx =
      static_cast<size_t>(n.layer - 1) * config.d_ff + static_cast<size_t>(n.index - 1);
  if (n.layer < 1 || n.layer > config.n_layers || n.index < 1 || n.index > config.d_ff) {
    throw UsageError("neuron out of bounds for stats table");
  }
  return it->second.neurons[idx];
}

bool StatsTable::has_percentile(int p) const {
  return std::find(percentile_list.begin(), percentile_list.end(), p) != percentile_list.end();
}

StatsSlice empty_slice(const Model& model, const LanguageCode& language) {
  StatsSlice s;
  s.fingerprint = model.fingerprint();
  s.language = language;
  s.config = model.config;
  s.window_means.assign(static_cast<size_t>(model.config.n_layers), Matrix(0, model.config.d_ff));
  s.pos_counts.assign(static_cast<size_t>(model.config.n_layers),
                      std::vector<int64_t>(static_cast<size_t>(model.config.d_ff), 0));
  return s;
}

void accumulate_window(StatsSlice& slice, uint64_t window_index, const ActivationTap& tap) {
  const int n_layers = slice.config.n_layers;
  const int d_ff = slice.config.d_ff;
  if (tap.layers.size() != static_cast<size_t>(n_layers)) {
    throw UsageError("tap layer count does not match config");
  }
  slice.window_indices.push_back(window_index);
  for (int l = 0; l < n_layers; ++l) {
    const Matrix& act = tap.layers[static_cast<size_t>(l)];
    if (act.cols() != d_ff) throw UsageError("tap width does not match d_ff");
    if (!act.allFinite()) throw NumericError("non-finite activation in tap");
    Matrix& means = slice.window_means[static_cast<size_t>(l)];
    means.conservativeResize(means.rows() + 1, d_ff);
    means.row(means.rows() - 1) = act.colwise().mean();
    auto& pos = slice.pos_counts[static_cast<size_t>(l)];
    for (Eigen::Index j = 0; j < act.cols(); ++j) {
      pos[static_cast<size_t>(j)] += (act.col(j).array() > 0.0).count();
    }
  }
  slice.n_tokens += tap.layers[0].rows();
}

StatsSlice collect_slice(const Model& model, const Corpus& corpus, size_t window_begin,
                         size_t window_end) {
  const auto windows = windows_of(corpus, model.config.t_max);
  if (windows.empty()) throw UsageError("empty corpus for stats collection");
  window_end = std::min(window_end, windows.size());
  StatsSlice slice = empty_slice(model, corpus.language);
  ForwardOptions opts;
  opts.want_tap = true;
  opts.want_lm_logits = false;
  for (size_t w = window_begin; w < window_end; ++w) {
    const ForwardResult fr = model.forward(windows[w], opts);
    accumulate_window(slice, w, fr.tap);
  }
  return slice;
}

StatsSlice merge_stats(const StatsSlice& a, const StatsSlice& b) {
  if (a.fingerprint != b.fingerprint) {
    throw ArtifactError("stats merge: fingerprint mismatch (" + a.fingerprint + " vs " +
                        b.fingerprint + ")");
  }
  if (a.language != b.language) {
    throw ArtifactError("stats merge: language mismatch (" + a.language + " vs " + b.language +
                        ")");
  }
  for (uint64_t wa : a.window_indices) {
    for (uint64_t wb : b.window_indices) {
      if (wa == wb) throw UsageError("stats merge: overlapping window sets");
    }
  }
  StatsSlice out = a;
  out.window_indices.insert(out.window_indices.end(), b.window_indices.begin(),
                            b.window_indices.end());
  for (size_t l = 0; l < out.window_means.size(); ++l) {
    const Eigen::Index ra = a.window_means[l].rows();
    const Eigen::Index rb = b.window_means[l].rows();
    Matrix merged(ra + rb, a.window_means[l].cols());
    merged.topRows(ra) = a.window_means[l];
    merged.bottomRows(rb) = b.window_means[l];
    out.window_means[l] = std::move(merged);
    for (size_t j = 0; j < out.pos_counts[l].size(); ++j) {
      out.pos_counts[l][j] += b.pos_counts[l][j];
    }
  }
  out.n_tokens += b.n_tokens;
  return out;
}

namespace {

/// Rows of `means` reordered so window indices ascend. Finalization always
/// walks windows in this canonical order, making results independent of how
/// the collection was sharded.
Matrix canonical_rows(const Matrix& means, const std::vector<uint64_t>& window_indices) {
  std::vector<size_t> order(window_indices.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t x, size_t y) { return window_indices[x] < window_indices[y]; });
  Matrix out(means.rows(), means.cols());
  for (size_t r = 0; r < order.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = means.row(static_cast<Eigen::Index>(order[r]));
  }
  return out;
}

LanguageStats finalize_language(const StatsSlice& slice, const std::vector<int>& plist) {
  const int n_layers = slice.config.n_layers;
  const int d_ff = slice.config.d_ff;
  LanguageStats out;
  out.language = slice.language;
  out.n_sequences = static_cast<int64_t>(slice.n_windows());
  out.n_tokens = slice.n_tokens;
  out.neurons.resize(static_cast<size_t>(n_layers) * d_ff);

  for (int l = 0; l < n_layers; ++l) {
    const Matrix means = canonical_rows(slice.window_means[static_cast<size_t>(l)],
                                        slice.window_indices);
    const Eigen::Index n_win = means.rows();
    for (int j = 0; j < d_ff; ++j) {
      NeuronLangStats& ns = out.neurons[static_cast<size_t>(l) * d_ff + j];
      double sum = 0.0;
      for (Eigen::Index w = 0; w < n_win; ++w) sum += means(w, j);
      ns.mean = sum / static_cast<double>(n_win);
      ns.prob_positive = static_cast<double>(slice.pos_counts[static_cast<size_t>(l)]
                                                             [static_cast<size_t>(j)]) /
                         static_cast<double>(slice.n_tokens);
      std::vector<double> vals(static_cast<size_t>(n_win));
      for (Eigen::Index w = 0; w < n_win; ++w) vals[static_cast<size_t>(w)] = means(w, j);
      for (int p : plist) ns.percentiles[p] = percentile(vals, p);
    }
  }
  return out;
}

}  // namespace

StatsTable finalize_stats(const std::vector<StatsSlice>& slices,
                          const std::vector<int>& percentile_list) {
  if (slices.empty()) throw UsageError("finalize_stats needs at least one slice");
  for (int p : percentile_list) {
    if (p <= 0 || p >= 100) throw UsageError("percentiles must be integers in (0, 100)");
  }

  // Group by language, preserving distinctness.
  std::map<LanguageCode, StatsSlice> merged;
  for (const auto& s : slices) {
    if (s.n_windows() == 0) throw UsageError("empty stats slice for " + s.language);
    auto it = merged.find(s.language);
    if (it == merged.end()) {
      merged.emplace(s.language, s);
    } else {
      it->second = merge_stats(it->second, s);
    }
  }

  StatsTable table;
  table.fingerprint = slices.front().fingerprint;
  table.config = slices.front().config;
  table.percentile_list = percentile_list;
  for (const auto& [lang, slice] : merged) {
    table.languages[lang] = finalize_language(slice, percentile_list);
  }

  // Pooled statistics: all languages' windows concatenated in (language,
  // window-index) canonical order.
  if (!merged.empty()) {
    const int n_layers = table.config.n_layers;
    const int d_ff = table.config.d_ff;
    LanguageStats pooled;
    pooled.language = "__pooled__";
    std::vector<Matrix> pooled_means(static_cast<size_t>(n_layers));
    int64_t total_tokens = 0, total_windows = 0;
    std::vector<std::vector<int64_t>> pos(static_cast<size_t>(n_layers),
                                          std::vector<int64_t>(static_cast<size_t>(d_ff), 0));
    for (int l = 0; l < n_layers; ++l) {
      Eigen::Index rows = 0;
      for (const auto& [lang, slice] : merged) rows += slice.window_means[l].rows();
      pooled_means[l].resize(rows, d_ff);
      Eigen::Index at = 0;
      for (const auto& [lang, slice] : merged) {
        const Matrix canon = canonical_rows(slice.window_means[l], slice.window_indices);
        pooled_means[l].middleRows(at, canon.rows()) = canon;
        at += canon.rows();
        if (l == 0) {
          total_tokens += slice.n_tokens;
          total_windows += static_cast<int64_t>(slice.n_windows());
        }
        for (int j = 0; j < d_ff; ++j) pos[l][static_cast<size_t>(j)] += slice.pos_counts[l][j];
      }
    }
    pooled.n_sequences = total_windows;
    pooled.n_tokens = total_tokens;
    pooled.neurons.resize(static_cast<size_t>(n_layers) * d_ff);
    for (int l = 0; l < n_layers; ++l) {
      for (int j = 0; j < d_ff; ++j) {
        NeuronLangStats& ns = pooled.neurons[static_cast<size_t>(l) * d_ff + j];
        const auto col = pooled_means[l].col(j);
        ns.mean = col.mean();
        ns.prob_positive =
            static_cast<double>(pos[l][static_cast<size_t>(j)]) / static_cast<double>(total_tokens);
        std::vector<double> vals(static_cast<size_t>(col.size()));
        for (Eigen::Index w = 0; w < col.size(); ++w) vals[static_cast<size_t>(w)] = col(w);
        for (int p : percentile_list) ns.percentiles[p] = percentile(vals, p);
      }
    }

    // Relevance: fraction of each language's per-window means strictly above
    // the pooled percentile (the neuron's all-language reference).
    for (auto& [lang, lstats] : table.languages) {
      const StatsSlice& slice = merged.at(lang);
      for (int p : percentile_list) {
        std::vector<double>& rel = lstats.relevance[p];
        rel.assign(static_cast<size_t>(n_layers) * d_ff, 0.0);
        for (int l = 0; l < n_layers; ++l) {
          for (int j = 0; j < d_ff; ++j) {
            const double ref =
                pooled.neurons[static_cast<size_t>(l) * d_ff + j].percentiles.at(p);
            const auto col = slice.window_means[l].col(j);
            const Eigen::Index above = (col.array() > ref).count();
            rel[static_cast<size_t>(l) * d_ff + j] =
                static_cast<double>(above) / static_cast<double>(col.size());
          }
        }
      }
    }
    table.pooled = std::move(pooled);
  }
  return table;
}

StatsTable collect_stats(const Model& model, const std::vector<Corpus>& corpora,
                         const std::vector<int>& percentile_list, int n_threads) {
  if (corpora.empty()) throw UsageError("collect_stats needs at least one corpus");
  {
    std::map<LanguageCode, int> seen;
    for (const auto& c : corpora) {
      if (++seen[c.language] > 1) {
        throw UsageError("duplicate language in stats collection: " + c.language);
      }
    }
  }

  // Shard each corpus into contiguous window ranges; merging is exact, so the
  // result is bit-identical to a sequential pass.
  struct Job {
    size_t corpus;
    size_t begin, end;
  };
  std::vector<Job> jobs;
  for (size_t ci = 0; ci < corpora.size(); ++ci) {
    const size_t n_win = window_count(corpora[ci], model.config.t_max);
    if (n_win == 0) throw UsageError("corpus shorter than context: " + corpora[ci].language);
    const size_t shards = std::min<size_t>(std::max(1, n_threads), n_win);
    for (size_t s = 0; s < shards; ++s) {
      const size_t b = n_win * s / shards;
      const size_t e = n_win * (s + 1) / shards;
      if (b < e) jobs.push_back({ci, b, e});
    }
  }

  std::vector<StatsSlice> shards(jobs.size());
  parallel_for(jobs.size(), n_threads, [&](size_t i) {
    shards[i] = collect_slice(model, corpora[jobs[i].corpus], jobs[i].begin, jobs[i].end);
  });
  return finalize_stats(shards, percentile_list);
}

// --- persistence ------------------------------------------------------------

namespace {
nlohmann::json language_to_json(const LanguageStats& ls, const ModelConfig& cfg) {
  nlohmann::json neurons = nlohmann::json::array();
  for (int l = 1; l <= cfg.n_layers; ++l) {
    for (int j = 1; j <= cfg.d_ff; ++j) {
      const NeuronLangStats& ns =
          ls.neurons[static_cast<size_t>(l - 1) * cfg.d_ff + static_cast<size_t>(j - 1)];
      nlohmann::json pct = nlohmann::json::object();
      for (const auto& [p, v] : ns.percentiles) pct[std::to_string(p)] = v;
      neurons.push_back(nlohmann::json::array({l, j, ns.prob_positive, ns.mean, pct}));
    }
  }
  nlohmann::json j;
  j["neurons"] = std::move(neurons);
  j["n_sequences"] = ls.n_sequences;
  j["n_tokens"] = ls.n_tokens;
  if (!ls.relevance.empty()) {
    nlohmann::json rel = nlohmann::json::object();
    for (const auto& [p, vals] : ls.relevance) rel[std::to_string(p)] = vals;
    j["relevance"] = std::move(rel);
  }
  return j;
}

LanguageStats language_from_json(const nlohmann::json& j, const LanguageCode& lang,
                                 const ModelConfig& cfg) {
  LanguageStats ls;
  ls.language = lang;
  ls.n_sequences = j.at("n_sequences").get<int64_t>();
  ls.n_tokens = j.at("n_tokens").get<int64_t>();
  ls.neurons.resize(static_cast<size_t>(cfg.n_layers) * cfg.d_ff);
  for (const auto& entry : j.at("neurons")) {
    const int l = entry.at(0).get<int>();
    const int idx = entry.at(1).get<int>();
    if (l < 1 || l > cfg.n_layers || idx < 1 || idx > cfg.d_ff) {
      throw ArtifactError("stats neuron out of bounds");
    }
    NeuronLangStats& ns =
        ls.neurons[static_cast<size_t>(l - 1) * cfg.d_ff + static_cast<size_t>(idx - 1)];
    ns.prob_positive = entry.at(2).get<double>();
    ns.mean = entry.at(3).get<double>();
    for (auto it = entry.at(4).begin(); it != entry.at(4).end(); ++it) {
      ns.percentiles[std::stoi(it.key())] = it.value().get<double>();
    }
  }
  if (j.contains("relevance")) {
    for (auto it = j["relevance"].begin(); it != j["relevance"].end(); ++it) {
      ls.relevance[std::stoi(it.key())] = it.value().get<std::vector<double>>();
    }
  }
  return ls;
}
}  // namespace

void save_stats(const StatsTable& table, const std::string& path) {
  nlohmann::json j;
  j["fingerprint"] = table.fingerprint;
  j["config"] = table.config.to_json();
  j["percentiles"] = table.percentile_list;
  nlohmann::json langs = nlohmann::json::object();
  for (const auto& [code, ls] : table.languages) {
    langs[code] = language_to_json(ls, table.config);
  }
  j["languages"] = std::move(langs);
  if (table.pooled) j["pooled"] = language_to_json(*table.pooled, table.config);
  const std::string body = dump_canonical(j);
  atomic_write_file(path, [&](std::ostream& os) { os << body << "\n"; });
}

StatsTable load_stats(const std::string& path) {
  const nlohmann::json j = parse_json_file(path);
  StatsTable table;
  try {
    table.fingerprint = j.at("fingerprint").get<std::string>();
    table.config = ModelConfig::from_json(j.at("config"));
    table.percentile_list = j.at("percentiles").get<std::vector<int>>();
    for (auto it = j.at("languages").begin(); it != j.at("languages").end(); ++it) {
      table.languages[it.key()] = language_from_json(it.value(), it.key(), table.config);
    }
    if (j.contains("pooled")) {
      table.pooled = language_from_json(j["pooled"], "__pooled__", table.config);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("malformed stats table " + path + ": " + e.what());
  }
  return table;
}

}  // namespace neuronscope

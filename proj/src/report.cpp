#include "neuronscope/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include "neuronscope/canonical_json.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/io.hpp"

namespace fs = std::filesystem;

namespace neuronscope {

namespace {
std::string shade(double t) {
  // Monotone: larger value, darker cell.
  const int c = static_cast<int>(std::lround(245.0 - 205.0 * t));
  std::ostringstream os;
  os << "rgb(" << c << "," << c << "," << c << ")";
  return os.str();
}

std::string short_value(double v) {
  char buf[32];
  if (v == 0.0 || (std::fabs(v) >= 0.01 && std::fabs(v) < 10000.0)) {
    std::snprintf(buf, sizeof(buf), "%.3g", v);
  } else {
    std::snprintf(buf, sizeof(buf), "%.2e", v);
  }
  return buf;
}
}  // namespace

std::string svg_heatmap(const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels,
                        const std::vector<std::vector<double>>& values,
                        const std::string& title) {
  if (values.size() != row_labels.size()) throw UsageError("heatmap row mismatch");
  const int cell = 56, left = 110, top = 56;
  const int width = left + cell * static_cast<int>(col_labels.size()) + 20;
  const int height = top + cell * static_cast<int>(row_labels.size()) + 20;

  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (const auto& row : values) {
    if (row.size() != col_labels.size()) throw UsageError("heatmap col mismatch");
    for (double v : row) {
      if (first || v < lo) lo = first ? v : std::min(lo, v);
      if (first || v > hi) hi = first ? v : std::max(hi, v);
      first = false;
    }
  }
  const double span = hi > lo ? hi - lo : 1.0;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\">\n";
  os << "<text x=\"8\" y=\"20\" font-family=\"monospace\" font-size=\"14\">" << title
     << "</text>\n";
  for (size_t j = 0; j < col_labels.size(); ++j) {
    os << "<text x=\"" << left + cell * j + cell / 2 << "\" y=\"" << top - 8
       << "\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">"
       << col_labels[j] << "</text>\n";
  }
  for (size_t i = 0; i < row_labels.size(); ++i) {
    os << "<text x=\"" << left - 8 << "\" y=\"" << top + cell * i + cell / 2 + 4
       << "\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">" << row_labels[i]
       << "</text>\n";
    for (size_t j = 0; j < col_labels.size(); ++j) {
      const double t = (values[i][j] - lo) / span;
      os << "<rect x=\"" << left + cell * j << "\" y=\"" << top + cell * i << "\" width=\""
         << cell << "\" height=\"" << cell << "\" fill=\"" << shade(t)
         << "\" stroke=\"white\"/>\n";
      os << "<text x=\"" << left + cell * j + cell / 2 << "\" y=\""
         << top + cell * i + cell / 2 + 4
         << "\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\" fill=\""
         << (t > 0.55 ? "white" : "black") << "\">" << short_value(values[i][j])
         << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_bar_chart(const std::vector<std::string>& labels,
                          const std::vector<double>& values, const std::string& title) {
  if (labels.size() != values.size()) throw UsageError("bar chart size mismatch");
  const int bar_w = 48, gap = 16, left = 50, top = 48, plot_h = 200;
  const int width = left + static_cast<int>(labels.size()) * (bar_w + gap) + 20;
  const int height = top + plot_h + 40;
  const double hi = std::max(1.0, *std::max_element(values.begin(), values.end()));

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\">\n";
  os << "<text x=\"8\" y=\"20\" font-family=\"monospace\" font-size=\"14\">" << title
     << "</text>\n";
  for (size_t i = 0; i < labels.size(); ++i) {
    const int h = static_cast<int>(std::lround(plot_h * values[i] / hi));
    const int x = left + static_cast<int>(i) * (bar_w + gap);
    os << "<rect x=\"" << x << "\" y=\"" << top + plot_h - h << "\" width=\"" << bar_w
       << "\" height=\"" << h << "\" fill=\"rgb(70,70,70)\"/>\n";
    os << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << top + plot_h - h - 6
       << "\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">"
       << short_value(values[i]) << "</text>\n";
    os << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << top + plot_h + 16
       << "\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">" << labels[i]
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string neuron_count_csv(const std::vector<NeuronSet>& sets) {
  std::ostringstream os;
  os << "language,method,count\n";
  for (const auto& s : sets) {
    os << s.language << "," << method_name(s.method) << "," << s.neurons.size() << "\n";
  }
  return os.str();
}

std::string overlap_csv(const OverlapMatrix& m) {
  std::ostringstream os;
  os << "overlap";
  for (const auto& l : m.labels) os << "," << l;
  os << "\n";
  for (size_t i = 0; i < m.labels.size(); ++i) {
    os << m.labels[i];
    for (size_t j = 0; j < m.labels.size(); ++j) os << "," << m.counts[i][j];
    os << "\n";
  }
  return os.str();
}

std::string layer_histogram_csv(const std::vector<NeuronSet>& sets, int n_layers) {
  std::ostringstream os;
  os << "language,method";
  for (int l = 1; l <= n_layers; ++l) os << ",layer" << l;
  os << "\n";
  for (const auto& s : sets) {
    const LayerHistogram h = layer_histogram(s, n_layers);
    os << s.language << "," << method_name(s.method);
    for (int64_t c : h.counts) os << "," << c;
    os << "\n";
  }
  return os.str();
}

std::string experiment_summary_csv(const std::vector<ExperimentRow>& rows) {
  struct Agg {
    double sum = 0.0, lo = 1.0, hi = 0.0;
    int n_seeds = 0;
    int n = 0;
  };
  // Keyed by grid cell; first-seen order preserved for output.
  std::map<std::string, Agg> agg;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    const std::string key = r.method + "," + r.ftl + "," + r.eval_language + "," + r.intervention;
    auto it = agg.find(key);
    if (it == agg.end()) {
      it = agg.emplace(key, Agg{}).first;
      order.push_back(key);
    }
    it->second.sum += r.accuracy;
    it->second.lo = std::min(it->second.lo, r.accuracy);
    it->second.hi = std::max(it->second.hi, r.accuracy);
    it->second.n_seeds += 1;
    it->second.n = r.n;
  }
  std::ostringstream os;
  os << "method,ftl,eval_lang,intervention,mean_accuracy,min_accuracy,max_accuracy,n_seeds,n\n";
  for (const auto& key : order) {
    const Agg& a = agg.at(key);
    os << key << "," << format_double(a.sum / a.n_seeds) << "," << format_double(a.lo) << ","
       << format_double(a.hi) << "," << a.n_seeds << "," << a.n << "\n";
  }
  return os.str();
}

std::vector<std::string> emit_report(const ReportInputs& inputs, const std::string& out_dir,
                                     uint64_t seed, const std::string& command) {
  if (inputs.sets.empty()) throw ArtifactError("no neuron sets to report on");
  if (inputs.n_layers < 1) throw UsageError("report needs the layer count");
  fs::create_directories(out_dir);

  std::vector<std::string> written;
  auto emit_file = [&](const std::string& name, const std::string& body) {
    const std::string path = (fs::path(out_dir) / name).string();
    atomic_write_file(path, [&](std::ostream& os) { os << body; });
    ArtifactMeta meta;
    meta.seed = seed;
    meta.command = command;
    write_meta(path, meta);
    written.push_back(path);
  };

  emit_file("neuron_counts.csv", neuron_count_csv(inputs.sets));
  {
    std::vector<std::string> labels;
    std::vector<double> counts;
    for (const auto& s : inputs.sets) {
      labels.push_back(s.language + ":" + method_name(s.method));
      counts.push_back(static_cast<double>(s.neurons.size()));
    }
    emit_file("neuron_counts.svg", svg_bar_chart(labels, counts, "neurons per language"));
  }

  // Overlaps per method (needs at least two sets of that method).
  std::map<std::string, std::vector<NeuronSet>> by_method;
  for (const auto& s : inputs.sets) by_method[method_name(s.method)].push_back(s);
  for (const auto& [method, sets] : by_method) {
    if (sets.size() < 2) continue;
    const OverlapMatrix m = overlap_matrix(sets);
    emit_file("overlap_" + method + ".csv", overlap_csv(m));
    std::vector<std::vector<double>> vals(m.labels.size(),
                                          std::vector<double>(m.labels.size(), 0.0));
    for (size_t i = 0; i < m.labels.size(); ++i) {
      for (size_t j = 0; j < m.labels.size(); ++j) {
        vals[i][j] = static_cast<double>(m.counts[i][j]);
      }
    }
    emit_file("overlap_" + method + ".svg",
              svg_heatmap(m.labels, m.labels, vals, "neuron overlap (" + method + ")"));
  }

  emit_file("layer_histogram.csv", layer_histogram_csv(inputs.sets, inputs.n_layers));
  {
    std::vector<std::string> rows_l, cols_l;
    std::vector<std::vector<double>> vals;
    for (const auto& s : inputs.sets) {
      rows_l.push_back(s.language + ":" + method_name(s.method));
      const LayerHistogram h = layer_histogram(s, inputs.n_layers);
      std::vector<double> row;
      for (int64_t c : h.counts) row.push_back(static_cast<double>(c));
      vals.push_back(std::move(row));
    }
    for (int l = 1; l <= inputs.n_layers; ++l) cols_l.push_back("L" + std::to_string(l));
    emit_file("layer_histogram.svg",
              svg_heatmap(rows_l, cols_l, vals, "layer-wise neuron distribution"));
  }

  if (inputs.ppxc) {
    std::vector<std::vector<double>> vals = inputs.ppxc->entries;
    emit_file("ppxc_heatmap.svg", svg_heatmap(inputs.ppxc->languages, inputs.ppxc->languages,
                                              vals, "perplexity change (zero intervention)"));
  }
  if (inputs.results) {
    emit_file("experiment_summary.csv", experiment_summary_csv(*inputs.results));
  }
  return written;
}

}  // namespace neuronscope

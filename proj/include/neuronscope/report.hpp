#pragma once

#include <string>
#include <vector>

#include "neuronscope/harness.hpp"
#include "neuronscope/identify.hpp"
#include "neuronscope/intervene.hpp"

namespace neuronscope {

/// Hand-emitted SVG heatmap: a rect grid with monotone shading (higher value,
/// darker cell) plus row/column labels and per-cell values.
std::string svg_heatmap(const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels,
                        const std::vector<std::vector<double>>& values,
                        const std::string& title);

std::string svg_bar_chart(const std::vector<std::string>& labels,
                          const std::vector<double>& values, const std::string& title);

std::string neuron_count_csv(const std::vector<NeuronSet>& sets);
std::string overlap_csv(const OverlapMatrix& m);
std::string layer_histogram_csv(const std::vector<NeuronSet>& sets, int n_layers);

/// mean / min / max accuracy per grid cell across seeds.
std::string experiment_summary_csv(const std::vector<ExperimentRow>& rows);

struct ReportInputs {
  std::vector<NeuronSet> sets;
  const PpxcMatrix* ppxc = nullptr;            // optional
  const std::vector<ExperimentRow>* results = nullptr;  // optional
  int n_layers = 0;
};

/// Writes the report files (counts CSV, overlap CSV+SVG, layer histogram
/// CSV+SVG, PPXC heatmap, experiment summary) into out_dir.
/// Returns the list of files written.
std::vector<std::string> emit_report(const ReportInputs& inputs, const std::string& out_dir,
                                     uint64_t seed, const std::string& command);

}  // namespace neuronscope

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "neuronscope/corpus.hpp"
#include "neuronscope/intervene.hpp"
#include "neuronscope/model.hpp"

namespace neuronscope {

// 3-class synthetic sequence-inference task. The rule is language-independent
// so cross-language transfer is meaningful:
//   0 = copy      hypothesis identical to the premise
//   1 = disjoint  hypothesis shares no token with the premise
//   2 = shuffled  hypothesis is a reordering of the premise (same multiset)
inline constexpr int kNumClasses = 3;

struct ClassificationExample {
  std::vector<int32_t> premise;
  std::vector<int32_t> hypothesis;
  int label = 0;
  LanguageCode language;
};

struct TaskDataset {
  LanguageCode language;
  std::vector<ClassificationExample> examples;
  uint64_t seed = 0;
};

/// Generates n class-balanced (within +-1) examples in the language's token
/// distribution. Deterministic in (spec, seed).
TaskDataset gen_classification_task(const SynthLanguageSpec& spec, int n, uint64_t seed);

/// Independent label check used as the generator's oracle: recomputes the
/// class from the raw sequences.
std::optional<int> infer_label(const ClassificationExample& ex);

/// Encodes an example as [BOS] premise [SEP] hypothesis [EOS].
std::vector<int32_t> encode_example(const ClassificationExample& ex);

struct TaskHyper {
  int steps = 200;
  int batch_size = 8;
  AdamWConfig opt;
  uint64_t seed = 1;
};

struct TaskTrainResult {
  std::vector<double> loss_trace;
  double final_train_accuracy = 0.0;
};

/// Trains the classification head (and whatever adapters are attached) on a
/// single-language dataset with cross-entropy. Base weights stay frozen when
/// adapters are present; plain head(+adapter) training otherwise.
TaskTrainResult train_task(Model& model, const TaskDataset& source, const TaskHyper& hp);

struct TransferResult {
  std::string finetune_languages;  // FTL label, e.g. "none", "src", "src+tgt"
  LanguageCode eval_language;
  std::string intervention;  // "noint", "mean", "p90", "zero", ...
  double accuracy = 0.0;
  int n_examples = 0;
  uint64_t seed = 0;
};

/// Accuracy over the target dataset with the intervention active on every
/// forward pass. In strict mode the target language must differ from every
/// training-data language.
TransferResult zero_shot_eval(const Model& model, const TaskDataset& target,
                              const InterventionSpec* intervention,
                              const std::vector<LanguageCode>& train_languages,
                              bool strict = true, int n_threads = 1);

}  // namespace neuronscope

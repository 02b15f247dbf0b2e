#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "neuronscope/identify.hpp"
#include "neuronscope/model.hpp"
#include "neuronscope/tasks.hpp"

namespace neuronscope {

enum class LoraTarget { MaskedMlp, Attention, Head };

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
  LoraTarget target = LoraTarget::MaskedMlp;
  uint64_t seed = 1;

  /// Enforces r <= min(d, k) / 4 for the matrices the target adapts.
  void validate(const ModelConfig& config) const;
};

/// Binary trainability masks for the MLP matrices of every layer, derived
/// from the union of the given neuron sets. For neuron (i, j): the j-th
/// column of layer i's gate and up projections (d_model entries each, the
/// neuron's input weights) and the j-th row of its down projection.
struct LoraMask {
  // per layer (1-based index l-1): masks shaped like w_gate, w_up, w_down
  std::vector<Matrix> gate, up, down;
  std::vector<NeuronSet> derived_from;

  int64_t nonzeros(int layer) const;  // total ones across the three matrices
};

LoraMask build_mask(const std::vector<NeuronSet>& sets, const ModelConfig& config);

/// Attaches adapters for the target. MaskedMlp requires a mask and adapts
/// gate/up/down per layer; Attention adapts q/k/v/o per layer unmasked.
/// B = 0 at initialization, so the adapted forward is bit-identical to the
/// base model until training moves B.
void attach_lora(Model& model, const LoraConfig& config, const LoraMask* mask = nullptr);

/// Which language-specific neurons are trainable during task fine-tuning.
/// Attention adapters and the classification head are always trainable.
enum class FinetuneSetup { None, SourceOnly, TargetOnly, SourcePlusTarget, Random };
const char* setup_name(FinetuneSetup s);
FinetuneSetup setup_from_name(const std::string& s);

struct FinetuneConfig {
  FinetuneSetup setup = FinetuneSetup::None;
  LoraConfig mlp_lora;   // used when the setup selects MLP neurons
  LoraConfig attn_lora;  // always attached
  int random_per_layer = 10;
  uint64_t random_seed = 1;
  TaskHyper hyper;
};

struct FinetuneResult {
  TaskTrainResult train;
  std::vector<NeuronSet> mlp_sets;  // the sets the mask was built from
};

/// Builds masks per the setup, attaches MLP + attention adapters, trains on
/// the source dataset. Gradient reaches only adapter factors and the head;
/// the effective MLP update is exactly zero outside the mask.
FinetuneResult finetune(Model& model, const TaskDataset& source,
                        const std::map<LanguageCode, NeuronSet>& source_sets,
                        const std::map<LanguageCode, NeuronSet>& target_sets,
                        const FinetuneConfig& config);

// Adapter file: 8-byte magic "NSLORA01", u32 LE header-JSON length, header
// JSON (config, matrix list with shapes and mask presence), then per matrix:
// mask as row-major bit-packed bytes (LSB first) when masked, B then A as
// LE f64.
void save_adapters(const Model& model, const std::string& path);
void load_adapters(Model& model, const std::string& path);

}  // namespace neuronscope

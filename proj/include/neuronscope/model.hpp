#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "neuronscope/corpus.hpp"
#include "neuronscope/matrix.hpp"

namespace neuronscope {

/// RMS-norm epsilon; part of the architecture contract (checkpoints do not
/// store it).
inline constexpr double kRmsNormEps = 1e-6;

/// Decoder-only transformer dimensions. Desk-scale defaults keep CPU training
/// in the minutes range while preserving every structural property.
struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int d_ff = 256;
  int n_heads = 4;
  int vocab_size = kVocabSize;
  int t_max = 128;
  uint64_t seed = 1;

  void validate() const;
  int n_neurons() const { return n_layers * d_ff; }
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Addresses one feedforward activation unit. 1-based on both axes:
/// layer in 1..L, index in 1..d_ff.
struct NeuronId {
  int layer = 1;
  int index = 1;

  friend bool operator==(const NeuronId& a, const NeuronId& b) {
    return a.layer == b.layer && a.index == b.index;
  }
  friend bool operator<(const NeuronId& a, const NeuronId& b) {
    return a.layer != b.layer ? a.layer < b.layer : a.index < b.index;
  }
};

/// Per-layer matrices of feedforward activations for one forward pass.
/// layers[i] has shape (rows*cols, d_ff); the values are the outputs of the
/// gating nonlinearity, after any intervention was applied.
struct ActivationTap {
  std::vector<Matrix> layers;
};

/// Model-level intervention: overwrite the tapped value of each listed neuron
/// with a constant, at every token position, before the gated product.
/// `identity` is a diagnostic mode that writes each neuron's just-computed
/// activation back in place of a constant; it must be a bit-exact no-op.
struct Intervention {
  std::vector<std::pair<NeuronId, double>> values;
  bool identity = false;

  static Intervention identity_over(const std::vector<NeuronId>& neurons);
};

enum class WeightSlot { Wq = 0, Wk, Wv, Wo, WGate, WUp, WDown };
const char* weight_slot_name(WeightSlot s);

/// Low-rank adapter state for one weight matrix W (in x out):
/// W_eff = W + (alpha/r) * M (x) (B A [+ probe]), with B (in x r) zero-init
/// and A (r x out) scaled-normal. An empty mask means unmasked. `probe` is a
/// test hook added to (B A) before masking.
struct LoraAdapter {
  int layer = 0;  // 1-based
  WeightSlot slot = WeightSlot::Wq;
  Matrix b;
  Matrix a;
  double scale = 1.0;
  Matrix mask;
  Matrix probe;
  Matrix w_eff;

  void refresh(const Matrix& base);
};

struct LayerParams {
  Matrix attn_norm;  // (1 x d)
  Matrix wq, wk, wv, wo;  // (d x d)
  Matrix mlp_norm;  // (1 x d)
  Matrix w_gate, w_up;  // (d x d_ff)
  Matrix w_down;  // (d_ff x d)
};

struct ParamRef {
  std::string name;
  Matrix* mat;
  bool decay;  // weight decay applies (projections/embeddings, not gains/biases)
};

struct ForwardOptions {
  const Intervention* intervention = nullptr;
  bool want_tap = false;
  bool want_lm_logits = true;
  bool want_cls_logits = false;
};

struct ForwardResult {
  Matrix lm_logits;   // (rows*cols x vocab)
  Matrix cls_logits;  // (rows x 3)
  ActivationTap tap;
};

/// Gradient storage keyed by parameter identity. Slots are created zeroed on
/// first access; iteration happens through parameter registries, never the
/// map itself, so reduction order is deterministic.
class GradMap {
 public:
  Matrix& at(const Matrix& param);
  const Matrix* find(const Matrix& param) const;
  void clear() { grads_.clear(); }

 private:
  std::map<const Matrix*, Matrix> grads_;
};

class Model {
 public:
  ModelConfig config;

  Matrix tok_emb;   // (vocab x d)
  Matrix pos_emb;   // (t_max x d)
  std::vector<LayerParams> layers;
  Matrix final_norm;  // (1 x d)
  Matrix lm_head;     // (d x vocab)
  Matrix cls_w;       // (d x 3)
  Matrix cls_b;       // (1 x 3)

  /// Deterministic seeded initialization. Same config gives bit-identical
  /// parameters on every call.
  static Model init(const ModelConfig& config);

  /// Base parameters in canonical checkpoint order.
  std::vector<ParamRef> base_params();
  std::vector<ParamRef> base_params() const;  // names + shapes, for inspection

  // --- adapters -------------------------------------------------------
  LoraAdapter& add_adapter(int layer, WeightSlot slot, LoraAdapter adapter);
  const LoraAdapter* adapter_at(int layer, WeightSlot slot) const;
  LoraAdapter* adapter_at(int layer, WeightSlot slot);
  std::vector<LoraAdapter*> all_adapters();
  std::vector<const LoraAdapter*> all_adapters() const;
  void clear_adapters() { adapters_.clear(); }
  /// Recomputes every adapter's effective weight from its current factors.
  void refresh_adapters();

  const Matrix& base_weight(int layer, WeightSlot slot) const;
  Matrix& base_weight(int layer, WeightSlot slot);
  /// w_eff when an adapter is attached, the base matrix otherwise.
  const Matrix& effective_weight(int layer, WeightSlot slot) const;

  // --- evaluation -----------------------------------------------------
  ForwardResult forward(const TokenBatch& batch, const ForwardOptions& opts = {}) const;

  /// Mean next-token NLL over the batch plus gradients. Gradients flow to
  /// base parameters, or to adapter factors where an adapter is attached.
  double lm_loss_and_grads(const TokenBatch& batch, GradMap& grads) const;

  /// 3-class classification loss (mean-pooled final hidden state -> linear
  /// head) over one encoded sequence, with gradients scaled by `weight`
  /// (callers average over a batch by passing 1/B). Returns the unweighted
  /// NLL; also reports the argmax class.
  double cls_loss_and_grads(const std::vector<int32_t>& tokens, int label, GradMap& grads,
                            int* predicted = nullptr, double weight = 1.0) const;

  /// Forward-only classification prediction.
  int classify(const std::vector<int32_t>& tokens, const Intervention* iv = nullptr) const;

  std::string fingerprint() const;

 private:
  // key: layer * 8 + slot
  std::map<int, LoraAdapter> adapters_;
};

// --- optimizer ---------------------------------------------------------

/// Decoupled-weight-decay adaptive-moment optimizer with linear warmup then
/// linear decay, and global-norm gradient clipping.
struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.95;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 10.0;
  int total_steps = 1;
  double warmup_frac = 0.01;
};

class AdamW {
 public:
  AdamW(std::vector<ParamRef> params, AdamWConfig cfg);
  void step(GradMap& grads);
  double lr_at(int step) const;  // 0-based step index
  int steps_taken() const { return t_; }

 private:
  std::vector<ParamRef> params_;
  AdamWConfig cfg_;
  std::vector<Matrix> m_, v_;
  int t_ = 0;
};

// --- training / evaluation ---------------------------------------------

struct LmTrainConfig {
  int steps = 1;
  int batch_size = 8;
  AdamWConfig opt;
  uint64_t seed = 1;
};

struct LossTrace {
  std::vector<double> per_step;
};

/// Proportional interleave of per-language batch counts (error diffusion):
/// every prefix of the schedule deviates from exact proportionality by less
/// than 1 batch per language.
std::vector<size_t> interleave_schedule(const std::vector<size_t>& counts);

/// Next-token training over language-interleaved batches. Batches are
/// single-language; languages are interleaved proportionally to their window
/// counts (per-epoch counts differ by at most 1 from the exact proportion).
LossTrace train_lm(Model& model, const std::vector<Corpus>& corpora, const LmTrainConfig& cfg);

/// exp(mean over windows of per-window mean NLL). The intervention, when
/// given, is active for every forward pass. Evaluates at most max_windows
/// windows; parallel over windows with reduction in window order.
double perplexity(const Model& model, const Corpus& corpus,
                  const Intervention* intervention = nullptr,
                  size_t max_windows = static_cast<size_t>(-1), int n_threads = 1);

// Checkpoint file: 8-byte magic "NSCKPT01", u32 LE length of the canonical
// config JSON, the JSON bytes, then every base parameter as LE f64 in
// base_params() order (row-major within each matrix).
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace neuronscope

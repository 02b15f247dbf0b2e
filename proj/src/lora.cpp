#include "neuronscope/lora.hpp"

#include <algorithm>
#include <fstream>

#include "neuronscope/canonical_json.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/io.hpp"
#include "neuronscope/rng.hpp"

namespace neuronscope {

namespace {
constexpr char kLoraMagic[9] = "NSLORA01";

struct ShapePair {
  Eigen::Index d, k;
};

/// Shape of the weight each target adapts, for the rank rule.
std::vector<ShapePair> target_shapes(LoraTarget target, const ModelConfig& cfg) {
  switch (target) {
    case LoraTarget::Attention:
      return {{cfg.d_model, cfg.d_model}};
    case LoraTarget::MaskedMlp:
      return {{cfg.d_model, cfg.d_ff}, {cfg.d_ff, cfg.d_model}};
    case LoraTarget::Head:
      return {{cfg.d_model, 3}};
  }
  return {};
}
}  // namespace

void LoraConfig::validate(const ModelConfig& config) const {
  if (rank < 1) throw UsageError("LoRA rank must be >= 1");
  if (!(alpha > 0.0)) throw UsageError("LoRA alpha must be > 0");
  for (const auto& [d, k] : target_shapes(target, config)) {
    const Eigen::Index limit = std::min(d, k) / 4;
    if (rank > limit) {
      throw UsageError("LoRA rank " + std::to_string(rank) + " violates r <= min(d,k)/4 = " +
                       std::to_string(limit) + " for this target");
    }
  }
}

int64_t LoraMask::nonzeros(int layer) const {
  const size_t l = static_cast<size_t>(layer - 1);
  return static_cast<int64_t>(gate[l].sum() + up[l].sum() + down[l].sum());
}

LoraMask build_mask(const std::vector<NeuronSet>& sets, const ModelConfig& config) {
  LoraMask mask;
  mask.derived_from = sets;
  mask.gate.assign(static_cast<size_t>(config.n_layers),
                   Matrix::Zero(config.d_model, config.d_ff));
  mask.up.assign(static_cast<size_t>(config.n_layers),
                 Matrix::Zero(config.d_model, config.d_ff));
  mask.down.assign(static_cast<size_t>(config.n_layers),
                   Matrix::Zero(config.d_ff, config.d_model));
  for (const auto& set : sets) {
    set.validate(config);
    for (const auto& n : set.neurons) {
      const size_t l = static_cast<size_t>(n.layer - 1);
      const Eigen::Index j = n.index - 1;
      // Neuron (i, j) owns column j of gate/up (its input weights) and row j
      // of down (its output weights).
      mask.gate[l].col(j).setOnes();
      mask.up[l].col(j).setOnes();
      mask.down[l].row(j).setOnes();
    }
  }
  return mask;
}

namespace {
LoraAdapter make_adapter(const Matrix& base, const LoraConfig& cfg, Rng& rng,
                         const Matrix* mask) {
  LoraAdapter ad;
  const Eigen::Index d = base.rows(), k = base.cols();
  ad.b = Matrix::Zero(d, cfg.rank);
  ad.a = Matrix(cfg.rank, k);
  for (Eigen::Index r = 0; r < ad.a.rows(); ++r) {
    for (Eigen::Index c = 0; c < ad.a.cols(); ++c) ad.a(r, c) = rng.normal() * 0.02;
  }
  ad.scale = cfg.alpha / cfg.rank;
  if (mask) ad.mask = *mask;
  return ad;
}
}  // namespace

void attach_lora(Model& model, const LoraConfig& config, const LoraMask* mask) {
  config.validate(model.config);
  if (config.target == LoraTarget::MaskedMlp && mask == nullptr) {
    throw UsageError("MaskedMlp adapters require a mask");
  }
  if (config.target != LoraTarget::MaskedMlp && mask != nullptr) {
    throw UsageError("only MaskedMlp adapters take a mask");
  }
  if (config.target == LoraTarget::Head) {
    // validate() already rejected every admissible rank for the 3-wide head;
    // kept as an explicit dead end so the contract is visible.
    throw UsageError("head adapters cannot satisfy the rank rule; the head is trained directly");
  }

  Rng rng(derive_seed(config.seed, "lora-init", static_cast<uint64_t>(config.target)));
  for (int l = 1; l <= model.config.n_layers; ++l) {
    if (config.target == LoraTarget::Attention) {
      for (WeightSlot slot : {WeightSlot::Wq, WeightSlot::Wk, WeightSlot::Wv, WeightSlot::Wo}) {
        model.add_adapter(l, slot, make_adapter(model.base_weight(l, slot), config, rng, nullptr));
      }
    } else {
      const size_t li = static_cast<size_t>(l - 1);
      model.add_adapter(l, WeightSlot::WGate,
                        make_adapter(model.base_weight(l, WeightSlot::WGate), config, rng,
                                     &mask->gate[li]));
      model.add_adapter(l, WeightSlot::WUp,
                        make_adapter(model.base_weight(l, WeightSlot::WUp), config, rng,
                                     &mask->up[li]));
      model.add_adapter(l, WeightSlot::WDown,
                        make_adapter(model.base_weight(l, WeightSlot::WDown), config, rng,
                                     &mask->down[li]));
    }
  }
}

const char* setup_name(FinetuneSetup s) {
  switch (s) {
    case FinetuneSetup::None: return "none";
    case FinetuneSetup::SourceOnly: return "source";
    case FinetuneSetup::TargetOnly: return "target";
    case FinetuneSetup::SourcePlusTarget: return "source+target";
    case FinetuneSetup::Random: return "random";
  }
  return "?";
}

FinetuneSetup setup_from_name(const std::string& s) {
  if (s == "none") return FinetuneSetup::None;
  if (s == "source" || s == "source-only") return FinetuneSetup::SourceOnly;
  if (s == "target" || s == "target-only") return FinetuneSetup::TargetOnly;
  if (s == "source+target" || s == "source-plus-target") return FinetuneSetup::SourcePlusTarget;
  if (s == "random") return FinetuneSetup::Random;
  throw UsageError("unknown finetune setup: " + s);
}

FinetuneResult finetune(Model& model, const TaskDataset& source,
                        const std::map<LanguageCode, NeuronSet>& source_sets,
                        const std::map<LanguageCode, NeuronSet>& target_sets,
                        const FinetuneConfig& config) {
  model.clear_adapters();

  std::vector<NeuronSet> mlp_sets;
  switch (config.setup) {
    case FinetuneSetup::None:
      break;
    case FinetuneSetup::SourceOnly:
      for (const auto& [lang, set] : source_sets) mlp_sets.push_back(set);
      break;
    case FinetuneSetup::TargetOnly:
      for (const auto& [lang, set] : target_sets) mlp_sets.push_back(set);
      break;
    case FinetuneSetup::SourcePlusTarget:
      for (const auto& [lang, set] : source_sets) mlp_sets.push_back(set);
      for (const auto& [lang, set] : target_sets) mlp_sets.push_back(set);
      break;
    case FinetuneSetup::Random:
      mlp_sets.push_back(
          random_neuron_set(model.config, config.random_seed, config.random_per_layer));
      break;
  }

  FinetuneResult result;
  result.mlp_sets = mlp_sets;
  if (config.setup != FinetuneSetup::None) {
    const LoraMask mask = build_mask(mlp_sets, model.config);
    attach_lora(model, config.mlp_lora, &mask);
  }
  LoraConfig attn = config.attn_lora;
  attn.target = LoraTarget::Attention;
  attach_lora(model, attn);

  result.train = train_task(model, source, config.hyper);
  return result;
}

// --- adapter persistence -----------------------------------------------------

namespace {
void write_bitpacked(std::ostream& os, const Matrix& mask) {
  const Eigen::Index n = mask.size();
  uint8_t byte = 0;
  int fill = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (mask.data()[i] != 0.0) byte |= static_cast<uint8_t>(1u << fill);
    if (++fill == 8) {
      os.put(static_cast<char>(byte));
      byte = 0;
      fill = 0;
    }
  }
  if (fill > 0) os.put(static_cast<char>(byte));
}

Matrix read_bitpacked(std::istream& is, Eigen::Index rows, Eigen::Index cols) {
  Matrix mask(rows, cols);
  const Eigen::Index n = rows * cols;
  uint8_t byte = 0;
  int fill = 8;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (fill == 8) {
      int c = is.get();
      if (c == EOF) throw ArtifactError("truncated adapter mask");
      byte = static_cast<uint8_t>(c);
      fill = 0;
    }
    mask.data()[i] = (byte >> fill) & 1 ? 1.0 : 0.0;
    ++fill;
  }
  return mask;
}

void write_matrix(std::ostream& os, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) write_f64(os, m.data()[i]);
}

Matrix read_matrix(std::istream& is, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = read_f64(is);
  return m;
}
}  // namespace

void save_adapters(const Model& model, const std::string& path) {
  const auto adapters = model.all_adapters();
  if (adapters.empty()) throw UsageError("no adapters to save");

  nlohmann::json header;
  header["base_fingerprint"] = model.fingerprint();
  nlohmann::json mats = nlohmann::json::array();
  for (const LoraAdapter* ad : adapters) {
    nlohmann::json m;
    m["layer"] = ad->layer;
    m["slot"] = weight_slot_name(ad->slot);
    m["rows"] = ad->b.rows();
    m["cols"] = ad->a.cols();
    m["rank"] = ad->b.cols();
    m["scale"] = ad->scale;
    m["masked"] = ad->mask.size() > 0;
    mats.push_back(std::move(m));
  }
  header["matrices"] = std::move(mats);
  const std::string head = dump_canonical(header);

  atomic_write_file(path, [&](std::ostream& os) {
    os.write(kLoraMagic, 8);
    write_u32(os, static_cast<uint32_t>(head.size()));
    os.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const LoraAdapter* ad : adapters) {
      if (ad->mask.size() > 0) write_bitpacked(os, ad->mask);
      write_matrix(os, ad->b);
      write_matrix(os, ad->a);
    }
  });
}

namespace {
WeightSlot slot_from_name(const std::string& s) {
  for (WeightSlot slot : {WeightSlot::Wq, WeightSlot::Wk, WeightSlot::Wv, WeightSlot::Wo,
                          WeightSlot::WGate, WeightSlot::WUp, WeightSlot::WDown}) {
    if (s == weight_slot_name(slot)) return slot;
  }
  throw ArtifactError("unknown weight slot in adapter file: " + s);
}
}  // namespace

void load_adapters(Model& model, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("missing adapter file: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::string(magic, 8) != std::string(kLoraMagic, 8)) {
    throw ArtifactError("bad adapter magic in " + path);
  }
  const uint32_t len = read_u32(f);
  std::string head(len, '\0');
  f.read(head.data(), len);
  if (!f) throw ArtifactError("truncated adapter file: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("bad adapter header JSON: " + std::string(e.what()));
  }
  const std::string base_fp = header.value("base_fingerprint", "");
  if (!base_fp.empty() && base_fp != model.fingerprint()) {
    throw ArtifactError("adapter file was built for a different checkpoint (" + base_fp +
                        " vs " + model.fingerprint() + ")");
  }

  model.clear_adapters();
  for (const auto& m : header.at("matrices")) {
    const int layer = m.at("layer").get<int>();
    const WeightSlot slot = slot_from_name(m.at("slot").get<std::string>());
    const Eigen::Index rows = m.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = m.at("cols").get<Eigen::Index>();
    const Eigen::Index rank = m.at("rank").get<Eigen::Index>();
    LoraAdapter ad;
    ad.scale = m.at("scale").get<double>();
    if (m.at("masked").get<bool>()) ad.mask = read_bitpacked(f, rows, cols);
    ad.b = read_matrix(f, rows, rank);
    ad.a = read_matrix(f, rank, cols);
    const Matrix& base = model.base_weight(layer, slot);
    if (base.rows() != rows || base.cols() != cols) {
      throw ArtifactError("adapter shape mismatch for layer " + std::to_string(layer));
    }
    model.add_adapter(layer, slot, std::move(ad));
  }
}

}  // namespace neuronscope

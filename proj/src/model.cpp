#include "neuronscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "neuronscope/canonical_json.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/hashing.hpp"
#include "neuronscope/io.hpp"
#include "neuronscope/rng.hpp"
#include "neuronscope/threads.hpp"

namespace neuronscope {

namespace {
constexpr char kCkptMagic[9] = "NSCKPT01";
constexpr double kNormEps = kRmsNormEps;

double silu(double z) { return z / (1.0 + std::exp(-z)); }

double silu_grad(double z) {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}
}  // namespace

// --- config --------------------------------------------------------------

void ModelConfig::validate() const {
  if (n_layers < 2) throw UsageError("n_layers must be >= 2");
  if (d_model < 1 || d_ff < 1 || n_heads < 1 || vocab_size < 1 || t_max < 1) {
    throw UsageError("all model dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) throw UsageError("d_model must be divisible by n_heads");
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["n_layers"] = n_layers;
  j["d_model"] = d_model;
  j["d_ff"] = d_ff;
  j["n_heads"] = n_heads;
  j["vocab_size"] = vocab_size;
  j["t_max"] = t_max;
  j["seed"] = seed;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.t_max = j.at("t_max").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.validate();
  return c;
}

const char* weight_slot_name(WeightSlot s) {
  switch (s) {
    case WeightSlot::Wq: return "wq";
    case WeightSlot::Wk: return "wk";
    case WeightSlot::Wv: return "wv";
    case WeightSlot::Wo: return "wo";
    case WeightSlot::WGate: return "w_gate";
    case WeightSlot::WUp: return "w_up";
    case WeightSlot::WDown: return "w_down";
  }
  return "?";
}

Intervention Intervention::identity_over(const std::vector<NeuronId>& neurons) {
  Intervention iv;
  iv.identity = true;
  iv.values.reserve(neurons.size());
  for (const auto& n : neurons) iv.values.emplace_back(n, 0.0);
  return iv;
}

// --- adapters -------------------------------------------------------------

void LoraAdapter::refresh(const Matrix& base) {
  Matrix delta = b * a;
  if (probe.size() > 0) delta += probe;
  if (mask.size() > 0) delta = delta.cwiseProduct(mask);
  w_eff = base + scale * delta;
}

LoraAdapter& Model::add_adapter(int layer, WeightSlot slot, LoraAdapter adapter) {
  adapter.layer = layer;
  adapter.slot = slot;
  const int key = layer * 8 + static_cast<int>(slot);
  adapter.refresh(base_weight(layer, slot));
  return adapters_[key] = std::move(adapter);
}

const LoraAdapter* Model::adapter_at(int layer, WeightSlot slot) const {
  auto it = adapters_.find(layer * 8 + static_cast<int>(slot));
  return it == adapters_.end() ? nullptr : &it->second;
}

LoraAdapter* Model::adapter_at(int layer, WeightSlot slot) {
  auto it = adapters_.find(layer * 8 + static_cast<int>(slot));
  return it == adapters_.end() ? nullptr : &it->second;
}

std::vector<LoraAdapter*> Model::all_adapters() {
  std::vector<LoraAdapter*> out;
  for (auto& [k, ad] : adapters_) out.push_back(&ad);
  return out;
}

std::vector<const LoraAdapter*> Model::all_adapters() const {
  std::vector<const LoraAdapter*> out;
  for (const auto& [k, ad] : adapters_) out.push_back(&ad);
  return out;
}

void Model::refresh_adapters() {
  for (auto& [k, ad] : adapters_) ad.refresh(base_weight(ad.layer, ad.slot));
}

Matrix& Model::base_weight(int layer, WeightSlot slot) {
  LayerParams& lp = layers.at(static_cast<size_t>(layer - 1));
  switch (slot) {
    case WeightSlot::Wq: return lp.wq;
    case WeightSlot::Wk: return lp.wk;
    case WeightSlot::Wv: return lp.wv;
    case WeightSlot::Wo: return lp.wo;
    case WeightSlot::WGate: return lp.w_gate;
    case WeightSlot::WUp: return lp.w_up;
    case WeightSlot::WDown: return lp.w_down;
  }
  throw UsageError("bad weight slot");
}

const Matrix& Model::base_weight(int layer, WeightSlot slot) const {
  return const_cast<Model*>(this)->base_weight(layer, slot);
}

const Matrix& Model::effective_weight(int layer, WeightSlot slot) const {
  const LoraAdapter* ad = adapter_at(layer, slot);
  return ad ? ad->w_eff : base_weight(layer, slot);
}

// --- init / params ---------------------------------------------------------

namespace {
void fill_normal(Matrix& m, Rng& rng, double std_dev) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal() * std_dev;
  }
}
}  // namespace

Model Model::init(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config = config;
  const int d = config.d_model;
  const int f = config.d_ff;
  const double std_dev = 0.02;
  // Residual-branch outputs are shrunk by sqrt(2L) to keep the stream tame.
  const double resid_std = std_dev / std::sqrt(2.0 * config.n_layers);

  Rng rng(derive_seed(config.seed, "model-init"));

  m.tok_emb = Matrix(config.vocab_size, d);
  fill_normal(m.tok_emb, rng, std_dev);
  m.pos_emb = Matrix(config.t_max, d);
  fill_normal(m.pos_emb, rng, std_dev);

  m.layers.resize(static_cast<size_t>(config.n_layers));
  for (auto& lp : m.layers) {
    lp.attn_norm = Matrix::Ones(1, d);
    lp.wq = Matrix(d, d);
    fill_normal(lp.wq, rng, std_dev);
    lp.wk = Matrix(d, d);
    fill_normal(lp.wk, rng, std_dev);
    lp.wv = Matrix(d, d);
    fill_normal(lp.wv, rng, std_dev);
    lp.wo = Matrix(d, d);
    fill_normal(lp.wo, rng, resid_std);
    lp.mlp_norm = Matrix::Ones(1, d);
    lp.w_gate = Matrix(d, f);
    fill_normal(lp.w_gate, rng, std_dev);
    lp.w_up = Matrix(d, f);
    fill_normal(lp.w_up, rng, std_dev);
    lp.w_down = Matrix(f, d);
    fill_normal(lp.w_down, rng, resid_std);
  }

  m.final_norm = Matrix::Ones(1, d);
  m.lm_head = Matrix(d, config.vocab_size);
  fill_normal(m.lm_head, rng, std_dev);
  m.cls_w = Matrix(d, 3);
  fill_normal(m.cls_w, rng, std_dev);
  m.cls_b = Matrix::Zero(1, 3);
  return m;
}

std::vector<ParamRef> Model::base_params() {
  std::vector<ParamRef> out;
  out.push_back({"tok_emb", &tok_emb, true});
  out.push_back({"pos_emb", &pos_emb, true});
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l + 1) + ".";
    LayerParams& lp = layers[l];
    out.push_back({prefix + "attn_norm", &lp.attn_norm, false});
    out.push_back({prefix + "wq", &lp.wq, true});
    out.push_back({prefix + "wk", &lp.wk, true});
    out.push_back({prefix + "wv", &lp.wv, true});
    out.push_back({prefix + "wo", &lp.wo, true});
    out.push_back({prefix + "mlp_norm", &lp.mlp_norm, false});
    out.push_back({prefix + "w_gate", &lp.w_gate, true});
    out.push_back({prefix + "w_up", &lp.w_up, true});
    out.push_back({prefix + "w_down", &lp.w_down, true});
  }
  out.push_back({"final_norm", &final_norm, false});
  out.push_back({"lm_head", &lm_head, true});
  out.push_back({"cls_w", &cls_w, true});
  out.push_back({"cls_b", &cls_b, false});
  return out;
}

std::vector<ParamRef> Model::base_params() const {
  // Read-only callers (fingerprint, checkpoint save) share the registry.
  return const_cast<Model*>(this)->base_params();
}

// --- grads ------------------------------------------------------------------

Matrix& GradMap::at(const Matrix& param) {
  auto it = grads_.find(&param);
  if (it == grads_.end()) {
    it = grads_.emplace(&param, Matrix::Zero(param.rows(), param.cols())).first;
  }
  return it->second;
}

const Matrix* GradMap::find(const Matrix& param) const {
  auto it = grads_.find(&param);
  return it == grads_.end() ? nullptr : &it->second;
}

// --- forward ------------------------------------------------------------------

namespace {

struct LayerCache {
  Matrix x_in, attn_n;
  Vector attn_inv;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // window-major, then head
  Matrix ctx, mid, mlp_n;
  Vector mlp_inv;
  Matrix gate_pre, h, up, prod;
};

struct Workspace {
  std::vector<int32_t> ids;
  int rows = 0, cols = 0;
  std::vector<LayerCache> layers;
  Matrix final_in, final_n;
  Vector final_inv;
  Matrix pool;
  bool had_intervention = false;
};

void rmsnorm_forward(const Matrix& x, const Matrix& gain, Matrix& out, Vector& inv) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  out.resize(n, d);
  inv.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double ms = x.row(r).squaredNorm() / static_cast<double>(d);
    const double iv = 1.0 / std::sqrt(ms + kNormEps);
    inv(r) = iv;
    out.row(r) = (x.row(r) * iv).cwiseProduct(gain.row(0));
  }
}

/// dloss/dx for y = (x * inv) .* g; accumulates dgain.
Matrix rmsnorm_backward(const Matrix& x, const Matrix& gain, const Vector& inv,
                        const Matrix& dy, Matrix& dgain) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Matrix dx(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto dyg = dy.row(r).cwiseProduct(gain.row(0));
    const double dot = dyg.cwiseProduct(x.row(r)).sum();
    const double iv = inv(r);
    dx.row(r) = dyg * iv - x.row(r) * (iv * iv * iv * dot / static_cast<double>(d));
    dgain.row(0) += dy.row(r).cwiseProduct(x.row(r)) * iv;
  }
  return dx;
}

/// Per-layer list of (0-based column, value) pairs, validated against config.
std::vector<std::vector<std::pair<int, double>>> compile_intervention(
    const Intervention& iv, const ModelConfig& config) {
  std::vector<std::vector<std::pair<int, double>>> per_layer(
      static_cast<size_t>(config.n_layers));
  for (const auto& [neuron, value] : iv.values) {
    if (neuron.layer < 1 || neuron.layer > config.n_layers || neuron.index < 1 ||
        neuron.index > config.d_ff) {
      throw UsageError("intervention neuron out of bounds: layer " +
                       std::to_string(neuron.layer) + ", index " +
                       std::to_string(neuron.index));
    }
    per_layer[static_cast<size_t>(neuron.layer - 1)].emplace_back(neuron.index - 1, value);
  }
  return per_layer;
}

}  // namespace

static void forward_internal(const Model& model, const TokenBatch& batch,
                             const ForwardOptions& opts, Workspace& ws, ForwardResult& out) {
  const ModelConfig& cfg = model.config;
  if (batch.rows < 1 || batch.cols < 1) throw UsageError("empty batch");
  if (batch.cols > cfg.t_max) throw UsageError("sequence longer than t_max");
  for (int32_t t : batch.tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw UsageError("token id out of vocabulary");
  }

  std::vector<std::vector<std::pair<int, double>>> iv_cols;
  bool iv_identity = false;
  if (opts.intervention) {
    iv_cols = compile_intervention(*opts.intervention, cfg);
    iv_identity = opts.intervention->identity;
    ws.had_intervention = !opts.intervention->values.empty();
  }

  const int rows = batch.rows, cols = batch.cols;
  const Eigen::Index n = static_cast<Eigen::Index>(rows) * cols;
  const int d = cfg.d_model;
  const int hd = d / cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ws.ids = batch.tokens;
  ws.rows = rows;
  ws.cols = cols;
  ws.layers.resize(static_cast<size_t>(cfg.n_layers));
  if (opts.want_tap) out.tap.layers.resize(static_cast<size_t>(cfg.n_layers));

  Matrix x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = static_cast<int>(i % cols);
    x.row(i) = model.tok_emb.row(batch.tokens[static_cast<size_t>(i)]) + model.pos_emb.row(t);
  }

  for (int l = 1; l <= cfg.n_layers; ++l) {
    LayerCache& lc = ws.layers[static_cast<size_t>(l - 1)];
    const Matrix& gain_a = model.layers[static_cast<size_t>(l - 1)].attn_norm;
    const Matrix& gain_m = model.layers[static_cast<size_t>(l - 1)].mlp_norm;

    lc.x_in = std::move(x);
    rmsnorm_forward(lc.x_in, gain_a, lc.attn_n, lc.attn_inv);

    lc.q.noalias() = lc.attn_n * model.effective_weight(l, WeightSlot::Wq);
    lc.k.noalias() = lc.attn_n * model.effective_weight(l, WeightSlot::Wk);
    lc.v.noalias() = lc.attn_n * model.effective_weight(l, WeightSlot::Wv);

    lc.ctx.resize(n, d);
    lc.probs.assign(static_cast<size_t>(rows) * cfg.n_heads, Matrix());
    for (int b = 0; b < rows; ++b) {
      const Eigen::Index off = static_cast<Eigen::Index>(b) * cols;
      for (int hh = 0; hh < cfg.n_heads; ++hh) {
        const Eigen::Index hc = static_cast<Eigen::Index>(hh) * hd;
        auto qb = lc.q.block(off, hc, cols, hd);
        auto kb = lc.k.block(off, hc, cols, hd);
        auto vb = lc.v.block(off, hc, cols, hd);
        Matrix s = (qb * kb.transpose()) * scale;
        // Causal softmax: position t attends to 0..t only.
        Matrix& p = lc.probs[static_cast<size_t>(b) * cfg.n_heads + hh];
        p.resize(cols, cols);
        for (int t = 0; t < cols; ++t) {
          double mx = -std::numeric_limits<double>::infinity();
          for (int u = 0; u <= t; ++u) mx = std::max(mx, s(t, u));
          double total = 0.0;
          for (int u = 0; u <= t; ++u) {
            const double e = std::exp(s(t, u) - mx);
            p(t, u) = e;
            total += e;
          }
          for (int u = 0; u <= t; ++u) p(t, u) /= total;
          for (int u = t + 1; u < cols; ++u) p(t, u) = 0.0;
        }
        lc.ctx.block(off, hc, cols, hd).noalias() = p * vb;
      }
    }

    lc.mid.noalias() = lc.ctx * model.effective_weight(l, WeightSlot::Wo);
    lc.mid += lc.x_in;

    rmsnorm_forward(lc.mid, gain_m, lc.mlp_n, lc.mlp_inv);
    lc.gate_pre.noalias() = lc.mlp_n * model.effective_weight(l, WeightSlot::WGate);
    lc.h = lc.gate_pre.unaryExpr([](double z) { return silu(z); });

    if (opts.intervention) {
      for (const auto& [col, value] : iv_cols[static_cast<size_t>(l - 1)]) {
        if (iv_identity) {
          // Diagnostic write-back of the just-computed activation.
          const Vector tmp = lc.h.col(col);
          lc.h.col(col) = tmp;
        } else {
          lc.h.col(col).setConstant(value);
        }
      }
    }
    if (opts.want_tap) out.tap.layers[static_cast<size_t>(l - 1)] = lc.h;

    lc.up.noalias() = lc.mlp_n * model.effective_weight(l, WeightSlot::WUp);
    lc.prod = lc.h.cwiseProduct(lc.up);
    x.resize(n, d);
    x.noalias() = lc.prod * model.effective_weight(l, WeightSlot::WDown);
    x += lc.mid;
  }

  ws.final_in = std::move(x);
  rmsnorm_forward(ws.final_in, model.final_norm, ws.final_n, ws.final_inv);

  if (opts.want_lm_logits) out.lm_logits.noalias() = ws.final_n * model.lm_head;

  if (opts.want_cls_logits) {
    ws.pool.resize(rows, d);
    for (int b = 0; b < rows; ++b) {
      ws.pool.row(b) =
          ws.final_n.middleRows(static_cast<Eigen::Index>(b) * cols, cols).colwise().mean();
    }
    out.cls_logits.noalias() = ws.pool * model.cls_w;
    out.cls_logits.rowwise() += model.cls_b.row(0);
  }
}

ForwardResult Model::forward(const TokenBatch& batch, const ForwardOptions& opts) const {
  Workspace ws;
  ForwardResult out;
  forward_internal(*this, batch, opts, ws, out);
  return out;
}

// --- backward -----------------------------------------------------------------

namespace {

/// Routes dW for an (optionally adapted) weight: adapter factors get the
/// masked low-rank projection of the gradient, base weights get it directly.
void weight_grad(const Model& model, GradMap& grads, int layer, WeightSlot slot,
                 const Matrix& input, const Matrix& dout) {
  Matrix dw = input.transpose() * dout;
  const LoraAdapter* ad = model.adapter_at(layer, slot);
  if (ad == nullptr) {
    grads.at(model.base_weight(layer, slot)) += dw;
    return;
  }
  if (ad->mask.size() > 0) dw = dw.cwiseProduct(ad->mask);
  grads.at(ad->b).noalias() += ad->scale * (dw * ad->a.transpose());
  grads.at(ad->a).noalias() += ad->scale * (ad->b.transpose() * dw);
}

void backward_pass(const Model& model, const Workspace& ws, const Matrix* dlm_logits,
                   const Matrix* dcls_logits, GradMap& grads) {
  if (ws.had_intervention) {
    throw UsageError("cannot backpropagate through an intervened forward pass");
  }
  const ModelConfig& cfg = model.config;
  const int rows = ws.rows, cols = ws.cols;
  const Eigen::Index n = static_cast<Eigen::Index>(rows) * cols;
  const int d = cfg.d_model;
  const int hd = d / cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Matrix dfinal_n = Matrix::Zero(n, d);
  if (dlm_logits) {
    grads.at(model.lm_head).noalias() += ws.final_n.transpose() * (*dlm_logits);
    dfinal_n.noalias() += (*dlm_logits) * model.lm_head.transpose();
  }
  if (dcls_logits) {
    grads.at(model.cls_w).noalias() += ws.pool.transpose() * (*dcls_logits);
    grads.at(model.cls_b).row(0) += dcls_logits->colwise().sum();
    Matrix dpool = (*dcls_logits) * model.cls_w.transpose();
    for (int b = 0; b < rows; ++b) {
      dfinal_n.middleRows(static_cast<Eigen::Index>(b) * cols, cols).rowwise() +=
          dpool.row(b) / static_cast<double>(cols);
    }
  }

  Matrix dx = rmsnorm_backward(ws.final_in, model.final_norm, ws.final_inv, dfinal_n,
                               grads.at(model.final_norm));

  for (int l = cfg.n_layers; l >= 1; --l) {
    const LayerCache& lc = ws.layers[static_cast<size_t>(l - 1)];
    const LayerParams& lp = model.layers[static_cast<size_t>(l - 1)];

    // x = mid + prod * Wdown
    Matrix dprod = dx * model.effective_weight(l, WeightSlot::WDown).transpose();
    weight_grad(model, grads, l, WeightSlot::WDown, lc.prod, dx);
    Matrix dmid = std::move(dx);

    Matrix dh = dprod.cwiseProduct(lc.up);
    Matrix dup = dprod.cwiseProduct(lc.h);
    Matrix dgate_pre =
        dh.cwiseProduct(lc.gate_pre.unaryExpr([](double z) { return silu_grad(z); }));

    Matrix dmlp_n = dgate_pre * model.effective_weight(l, WeightSlot::WGate).transpose();
    dmlp_n.noalias() += dup * model.effective_weight(l, WeightSlot::WUp).transpose();
    weight_grad(model, grads, l, WeightSlot::WGate, lc.mlp_n, dgate_pre);
    weight_grad(model, grads, l, WeightSlot::WUp, lc.mlp_n, dup);

    dmid += rmsnorm_backward(lc.mid, lp.mlp_norm, lc.mlp_inv, dmlp_n, grads.at(lp.mlp_norm));

    // mid = x_in + ctx * Wo
    Matrix dctx = dmid * model.effective_weight(l, WeightSlot::Wo).transpose();
    weight_grad(model, grads, l, WeightSlot::Wo, lc.ctx, dmid);
    Matrix dx_in = std::move(dmid);

    Matrix dq = Matrix::Zero(n, d), dk = Matrix::Zero(n, d), dv = Matrix::Zero(n, d);
    for (int b = 0; b < rows; ++b) {
      const Eigen::Index off = static_cast<Eigen::Index>(b) * cols;
      for (int hh = 0; hh < cfg.n_heads; ++hh) {
        const Eigen::Index hc = static_cast<Eigen::Index>(hh) * hd;
        const Matrix& p = lc.probs[static_cast<size_t>(b) * cfg.n_heads + hh];
        auto qb = lc.q.block(off, hc, cols, hd);
        auto kb = lc.k.block(off, hc, cols, hd);
        auto vb = lc.v.block(off, hc, cols, hd);
        auto dctx_b = dctx.block(off, hc, cols, hd);

        Matrix dp = dctx_b * vb.transpose();
        dv.block(off, hc, cols, hd).noalias() = p.transpose() * dctx_b;

        // Softmax backward; masked entries have p = 0 so ds vanishes there.
        Matrix ds(cols, cols);
        for (int t = 0; t < cols; ++t) {
          const double dot = dp.row(t).cwiseProduct(p.row(t)).sum();
          ds.row(t) = p.row(t).cwiseProduct((dp.row(t).array() - dot).matrix());
        }
        dq.block(off, hc, cols, hd).noalias() = (ds * kb) * scale;
        dk.block(off, hc, cols, hd).noalias() = (ds.transpose() * qb) * scale;
      }
    }

    Matrix dattn_n = dq * model.effective_weight(l, WeightSlot::Wq).transpose();
    dattn_n.noalias() += dk * model.effective_weight(l, WeightSlot::Wk).transpose();
    dattn_n.noalias() += dv * model.effective_weight(l, WeightSlot::Wv).transpose();
    weight_grad(model, grads, l, WeightSlot::Wq, lc.attn_n, dq);
    weight_grad(model, grads, l, WeightSlot::Wk, lc.attn_n, dk);
    weight_grad(model, grads, l, WeightSlot::Wv, lc.attn_n, dv);

    dx_in +=
        rmsnorm_backward(lc.x_in, lp.attn_norm, lc.attn_inv, dattn_n, grads.at(lp.attn_norm));
    dx = std::move(dx_in);
  }

  Matrix& dtok = grads.at(model.tok_emb);
  Matrix& dpos = grads.at(model.pos_emb);
  for (Eigen::Index i = 0; i < n; ++i) {
    dtok.row(ws.ids[static_cast<size_t>(i)]) += dx.row(i);
    dpos.row(i % cols) += dx.row(i);
  }
}

}  // namespace

double Model::lm_loss_and_grads(const TokenBatch& batch, GradMap& grads) const {
  if (batch.cols < 2) throw UsageError("LM loss needs sequences of length >= 2");
  Workspace ws;
  ForwardResult fr;
  ForwardOptions opts;
  forward_internal(*this, batch, opts, ws, fr);

  const Eigen::Index n = fr.lm_logits.rows();
  const int vocab = config.vocab_size;
  const int cols = batch.cols;
  const Eigen::Index n_scored = static_cast<Eigen::Index>(batch.rows) * (cols - 1);

  Matrix dlogits = Matrix::Zero(n, vocab);
  double loss = 0.0;
  const double w = 1.0 / static_cast<double>(n_scored);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = static_cast<int>(i % cols);
    if (t == cols - 1) continue;  // last position predicts nothing
    const int32_t target = batch.tokens[static_cast<size_t>(i) + 1];
    const auto row = fr.lm_logits.row(i);
    const double mx = row.maxCoeff();
    double total = 0.0;
    for (int vtok = 0; vtok < vocab; ++vtok) total += std::exp(row(vtok) - mx);
    const double lse = mx + std::log(total);
    loss += (lse - row(target)) * w;
    for (int vtok = 0; vtok < vocab; ++vtok) {
      dlogits(i, vtok) = std::exp(row(vtok) - lse) * w;
    }
    dlogits(i, target) -= w;
  }

  backward_pass(*this, ws, &dlogits, nullptr, grads);
  return loss;
}

double Model::cls_loss_and_grads(const std::vector<int32_t>& tokens, int label, GradMap& grads,
                                 int* predicted, double weight) const {
  if (label < 0 || label >= 3) throw UsageError("label out of range");
  TokenBatch batch;
  batch.rows = 1;
  batch.cols = static_cast<int>(tokens.size());
  batch.tokens = tokens;

  Workspace ws;
  ForwardResult fr;
  ForwardOptions opts;
  opts.want_lm_logits = false;
  opts.want_cls_logits = true;
  forward_internal(*this, batch, opts, ws, fr);

  const auto row = fr.cls_logits.row(0);
  int argmax = 0;
  for (int c = 1; c < 3; ++c) {
    if (row(c) > row(argmax)) argmax = c;
  }
  if (predicted) *predicted = argmax;

  const double mx = row.maxCoeff();
  double total = 0.0;
  for (int c = 0; c < 3; ++c) total += std::exp(row(c) - mx);
  const double lse = mx + std::log(total);
  const double loss = lse - row(label);

  Matrix dcls(1, 3);
  for (int c = 0; c < 3; ++c) dcls(0, c) = std::exp(row(c) - lse);
  dcls(0, label) -= 1.0;
  dcls *= weight;

  backward_pass(*this, ws, nullptr, &dcls, grads);
  return loss;
}

int Model::classify(const std::vector<int32_t>& tokens, const Intervention* iv) const {
  TokenBatch batch;
  batch.rows = 1;
  batch.cols = static_cast<int>(tokens.size());
  batch.tokens = tokens;
  ForwardOptions opts;
  opts.want_lm_logits = false;
  opts.want_cls_logits = true;
  opts.intervention = iv;
  const ForwardResult fr = forward(batch, opts);
  int argmax = 0;
  for (int c = 1; c < 3; ++c) {
    if (fr.cls_logits(0, c) > fr.cls_logits(0, argmax)) argmax = c;
  }
  return argmax;
}

// --- optimizer ------------------------------------------------------------------

AdamW::AdamW(std::vector<ParamRef> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.mat->rows(), p.mat->cols()));
    v_.push_back(Matrix::Zero(p.mat->rows(), p.mat->cols()));
  }
}

double AdamW::lr_at(int step) const {
  const int warmup = std::max(1, static_cast<int>(std::lround(cfg_.warmup_frac * cfg_.total_steps)));
  if (step < warmup) return cfg_.lr * (step + 1) / warmup;
  if (cfg_.total_steps <= warmup) return cfg_.lr;
  const double frac =
      static_cast<double>(cfg_.total_steps - step) / static_cast<double>(cfg_.total_steps - warmup);
  return cfg_.lr * std::max(0.0, frac);
}

void AdamW::step(GradMap& grads) {
  // Global-norm clip over all trainable gradients, in registry order.
  double sq = 0.0;
  for (const auto& p : params_) {
    const Matrix* g = grads.find(*p.mat);
    if (g) sq += g->squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  const double clip_scale = (norm > cfg_.clip_norm && norm > 0.0) ? cfg_.clip_norm / norm : 1.0;

  const double lr = lr_at(t_);
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);

  for (size_t i = 0; i < params_.size(); ++i) {
    const ParamRef& p = params_[i];
    const Matrix* gp = grads.find(*p.mat);
    Matrix g = gp ? Matrix(*gp * clip_scale) : Matrix(Matrix::Zero(p.mat->rows(), p.mat->cols()));
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    const Matrix mhat = m_[i] / bc1;
    const Matrix vhat = v_[i] / bc2;
    *p.mat -= lr * mhat.cwiseQuotient((vhat.array().sqrt() + cfg_.eps).matrix());
    if (p.decay) *p.mat -= lr * cfg_.weight_decay * (*p.mat);
  }
}

// --- LM training -------------------------------------------------------------------

std::vector<size_t> interleave_schedule(const std::vector<size_t>& counts) {
  std::vector<size_t> schedule;
  const size_t total = [&] {
    size_t s = 0;
    for (size_t c : counts) s += c;
    return s;
  }();
  schedule.reserve(total);
  std::vector<double> acc(counts.size(), 0.0);
  std::vector<size_t> used(counts.size(), 0);
  for (size_t step = 0; step < total; ++step) {
    size_t best = counts.size();
    for (size_t l = 0; l < counts.size(); ++l) {
      if (used[l] >= counts[l]) continue;
      acc[l] += static_cast<double>(counts[l]);
      if (best == counts.size() || acc[l] > acc[best]) best = l;
    }
    // All non-exhausted accumulators were already bumped; pick the largest.
    schedule.push_back(best);
    acc[best] -= static_cast<double>(total);
    ++used[best];
  }
  return schedule;
}

LossTrace train_lm(Model& model, const std::vector<Corpus>& corpora, const LmTrainConfig& cfg) {
  if (corpora.empty()) throw UsageError("train_lm needs at least one corpus");
  if (cfg.steps < 1) throw UsageError("steps must be >= 1");
  const int t_max = model.config.t_max;
  for (const auto& c : corpora) {
    if (window_count(c, t_max) == 0) {
      throw UsageError("corpus '" + c.language + "' shorter than context");
    }
  }

  AdamWConfig opt_cfg = cfg.opt;
  opt_cfg.total_steps = cfg.steps;
  AdamW opt(model.base_params(), opt_cfg);

  LossTrace trace;
  trace.per_step.reserve(static_cast<size_t>(cfg.steps));

  int step = 0;
  for (uint64_t epoch = 0; step < cfg.steps; ++epoch) {
    // Per-epoch shuffled batches per language, then a proportional interleave.
    std::vector<std::vector<TokenBatch>> lang_batches;
    std::vector<size_t> counts;
    for (size_t li = 0; li < corpora.size(); ++li) {
      auto batches = batch_sequences(corpora[li], t_max, cfg.batch_size,
                                     derive_seed(cfg.seed, "lm-epoch", li, epoch));
      counts.push_back(batches.size());
      lang_batches.push_back(std::move(batches));
    }
    const std::vector<size_t> schedule = interleave_schedule(counts);
    std::vector<size_t> cursor(corpora.size(), 0);

    for (size_t lang : schedule) {
      if (step >= cfg.steps) break;
      const TokenBatch& batch = lang_batches[lang][cursor[lang]++];
      GradMap grads;
      const double loss = model.lm_loss_and_grads(batch, grads);
      if (!std::isfinite(loss)) {
        throw NumericError("LM training diverged at step " + std::to_string(step) +
                           " (non-finite loss)");
      }
      opt.step(grads);
      trace.per_step.push_back(loss);
      ++step;
    }
  }
  return trace;
}

// --- perplexity ------------------------------------------------------------------

namespace {
double window_mean_nll(const Model& model, const TokenBatch& window, const Intervention* iv) {
  ForwardOptions opts;
  opts.intervention = iv;
  const ForwardResult fr = model.forward(window, opts);
  const int cols = window.cols;
  const int vocab = model.config.vocab_size;
  double nll = 0.0;
  for (int t = 0; t + 1 < cols; ++t) {
    const auto row = fr.lm_logits.row(t);
    const double mx = row.maxCoeff();
    double total = 0.0;
    for (int v = 0; v < vocab; ++v) total += std::exp(row(v) - mx);
    nll += mx + std::log(total) - row(window.tokens[static_cast<size_t>(t) + 1]);
  }
  return nll / (cols - 1);
}
}  // namespace

double perplexity(const Model& model, const Corpus& corpus, const Intervention* intervention,
                  size_t max_windows, int n_threads) {
  const auto windows = windows_of(corpus, model.config.t_max);
  const size_t n = std::min(windows.size(), max_windows);
  if (n == 0) throw UsageError("corpus shorter than context");

  std::vector<double> nlls(n, 0.0);
  parallel_for(n, n_threads, [&](size_t w) {
    nlls[w] = window_mean_nll(model, windows[w], intervention);
  });
  double mean = 0.0;
  for (size_t w = 0; w < n; ++w) mean += nlls[w];
  mean /= static_cast<double>(n);
  if (!std::isfinite(mean)) throw NumericError("non-finite likelihood in perplexity");
  return std::exp(mean);
}

// --- fingerprint / checkpoint -------------------------------------------------------

std::string Model::fingerprint() const {
  Fnv1a64 h;
  const std::string cfg = dump_canonical(config.to_json());
  h.update(cfg);
  for (const auto& p : base_params()) {
    h.update(p.mat->data(), sizeof(double) * static_cast<size_t>(p.mat->size()));
  }
  return h.hex();
}

void save_checkpoint(const Model& model, const std::string& path) {
  const std::string cfg = dump_canonical(model.config.to_json());
  atomic_write_file(path, [&](std::ostream& os) {
    os.write(kCkptMagic, 8);
    write_u32(os, static_cast<uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    for (const auto& p : model.base_params()) {
      for (Eigen::Index i = 0; i < p.mat->size(); ++i) write_f64(os, p.mat->data()[i]);
    }
  });
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("missing checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::string(magic, 8) != std::string(kCkptMagic, 8)) {
    throw ArtifactError("bad checkpoint magic in " + path);
  }
  const uint32_t len = read_u32(f);
  std::string cfg_text(len, '\0');
  f.read(cfg_text.data(), len);
  if (!f) throw ArtifactError("truncated checkpoint: " + path);

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(cfg_text);
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("bad checkpoint config JSON: " + std::string(e.what()));
  }
  Model model = Model::init(ModelConfig::from_json(j));
  for (const auto& p : model.base_params()) {
    for (Eigen::Index i = 0; i < p.mat->size(); ++i) p.mat->data()[i] = read_f64(f);
  }
  // Must be exactly at EOF now.
  char extra;
  f.read(&extra, 1);
  if (!f.eof()) throw ArtifactError("trailing bytes in checkpoint: " + path);
  return model;
}

}  // namespace neuronscope

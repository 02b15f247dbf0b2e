#pragma once

// Plain-loop reimplementation of the forward pass, independent of the Eigen
// code it checks. Reads model parameters element by element; no Eigen
// expressions, no shared helpers.

#include <cmath>
#include <vector>

#include "neuronscope/model.hpp"

namespace naive {

using neuronscope::Model;

inline std::vector<std::vector<double>> forward_logits(const Model& m,
                                                       const std::vector<int32_t>& tokens,
                                                       bool skip_mlp) {
  const int T = static_cast<int>(tokens.size());
  const int d = m.config.d_model;
  const int f = m.config.d_ff;
  const int H = m.config.n_heads;
  const int hd = d / H;
  const double eps = neuronscope::kRmsNormEps;

  auto rmsnorm = [&](const std::vector<std::vector<double>>& x, const neuronscope::Matrix& g) {
    std::vector<std::vector<double>> out(T, std::vector<double>(d, 0.0));
    for (int t = 0; t < T; ++t) {
      double ms = 0.0;
      for (int i = 0; i < d; ++i) ms += x[t][i] * x[t][i];
      ms /= d;
      const double r = std::sqrt(ms + eps);
      for (int i = 0; i < d; ++i) out[t][i] = x[t][i] / r * g(0, i);
    }
    return out;
  };
  auto matmul = [&](const std::vector<std::vector<double>>& x, const neuronscope::Matrix& w) {
    const int out_dim = static_cast<int>(w.cols());
    const int in_dim = static_cast<int>(w.rows());
    std::vector<std::vector<double>> out(T, std::vector<double>(out_dim, 0.0));
    for (int t = 0; t < T; ++t) {
      for (int o = 0; o < out_dim; ++o) {
        double s = 0.0;
        for (int i = 0; i < in_dim; ++i) s += x[t][i] * w(i, o);
        out[t][o] = s;
      }
    }
    return out;
  };

  std::vector<std::vector<double>> x(T, std::vector<double>(d, 0.0));
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < d; ++i) x[t][i] = m.tok_emb(tokens[t], i) + m.pos_emb(t, i);
  }

  for (int l = 0; l < m.config.n_layers; ++l) {
    const auto& lp = m.layers[static_cast<size_t>(l)];
    const auto xn = rmsnorm(x, lp.attn_norm);
    const auto q = matmul(xn, lp.wq);
    const auto k = matmul(xn, lp.wk);
    const auto v = matmul(xn, lp.wv);

    std::vector<std::vector<double>> ctx(T, std::vector<double>(d, 0.0));
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int h = 0; h < H; ++h) {
      for (int t = 0; t < T; ++t) {
        std::vector<double> scores(static_cast<size_t>(t) + 1, 0.0);
        double mx = -1e300;
        for (int u = 0; u <= t; ++u) {
          double s = 0.0;
          for (int c = 0; c < hd; ++c) s += q[t][h * hd + c] * k[u][h * hd + c];
          scores[static_cast<size_t>(u)] = s * scale;
          if (scores[static_cast<size_t>(u)] > mx) mx = scores[static_cast<size_t>(u)];
        }
        double total = 0.0;
        for (int u = 0; u <= t; ++u) {
          scores[static_cast<size_t>(u)] = std::exp(scores[static_cast<size_t>(u)] - mx);
          total += scores[static_cast<size_t>(u)];
        }
        for (int u = 0; u <= t; ++u) {
          const double p = scores[static_cast<size_t>(u)] / total;
          for (int c = 0; c < hd; ++c) ctx[t][h * hd + c] += p * v[u][h * hd + c];
        }
      }
    }
    const auto o = matmul(ctx, lp.wo);
    for (int t = 0; t < T; ++t) {
      for (int i = 0; i < d; ++i) x[t][i] += o[t][i];
    }

    if (!skip_mlp) {
      const auto mn = rmsnorm(x, lp.mlp_norm);
      const auto gate = matmul(mn, lp.w_gate);
      const auto up = matmul(mn, lp.w_up);
      std::vector<std::vector<double>> prod(T, std::vector<double>(f, 0.0));
      for (int t = 0; t < T; ++t) {
        for (int j = 0; j < f; ++j) {
          const double z = gate[t][j];
          prod[t][j] = z / (1.0 + std::exp(-z)) * up[t][j];
        }
      }
      const auto down = matmul(prod, lp.w_down);
      for (int t = 0; t < T; ++t) {
        for (int i = 0; i < d; ++i) x[t][i] += down[t][i];
      }
    }
  }

  const auto fn = rmsnorm(x, m.final_norm);
  return matmul(fn, m.lm_head);
}

}  // namespace naive

// Double-precision reference implementations used as finite-difference
// oracles. Deliberately independent of the production ops: plain loops, no
// Eigen, no shared helpers.
#pragma once

#include <cmath>
#include <vector>

#include "oscar/transformer.hpp"

namespace oracle {

using dvec = std::vector<double>;

inline dvec to_d(const std::vector<float>& v) { return dvec(v.begin(), v.end()); }

inline dvec matmul(const dvec& a, int m, int k, const dvec& b, int n) {
  dvec c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; i++)
    for (int p = 0; p < k; p++) {
      double av = a[static_cast<size_t>(i) * k + p];
      for (int j = 0; j < n; j++) c[static_cast<size_t>(i) * n + j] += av * b[static_cast<size_t>(p) * n + j];
    }
  return c;
}

inline dvec rms_norm(const dvec& x, int L, int d, const dvec& gain, double eps = 1e-5) {
  dvec y(x.size());
  for (int r = 0; r < L; r++) {
    double ms = 0.0;
    for (int c = 0; c < d; c++) ms += x[static_cast<size_t>(r) * d + c] * x[static_cast<size_t>(r) * d + c];
    double s = 1.0 / std::sqrt(ms / d + eps);
    for (int c = 0; c < d; c++)
      y[static_cast<size_t>(r) * d + c] = x[static_cast<size_t>(r) * d + c] * gain[c] * s;
  }
  return y;
}

inline dvec rope(const dvec& x, int L, int width, const std::vector<int>& pos, int n_heads,
                 double theta = 10000.0) {
  int dh = width / n_heads, half = dh / 2;
  dvec y(x.size());
  for (int r = 0; r < L; r++)
    for (int h = 0; h < n_heads; h++)
      for (int i = 0; i < half; i++) {
        double freq = std::pow(theta, -2.0 * i / dh);
        double ang = pos[r] * freq;
        size_t base = static_cast<size_t>(r) * width + static_cast<size_t>(h) * dh;
        double a = x[base + i], b = x[base + i + half];
        y[base + i] = a * std::cos(ang) - b * std::sin(ang);
        y[base + i + half] = a * std::sin(ang) + b * std::cos(ang);
      }
  return y;
}

inline dvec causal_attention(const dvec& q, const dvec& k, const dvec& v, int L, int S,
                             int n_heads, int n_kv, int dh) {
  int group = n_heads / n_kv;
  int offset = S - L;
  dvec out(static_cast<size_t>(L) * n_heads * dh, 0.0);
  for (int h = 0; h < n_heads; h++) {
    int kvh = h / group;
    for (int i = 0; i < L; i++) {
      int limit = i + offset;
      dvec scores(limit + 1);
      double mx = -1e300;
      for (int j = 0; j <= limit; j++) {
        double s = 0.0;
        for (int c = 0; c < dh; c++)
          s += q[static_cast<size_t>(i) * n_heads * dh + h * dh + c] *
               k[static_cast<size_t>(j) * n_kv * dh + kvh * dh + c];
        scores[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, scores[j]);
      }
      double denom = 0.0;
      for (int j = 0; j <= limit; j++) denom += std::exp(scores[j] - mx);
      for (int j = 0; j <= limit; j++) {
        double p = std::exp(scores[j] - mx) / denom;
        for (int c = 0; c < dh; c++)
          out[static_cast<size_t>(i) * n_heads * dh + h * dh + c] +=
              p * v[static_cast<size_t>(j) * n_kv * dh + kvh * dh + c];
      }
    }
  }
  return out;
}

inline dvec silu(const dvec& x) {
  dvec y(x.size());
  for (size_t i = 0; i < x.size(); i++) y[i] = x[i] / (1.0 + std::exp(-x[i]));
  return y;
}

inline double cross_entropy_mean(const dvec& logits, int n, int V, const std::vector<int>& t) {
  double loss = 0.0;
  for (int r = 0; r < n; r++) {
    double mx = -1e300;
    for (int c = 0; c < V; c++) mx = std::max(mx, logits[static_cast<size_t>(r) * V + c]);
    double denom = 0.0;
    for (int c = 0; c < V; c++) denom += std::exp(logits[static_cast<size_t>(r) * V + c] - mx);
    loss += std::log(denom) + mx - logits[static_cast<size_t>(r) * V + t[r]];
  }
  return loss / n;
}

// Full forward of the production model's architecture in f64, reading the
// model's current (possibly perturbed) f32 weights. Returns mean CE of
// `targets` at `rows` of the logits.
inline double transformer_loss(const oscar::TransformerModel& m, const std::vector<int>& tokens,
                               const std::vector<int>& rows, const std::vector<int>& targets) {
  const auto& cfg = m.cfg;
  int L = static_cast<int>(tokens.size());
  int d = cfg.d_model;
  std::vector<int> pos(L);
  for (int i = 0; i < L; i++) pos[i] = i;

  dvec x(static_cast<size_t>(L) * d);
  for (int i = 0; i < L; i++)
    for (int c = 0; c < d; c++)
      x[static_cast<size_t>(i) * d + c] =
          m.embedding.data()[static_cast<size_t>(tokens[i]) * d + c];

  for (const auto& layer : m.layers) {
    dvec h = rms_norm(x, L, d, to_d(layer.attn_norm.data()));
    dvec q = matmul(h, L, d, to_d(layer.wq.w.data()), cfg.n_heads * cfg.d_head);
    dvec k = matmul(h, L, d, to_d(layer.wk.w.data()), cfg.kv_heads() * cfg.d_head);
    dvec v = matmul(h, L, d, to_d(layer.wv.w.data()), cfg.kv_heads() * cfg.d_head);
    q = rope(q, L, cfg.n_heads * cfg.d_head, pos, cfg.n_heads);
    k = rope(k, L, cfg.kv_heads() * cfg.d_head, pos, cfg.kv_heads());
    dvec attn = causal_attention(q, k, v, L, L, cfg.n_heads, cfg.kv_heads(), cfg.d_head);
    dvec o = matmul(attn, L, cfg.n_heads * cfg.d_head, to_d(layer.wo.w.data()), d);
    for (size_t i = 0; i < x.size(); i++) x[i] += o[i];
    dvec h2 = rms_norm(x, L, d, to_d(layer.mlp_norm.data()));
    dvec gate = silu(matmul(h2, L, d, to_d(layer.w_gate.w.data()), cfg.d_ff));
    dvec up = matmul(h2, L, d, to_d(layer.w_up.w.data()), cfg.d_ff);
    for (size_t i = 0; i < gate.size(); i++) gate[i] *= up[i];
    dvec down = matmul(gate, L, cfg.d_ff, to_d(layer.w_down.w.data()), d);
    for (size_t i = 0; i < x.size(); i++) x[i] += down[i];
  }

  int nr = static_cast<int>(rows.size());
  dvec hs(static_cast<size_t>(nr) * d);
  for (int r = 0; r < nr; r++)
    for (int c = 0; c < d; c++) hs[static_cast<size_t>(r) * d + c] = x[static_cast<size_t>(rows[r]) * d + c];
  hs = rms_norm(hs, nr, d, to_d(m.final_norm.data()));
  dvec logits(static_cast<size_t>(nr) * cfg.vocab_size, 0.0);
  for (int r = 0; r < nr; r++)
    for (int t = 0; t < cfg.vocab_size; t++) {
      double s = 0.0;
      for (int c = 0; c < d; c++)
        s += hs[static_cast<size_t>(r) * d + c] *
             static_cast<double>(m.embedding.data()[static_cast<size_t>(t) * d + c]);
      logits[static_cast<size_t>(r) * cfg.vocab_size + t] = s;
    }
  return cross_entropy_mean(logits, nr, cfg.vocab_size, targets);
}

}  // namespace oracle

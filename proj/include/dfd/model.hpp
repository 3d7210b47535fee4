#pragma once

// Built-in reference model: a small decoder-only, pre-LayerNorm transformer
// with tied embedding / LM head, exposing logit-lens taps at every block and
// an exact backward pass for training experiments.
//
// Weight generation: all parameters live in one flat buffer in the order
//   token embedding (V x d), position embedding (max_context x d),
//   per block { ln1.gain, ln1.bias, Wq, bq, Wk, bk, Wv, bv, Wo, bo,
//               ln2.gain, ln2.bias, W1 (f x d), b1, W2 (d x f), b2 },
//   final norm { gain, bias }
// and are filled sequentially from SplitMix64(seed). Each draw u in [0, 1)
// becomes s * (2u - 1), plus 1 for norm gains, with s per tensor:
//   token embedding 0.6, position embedding 0.3, norm gain/bias 0.1,
//   biases 0.02, Wq/Wk/Wv/W1 sqrt(3/d), Wo sqrt(3/d), W2 sqrt(3/f).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dfd/error.hpp"
#include "dfd/provider.hpp"
#include "dfd/rng.hpp"

namespace dfd {

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t d_model = 32;
  std::size_t num_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t vocab = 64;
  std::size_t max_context = 128;
  std::uint64_t seed = 0x0DFD5EEDULL;
  /// Debug mode: every block is the identity map, so all taps coincide.
  bool identity_blocks = false;
  /// Pass intermediate hidden states through the final norm before the head.
  bool normalize_taps = true;
  /// Multiplier on the init range of the block output projections (Wo, W2).
  double block_scale = 1.0;

  std::size_t d_ffn() const { return d_model * ffn_mult; }
  std::size_t head_dim() const { return d_model / num_heads; }
};

namespace detail {

inline constexpr double kNormEps = 1e-5;

// y[L x out] = x[L x in] * W^T + b, W row-major (out x in).
inline void linear(std::span<const double> x, std::size_t rows, std::size_t in,
                   const double* w, const double* b, std::size_t out, std::vector<double>& y) {
  y.assign(rows * out, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * in;
    double* yr = y.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wo = w + o * in;
      double acc = b ? b[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += wo[i] * xr[i];
      yr[o] = acc;
    }
  }
}

// Accumulates dW, db and writes dx (if non-null) for y = x W^T + b.
inline void linear_backward(std::span<const double> x, std::span<const double> dy,
                            std::size_t rows, std::size_t in, std::size_t out, const double* w,
                            double* dw, double* db, std::vector<double>* dx) {
  if (dx) dx->assign(rows * in, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * in;
    const double* dyr = dy.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dyr[o];
      if (g == 0.0) continue;
      if (db) db[o] += g;
      double* dwo = dw + o * in;
      const double* wo = w + o * in;
      for (std::size_t i = 0; i < in; ++i) dwo[i] += g * xr[i];
      if (dx) {
        double* dxr = dx->data() + r * in;
        for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wo[i];
      }
    }
  }
}

struct NormCache {
  std::vector<double> xhat;
  std::vector<double> rstd;
};

inline void layer_norm(std::span<const double> x, std::size_t rows, std::size_t d,
                       const double* gain, const double* bias, std::vector<double>& y,
                       NormCache* cache) {
  y.assign(rows * d, 0.0);
  if (cache) {
    cache->xhat.assign(rows * d, 0.0);
    cache->rstd.assign(rows, 0.0);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kNormEps);
    for (std::size_t i = 0; i < d; ++i) {
      const double xh = (xr[i] - mean) * rstd;
      y[r * d + i] = gain[i] * xh + bias[i];
      if (cache) cache->xhat[r * d + i] = xh;
    }
    if (cache) cache->rstd[r] = rstd;
  }
}

inline void layer_norm_backward(const NormCache& cache, std::span<const double> dy,
                                std::size_t rows, std::size_t d, const double* gain,
                                double* dgain, double* dbias, std::span<double> dx) {
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double g = dy[r * d + i];
      const double xh = cache.xhat[r * d + i];
      dgain[i] += g * xh;
      dbias[i] += g;
      dxhat[i] = g * gain[i];
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * xh;
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      dx[r * d + i] += cache.rstd[r] *
                       (dxhat[i] - mean_dxhat - cache.xhat[r * d + i] * mean_dxhat_xhat);
    }
  }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace detail

/// Cached forward state for one sequence; feeds tap readout and backprop.
struct Activations {
  struct Block {
    detail::NormCache ln1, ln2;
    std::vector<double> a, q, k, v, probs, o, x1, b, u, g;
  };

  std::vector<TokenId> tokens;  // the (possibly windowed) input
  std::size_t len = 0;
  /// hidden[0] is the embedding output, hidden[i] the output of block i.
  std::vector<std::vector<double>> hidden;
  std::vector<Block> blocks;
  detail::NormCache final_norm;
  std::vector<double> final_y;  // final-norm output of hidden[N]
};

class TinyTransformer : public LayerProvider {
 public:
  explicit TinyTransformer(ModelConfig cfg = {}) : cfg_(cfg) {
    require(cfg_.num_layers >= 2, ErrorKind::InvalidArgument, "model needs at least 2 blocks");
    require(cfg_.vocab >= 2, ErrorKind::InvalidArgument, "vocab must be >= 2");
    require(cfg_.num_heads >= 1 && cfg_.d_model % cfg_.num_heads == 0,
            ErrorKind::InvalidArgument, "d_model must be divisible by num_heads");
    require(cfg_.max_context >= 1 && cfg_.ffn_mult >= 1, ErrorKind::InvalidArgument,
            "bad model dimensions");
    layout();
    init_weights();
  }

  const ModelConfig& config() const { return cfg_; }

  ModelMeta meta() const override {
    ModelMeta m;
    m.num_layers = cfg_.num_layers;
    m.vocab_size = cfg_.vocab;
    m.d_model = cfg_.d_model;
    m.param_count = params_.size();
    m.name = cfg_.identity_blocks ? "builtin-identity" : "builtin";
    return m;
  }

  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }
  std::size_t parameter_count() const { return params_.size(); }

  Activations forward(std::span<const TokenId> context) const {
    require(!context.empty(), ErrorKind::InvalidArgument, "context must be nonempty");
    for (TokenId t : context) {
      require(t < cfg_.vocab, ErrorKind::InvalidArgument, "token id out of vocabulary");
    }
    const std::size_t d = cfg_.d_model;
    const std::size_t f = cfg_.d_ffn();
    const std::size_t nh = cfg_.num_heads;
    const std::size_t hd = cfg_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Activations act;
    const std::size_t start =
        context.size() > cfg_.max_context ? context.size() - cfg_.max_context : 0;
    act.tokens.assign(context.begin() + static_cast<std::ptrdiff_t>(start), context.end());
    const std::size_t L = act.tokens.size();
    act.len = L;
    act.hidden.resize(cfg_.num_layers + 1);
    act.blocks.resize(cfg_.num_layers);

    auto& h0 = act.hidden[0];
    h0.assign(L * d, 0.0);
    for (std::size_t t = 0; t < L; ++t) {
      const double* te = p(tok_emb_) + act.tokens[t] * d;
      const double* pe = p(pos_emb_) + t * d;
      for (std::size_t i = 0; i < d; ++i) h0[t * d + i] = te[i] + pe[i];
    }

    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      const auto& x = act.hidden[l];
      auto& out = act.hidden[l + 1];
      if (cfg_.identity_blocks) {
        out = x;
        continue;
      }
      const Offsets& w = blocks_[l];
      auto& c = act.blocks[l];
      detail::layer_norm(x, L, d, p(w.ln1_g), p(w.ln1_b), c.a, &c.ln1);
      detail::linear(c.a, L, d, p(w.wq), p(w.bq), d, c.q);
      detail::linear(c.a, L, d, p(w.wk), p(w.bk), d, c.k);
      detail::linear(c.a, L, d, p(w.wv), p(w.bv), d, c.v);

      c.probs.assign(nh * L * L, 0.0);
      c.o.assign(L * d, 0.0);
      for (std::size_t h = 0; h < nh; ++h) {
        for (std::size_t t = 0; t < L; ++t) {
          double* row = c.probs.data() + (h * L + t) * L;
          double peak = -1e300;
          for (std::size_t s = 0; s <= t; ++s) {
            double dot = 0.0;
            for (std::size_t j = 0; j < hd; ++j) {
              dot += c.q[t * d + h * hd + j] * c.k[s * d + h * hd + j];
            }
            row[s] = dot * scale;
            peak = std::max(peak, row[s]);
          }
          double z = 0.0;
          for (std::size_t s = 0; s <= t; ++s) {
            row[s] = std::exp(row[s] - peak);
            z += row[s];
          }
          for (std::size_t s = 0; s <= t; ++s) {
            row[s] /= z;
            for (std::size_t j = 0; j < hd; ++j) {
              c.o[t * d + h * hd + j] += row[s] * c.v[s * d + h * hd + j];
            }
          }
        }
      }

      std::vector<double> attn;
      detail::linear(c.o, L, d, p(w.wo), p(w.bo), d, attn);
      c.x1.resize(L * d);
      for (std::size_t i = 0; i < L * d; ++i) c.x1[i] = x[i] + attn[i];

      detail::layer_norm(c.x1, L, d, p(w.ln2_g), p(w.ln2_b), c.b, &c.ln2);
      detail::linear(c.b, L, d, p(w.w1), p(w.b1), f, c.u);
      c.g.resize(c.u.size());
      for (std::size_t i = 0; i < c.u.size(); ++i) c.g[i] = detail::gelu(c.u[i]);
      std::vector<double> ffn;
      detail::linear(c.g, L, f, p(w.w2), p(w.b2), d, ffn);
      out.resize(L * d);
      for (std::size_t i = 0; i < L * d; ++i) out[i] = c.x1[i] + ffn[i];
    }

    detail::layer_norm(act.hidden[cfg_.num_layers], L, d, p(lnf_g_), p(lnf_b_), act.final_y,
                       &act.final_norm);
    return act;
  }

  /// Logit-lens readout of block `layer` (1..N) at position `pos`.
  std::vector<double> tap_logits(const Activations& act, std::size_t layer, std::size_t pos) const {
    require(layer >= 1 && layer <= cfg_.num_layers, ErrorKind::InvalidArgument,
            "tap layer out of range");
    require(pos < act.len, ErrorKind::InvalidArgument, "tap position out of range");
    const std::size_t d = cfg_.d_model;
    std::span<const double> h(act.hidden[layer].data() + pos * d, d);
    std::vector<double> y;
    if (cfg_.normalize_taps || layer == cfg_.num_layers) {
      detail::layer_norm(h, 1, d, p(lnf_g_), p(lnf_b_), y, nullptr);
    } else {
      y.assign(h.begin(), h.end());
    }
    std::vector<double> logits;
    detail::linear(y, 1, d, p(tok_emb_), nullptr, cfg_.vocab, logits);
    return logits;
  }

  LayerLogits layer_logits_at(const Activations& act, std::size_t pos) const {
    std::vector<float> values;
    values.reserve(cfg_.num_layers * cfg_.vocab);
    for (std::size_t l = 1; l <= cfg_.num_layers; ++l) {
      for (double v : tap_logits(act, l, pos)) values.push_back(static_cast<float>(v));
    }
    return LayerLogits(cfg_.num_layers, cfg_.vocab, std::move(values), pos);
  }

  LayerLogits step(std::span<const TokenId> context) const override {
    const Activations act = forward(context);
    return layer_logits_at(act, act.len - 1);
  }

  /// Output-layer logits (double) at every position.
  std::vector<std::vector<double>> output_logits(const Activations& act) const {
    std::vector<std::vector<double>> out(act.len);
    const std::size_t d = cfg_.d_model;
    for (std::size_t t = 0; t < act.len; ++t) {
      detail::linear(std::span<const double>(act.final_y.data() + t * d, d), 1, d, p(tok_emb_),
                     nullptr, cfg_.vocab, out[t]);
    }
    return out;
  }

  /// Backpropagates dL/d(output logits) at every position into `grad`
  /// (accumulated; same layout as parameters()).
  void backward(const Activations& act, const std::vector<std::vector<double>>& dlogits,
                std::span<double> grad) const {
    require(grad.size() == params_.size(), ErrorKind::InvalidArgument, "gradient size mismatch");
    require(dlogits.size() == act.len, ErrorKind::InvalidArgument, "dlogits length mismatch");
    const std::size_t L = act.len;
    const std::size_t d = cfg_.d_model;
    const std::size_t f = cfg_.d_ffn();
    const std::size_t nh = cfg_.num_heads;
    const std::size_t hd = cfg_.head_dim();
    const std::size_t V = cfg_.vocab;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    double* gbase = grad.data();
    auto g = [&](std::size_t off) { return gbase + off; };

    std::vector<double> dlog_flat(L * V);
    for (std::size_t t = 0; t < L; ++t) {
      require(dlogits[t].size() == V, ErrorKind::InvalidArgument, "dlogits width mismatch");
      std::copy(dlogits[t].begin(), dlogits[t].end(), dlog_flat.begin() + t * V);
    }
    std::vector<double> dy;
    detail::linear_backward(act.final_y, dlog_flat, L, d, V, p(tok_emb_), g(tok_emb_), nullptr,
                            &dy);
    std::vector<double> dx(L * d, 0.0);
    detail::layer_norm_backward(act.final_norm, dy, L, d, p(lnf_g_), g(lnf_g_), g(lnf_b_), dx);

    for (std::size_t li = cfg_.num_layers; li-- > 0;) {
      if (cfg_.identity_blocks) continue;
      const Offsets& w = blocks_[li];
      const auto& c = act.blocks[li];
      // out = x1 + W2 gelu(W1 b + b1) + b2
      std::vector<double> dgl;
      detail::linear_backward(c.g, dx, L, f, d, p(w.w2), g(w.w2), g(w.b2), &dgl);
      for (std::size_t i = 0; i < dgl.size(); ++i) dgl[i] *= detail::gelu_grad(c.u[i]);
      std::vector<double> db;
      detail::linear_backward(c.b, dgl, L, d, f, p(w.w1), g(w.w1), g(w.b1), &db);
      std::vector<double> dx1 = dx;
      detail::layer_norm_backward(c.ln2, db, L, d, p(w.ln2_g), g(w.ln2_g), g(w.ln2_b), dx1);

      // x1 = x + Wo o + bo
      std::vector<double> dO;
      detail::linear_backward(c.o, dx1, L, d, d, p(w.wo), g(w.wo), g(w.bo), &dO);
      std::vector<double> dq(L * d, 0.0), dk(L * d, 0.0), dv(L * d, 0.0);
      std::vector<double> dp(L);
      for (std::size_t h = 0; h < nh; ++h) {
        for (std::size_t t = 0; t < L; ++t) {
          const double* row = c.probs.data() + (h * L + t) * L;
          double weighted = 0.0;
          for (std::size_t s = 0; s <= t; ++s) {
            double acc = 0.0;
            for (std::size_t j = 0; j < hd; ++j) {
              acc += dO[t * d + h * hd + j] * c.v[s * d + h * hd + j];
              dv[s * d + h * hd + j] += row[s] * dO[t * d + h * hd + j];
            }
            dp[s] = acc;
            weighted += row[s] * acc;
          }
          for (std::size_t s = 0; s <= t; ++s) {
            const double dscore = row[s] * (dp[s] - weighted) * scale;
            for (std::size_t j = 0; j < hd; ++j) {
              dq[t * d + h * hd + j] += dscore * c.k[s * d + h * hd + j];
              dk[s * d + h * hd + j] += dscore * c.q[t * d + h * hd + j];
            }
          }
        }
      }
      std::vector<double> da(L * d, 0.0), tmp;
      detail::linear_backward(c.a, dq, L, d, d, p(w.wq), g(w.wq), g(w.bq), &tmp);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += tmp[i];
      detail::linear_backward(c.a, dk, L, d, d, p(w.wk), g(w.wk), g(w.bk), &tmp);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += tmp[i];
      detail::linear_backward(c.a, dv, L, d, d, p(w.wv), g(w.wv), g(w.bv), &tmp);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += tmp[i];
      dx = dx1;
      detail::layer_norm_backward(c.ln1, da, L, d, p(w.ln1_g), g(w.ln1_g), g(w.ln1_b), dx);
    }

    for (std::size_t t = 0; t < L; ++t) {
      double* te = g(tok_emb_) + act.tokens[t] * d;
      double* pe = g(pos_emb_) + t * d;
      for (std::size_t i = 0; i < d; ++i) {
        te[i] += dx[t * d + i];
        pe[i] += dx[t * d + i];
      }
    }
  }

 private:
  struct Offsets {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  const double* p(std::size_t off) const { return params_.data() + off; }

  void layout() {
    const std::size_t d = cfg_.d_model;
    const std::size_t f = cfg_.d_ffn();
    std::size_t off = 0;
    auto take = [&](std::size_t n) {
      const std::size_t at = off;
      off += n;
      return at;
    };
    tok_emb_ = take(cfg_.vocab * d);
    pos_emb_ = take(cfg_.max_context * d);
    blocks_.clear();
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      Offsets o{};
      o.ln1_g = take(d);
      o.ln1_b = take(d);
      o.wq = take(d * d);
      o.bq = take(d);
      o.wk = take(d * d);
      o.bk = take(d);
      o.wv = take(d * d);
      o.bv = take(d);
      o.wo = take(d * d);
      o.bo = take(d);
      o.ln2_g = take(d);
      o.ln2_b = take(d);
      o.w1 = take(f * d);
      o.b1 = take(f);
      o.w2 = take(d * f);
      o.b2 = take(d);
      blocks_.push_back(o);
    }
    lnf_g_ = take(d);
    lnf_b_ = take(d);
    params_.assign(off, 0.0);
  }

  void init_weights() {
    SplitMix64 rng(cfg_.seed);
    const double d = static_cast<double>(cfg_.d_model);
    const double f = static_cast<double>(cfg_.d_ffn());
    auto fill = [&](std::size_t off, std::size_t n, double s, double centre) {
      for (std::size_t i = 0; i < n; ++i) params_[off + i] = centre + s * (2.0 * rng.uniform() - 1.0);
    };
    const std::size_t dm = cfg_.d_model;
    const std::size_t fm = cfg_.d_ffn();
    fill(tok_emb_, cfg_.vocab * dm, 0.6, 0.0);
    fill(pos_emb_, cfg_.max_context * dm, 0.3, 0.0);
    const double sd = std::sqrt(3.0 / d);
    const double sf = std::sqrt(3.0 / f);
    for (const Offsets& o : blocks_) {
      fill(o.ln1_g, dm, 0.1, 1.0);
      fill(o.ln1_b, dm, 0.1, 0.0);
      fill(o.wq, dm * dm, sd, 0.0);
      fill(o.bq, dm, 0.02, 0.0);
      fill(o.wk, dm * dm, sd, 0.0);
      fill(o.bk, dm, 0.02, 0.0);
      fill(o.wv, dm * dm, sd, 0.0);
      fill(o.bv, dm, 0.02, 0.0);
      fill(o.wo, dm * dm, sd * cfg_.block_scale, 0.0);
      fill(o.bo, dm, 0.02, 0.0);
      fill(o.ln2_g, dm, 0.1, 1.0);
      fill(o.ln2_b, dm, 0.1, 0.0);
      fill(o.w1, fm * dm, sd, 0.0);
      fill(o.b1, fm, 0.02, 0.0);
      fill(o.w2, dm * fm, sf * cfg_.block_scale, 0.0);
      fill(o.b2, dm, 0.02, 0.0);
    }
    fill(lnf_g_, dm, 0.1, 1.0);
    fill(lnf_b_, dm, 0.1, 0.0);
  }

  ModelConfig cfg_;
  std::vector<double> params_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0;
  std::vector<Offsets> blocks_;
};

}  // namespace dfd

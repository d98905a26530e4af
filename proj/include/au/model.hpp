#pragma once

// Tiny decoder-only transformer with explicit forward/backward passes.
//
// Layout is pre-LayerNorm GPT style:
//   x = tok_emb[y] + pos_emb[t]
//   per layer: x += Wo * attn(LN1(x));  x += W2 * gelu(W1 * LN2(x) + b1) + b2
//   logits = LNf(x) * Wout + bout
// All parameters live in one flat array so optimizers, hashing and
// finite-difference probes can treat them uniformly.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "au/common.hpp"

namespace au::model {

enum class Precision { Double, Single };

inline std::string_view precision_name(Precision p) { return p == Precision::Double ? "double" : "single"; }
inline Precision precision_from_name(std::string_view s) {
  if (s == "double") return Precision::Double;
  if (s == "single") return Precision::Single;
  throw ConfigError("unknown precision: " + std::string(s));
}

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int width = 64;
  int context_length = 128;
  int vocab_size = 256;
  int mlp_mult = 4;
  Precision precision = Precision::Double;

  int head_dim() const { return width / n_heads; }
  int hidden() const { return width * mlp_mult; }
  bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& c) {
  if (c.vocab_size <= 0) throw ConfigError("model config: vocab_size must be positive");
  if (c.n_layers <= 0 || c.n_heads <= 0 || c.width <= 0 || c.mlp_mult <= 0)
    throw ConfigError("model config: layer, head, width and mlp sizes must be positive");
  if (c.width % c.n_heads != 0) throw ConfigError("model config: width must be divisible by n_heads");
  if (c.context_length <= 0) throw ConfigError("model config: context_length must be positive");
}

inline ordered_json to_json(const ModelConfig& c) {
  return ordered_json{{"n_layers", c.n_layers},         {"n_heads", c.n_heads},
                      {"width", c.width},               {"context_length", c.context_length},
                      {"vocab_size", c.vocab_size},     {"mlp_mult", c.mlp_mult},
                      {"precision", precision_name(c.precision)}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.width = j.at("width").get<int>();
  c.context_length = j.at("context_length").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.mlp_mult = j.at("mlp_mult").get<int>();
  c.precision = precision_from_name(j.at("precision").get<std::string>());
  return c;
}

struct ArraySpec {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

// Offsets of every named array inside the flat parameter vector.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0, w_out = 0, b_out = 0;
  std::vector<Layer> layers;
  std::vector<ArraySpec> arrays;
  std::size_t total = 0;

  explicit ParamLayout(const ModelConfig& c = {}) {
    const auto d = static_cast<std::size_t>(c.width);
    const auto f = static_cast<std::size_t>(c.hidden());
    const auto v = static_cast<std::size_t>(c.vocab_size);
    auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
      arrays.push_back({name, total, rows, cols});
      total += rows * cols;
      return arrays.back().offset;
    };
    tok_emb = add("tok_emb", v, d);
    pos_emb = add("pos_emb", static_cast<std::size_t>(c.context_length), d);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Layer L{};
      L.ln1_g = add(p + "ln1.gain", 1, d);
      L.ln1_b = add(p + "ln1.bias", 1, d);
      L.wq = add(p + "attn.wq", d, d);
      L.wk = add(p + "attn.wk", d, d);
      L.wv = add(p + "attn.wv", d, d);
      L.wo = add(p + "attn.wo", d, d);
      L.bo = add(p + "attn.bo", 1, d);
      L.ln2_g = add(p + "ln2.gain", 1, d);
      L.ln2_b = add(p + "ln2.bias", 1, d);
      L.w1 = add(p + "mlp.w1", d, f);
      L.b1 = add(p + "mlp.b1", 1, f);
      L.w2 = add(p + "mlp.w2", f, d);
      L.b2 = add(p + "mlp.b2", 1, d);
      layers.push_back(L);
    }
    lnf_g = add("lnf.gain", 1, d);
    lnf_b = add("lnf.bias", 1, d);
    w_out = add("out.w", d, v);
    b_out = add("out.b", 1, v);
  }
};

template <class Real>
struct Parameters {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<Real> data;

  std::size_t size() const { return data.size(); }
  std::span<const Real> view() const { return data; }
  bool operator==(const Parameters&) const = default;
};

template <class Real>
Parameters<Real> init_model(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  const ParamLayout layout(config);
  Parameters<Real> p;
  p.config = config;
  p.seed = seed;
  p.data.assign(layout.total, Real(0));
  Rng rng(derive_seed(seed, 0xA1));
  const double std_base = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * config.n_layers);
  for (const auto& a : layout.arrays) {
    const bool gain = a.name.ends_with("gain");
    const bool bias = a.name.ends_with("bias") || a.name.ends_with(".b") || a.name.ends_with(".bo") ||
                      a.name.ends_with(".b1") || a.name.ends_with(".b2");
    const bool resid = a.name.ends_with("attn.wo") || a.name.ends_with("mlp.w2");
    for (std::size_t i = 0; i < a.size(); ++i) {
      Real& x = p.data[a.offset + i];
      if (gain)
        x = Real(1);
      else if (bias)
        x = Real(0);
      else
        x = static_cast<Real>(rng.normal() * (resid ? std_resid : std_base));
    }
  }
  return p;
}

inline std::size_t parameter_count(const ModelConfig& c) { return ParamLayout(c).total; }

template <class Real>
std::string parameter_hash(const Parameters<Real>& p) {
  return Sha256().update(p.data.data(), p.data.size() * sizeof(Real)).hex();
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------
namespace kernel {

// Fixed 8-lane partial sums: vectorizes without reassociation flags and
// keeps a fixed summation order.
template <class Real>
inline Real dot(const Real* __restrict a, const Real* __restrict b, int n) {
  Real acc[8] = {};
  int i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  Real s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

constexpr double kLnEps = 1e-5;

template <class Real>
inline void layer_norm(const Real* x, const Real* g, const Real* b, int n, Real* xhat, Real* rstd, Real* y) {
  Real mean = 0;
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= Real(n);
  Real var = 0;
  for (int i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= Real(n);
  const Real r = Real(1) / std::sqrt(var + Real(kLnEps));
  *rstd = r;
  for (int i = 0; i < n; ++i) {
    xhat[i] = (x[i] - mean) * r;
    y[i] = xhat[i] * g[i] + b[i];
  }
}

template <class Real>
inline void layer_norm_backward(const Real* dy, const Real* xhat, Real rstd, const Real* g, int n, Real* dx,
                                Real* dg, Real* db, Real* scratch) {
  Real sum_d = 0, sum_dx = 0;
  for (int i = 0; i < n; ++i) {
    dg[i] += dy[i] * xhat[i];
    db[i] += dy[i];
    scratch[i] = dy[i] * g[i];
    sum_d += scratch[i];
    sum_dx += scratch[i] * xhat[i];
  }
  const Real inv_n = Real(1) / Real(n);
  for (int i = 0; i < n; ++i) dx[i] += rstd * (scratch[i] - inv_n * sum_d - xhat[i] * inv_n * sum_dx);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <class Real>
inline Real gelu(Real u) {
  return Real(0.5) * u * (Real(1) + std::tanh(Real(kGeluC) * (u + Real(kGeluA) * u * u * u)));
}

template <class Real>
inline Real gelu_grad(Real u) {
  const Real th = std::tanh(Real(kGeluC) * (u + Real(kGeluA) * u * u * u));
  return Real(0.5) * (Real(1) + th) +
         Real(0.5) * u * (Real(1) - th * th) * Real(kGeluC) * (Real(1) + Real(3 * kGeluA) * u * u);
}

// In-place log-softmax over n logits.
template <class Real>
inline void log_softmax(const Real* logits, int n, Real* out) {
  Real mx = logits[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  Real s = 0;
  for (int i = 0; i < n; ++i) s += std::exp(logits[i] - mx);
  const Real lse = mx + std::log(s);
  for (int i = 0; i < n; ++i) out[i] = logits[i] - lse;
}


// Y[T x out] += X[T x in] B[in x out], all row-major with the given leading
// dimensions. Register-tiled; every output element is summed sequentially
// over i starting from its current value, so tiling never changes results.
template <class Real>
inline void gemm_acc(const Real* __restrict X, int ldx, const Real* __restrict B, int ldb, int T, int in, int out,
                     Real* __restrict Y, int ldy) {
  constexpr int TR = 4, TC = 8;
  const int t_full = T - T % TR, j_full = out - out % TC;
  for (int t = 0; t < t_full; t += TR) {
    for (int j = 0; j < j_full; j += TC) {
      Real acc[TR][TC];
      for (int r = 0; r < TR; ++r)
        for (int c = 0; c < TC; ++c) acc[r][c] = Y[static_cast<std::size_t>(t + r) * ldy + j + c];
      for (int i = 0; i < in; ++i) {
        const Real* b = B + static_cast<std::size_t>(i) * ldb + j;
        for (int r = 0; r < TR; ++r) {
          const Real x = X[static_cast<std::size_t>(t + r) * ldx + i];
          for (int c = 0; c < TC; ++c) acc[r][c] += x * b[c];
        }
      }
      for (int r = 0; r < TR; ++r)
        for (int c = 0; c < TC; ++c) Y[static_cast<std::size_t>(t + r) * ldy + j + c] = acc[r][c];
    }
  }
  auto edge = [&](int t, int j) {
    Real acc = Y[static_cast<std::size_t>(t) * ldy + j];
    for (int i = 0; i < in; ++i)
      acc += X[static_cast<std::size_t>(t) * ldx + i] * B[static_cast<std::size_t>(i) * ldb + j];
    Y[static_cast<std::size_t>(t) * ldy + j] = acc;
  };
  for (int t = 0; t < t_full; ++t)
    for (int j = j_full; j < out; ++j) edge(t, j);
  for (int t = t_full; t < T; ++t) {
    for (int j = 0; j < j_full; j += TC) {
      Real acc[TC];
      for (int c = 0; c < TC; ++c) acc[c] = Y[static_cast<std::size_t>(t) * ldy + j + c];
      for (int i = 0; i < in; ++i) {
        const Real x = X[static_cast<std::size_t>(t) * ldx + i];
        const Real* b = B + static_cast<std::size_t>(i) * ldb + j;
        for (int c = 0; c < TC; ++c) acc[c] += x * b[c];
      }
      for (int c = 0; c < TC; ++c) Y[static_cast<std::size_t>(t) * ldy + j + c] = acc[c];
    }
    for (int j = j_full; j < out; ++j) edge(t, j);
  }
}

template <class Real>
inline void transpose(const Real* __restrict A, int rows, int cols, Real* __restrict At) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) At[static_cast<std::size_t>(c) * rows + r] = A[static_cast<std::size_t>(r) * cols + c];
}

template <class Real>
inline std::vector<Real>& scratch_buffer(std::size_t n) {
  thread_local std::vector<Real> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

// Y[T x out] (+)= X[T x in] W[in x out]
template <class Real>
inline void matmul(const Real* X, const Real* W, int T, int in, int out, Real* Y, bool accumulate) {
  if (!accumulate) std::fill(Y, Y + static_cast<std::size_t>(T) * out, Real(0));
  gemm_acc(X, in, W, out, T, in, out, Y, out);
}

// dX[T x in] += dY[T x out] W^T
template <class Real>
inline void matmul_bt(const Real* dY, const Real* W, int T, int in, int out, Real* dX) {
  auto& Wt = scratch_buffer<Real>(static_cast<std::size_t>(in) * out);
  transpose(W, in, out, Wt.data());
  gemm_acc(dY, out, Wt.data(), in, T, out, in, dX, in);
}

// dW[in x out] += X^T dY over T rows
template <class Real>
inline void matmul_at(const Real* X, const Real* dY, int T, int in, int out, Real* dW) {
  auto& Xt = scratch_buffer<Real>(static_cast<std::size_t>(in) * T);
  transpose(X, T, in, Xt.data());
  gemm_acc(Xt.data(), T, dY, out, in, T, out, dW, out);
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Trace: activations for one sequence. Positions are causal, so a trace can
// be extended token by token (generation) and reused across sequences.
// ---------------------------------------------------------------------------
template <class Real>
class Trace {
 public:
  explicit Trace(const ModelConfig& c) : config_(c) {
    const std::size_t C = static_cast<std::size_t>(c.context_length);
    const std::size_t d = static_cast<std::size_t>(c.width);
    const std::size_t f = static_cast<std::size_t>(c.hidden());
    const std::size_t v = static_cast<std::size_t>(c.vocab_size);
    layers_.resize(static_cast<std::size_t>(c.n_layers));
    for (auto& L : layers_) {
      for (auto* vec : {&L.x_in, &L.xhat1, &L.a, &L.q, &L.k, &L.v, &L.o, &L.h, &L.xhat2, &L.b}) vec->assign(C * d, 0);
      L.rstd1.assign(C, 0);
      L.rstd2.assign(C, 0);
      L.u.assign(C * f, 0);
      L.g.assign(C * f, 0);
      L.att.assign(static_cast<std::size_t>(c.n_heads) * C * C, 0);
    }
    x_final_.assign(C * d, 0);
    xhat_f_.assign(C * d, 0);
    rstd_f_.assign(C, 0);
    f_.assign(C * d, 0);
    logits_.assign(C * v, 0);
    logp_.assign(C * v, 0);
  }

  int length() const { return length_; }
  int vocab() const { return config_.vocab_size; }
  const ModelConfig& config() const { return config_; }
  const TokenSeq& tokens() const { return tokens_; }
  void reset() {
    length_ = 0;
    tokens_.clear();
  }

  const Real* logits(int t) const { return logits_.data() + static_cast<std::size_t>(t) * config_.vocab_size; }
  const Real* logp(int t) const { return logp_.data() + static_cast<std::size_t>(t) * config_.vocab_size; }

 private:
  template <class R>
  friend class Transformer;

  struct LayerTrace {
    std::vector<Real> x_in, xhat1, rstd1, a, q, k, v, att, o, h, xhat2, rstd2, b, u, g;
  };

  ModelConfig config_;
  int length_ = 0;
  TokenSeq tokens_;
  std::vector<LayerTrace> layers_;
  std::vector<Real> x_final_, xhat_f_, rstd_f_, f_, logits_, logp_;
};

template <class Real>
class Transformer {
 public:
  // Extends `tr` so that it covers `tokens`. The trace must already hold a
  // prefix of `tokens` (or be empty).
  static void forward(const Parameters<Real>& P, std::span<const TokenId> tokens, Trace<Real>& tr) {
    const ModelConfig& c = P.config;
    if (static_cast<int>(tokens.size()) > c.context_length)
      throw LengthError("sequence of length " + std::to_string(tokens.size()) + " exceeds context length " +
                        std::to_string(c.context_length));
    if (!(tr.config_ == c)) throw ConfigError("trace/model config mismatch");
    if (tr.length_ > static_cast<int>(tokens.size()) ||
        !std::equal(tr.tokens_.begin(), tr.tokens_.end(), tokens.begin()))
      tr.reset();
    const ParamLayout& Ly = layout(c);
    const int d = c.width, H = c.n_heads, hd = c.head_dim(), F = c.hidden(), V = c.vocab_size,
              C = c.context_length;
    const Real* W = P.data.data();
    const Real scale = Real(1) / std::sqrt(Real(hd));

    const int t0 = tr.length_;
    const int T = static_cast<int>(tokens.size());
    if (t0 == T) return;
    const int n = T - t0;
    const std::size_t o_d = static_cast<std::size_t>(t0) * d, o_f = static_cast<std::size_t>(t0) * F;
    for (int t = t0; t < T; ++t) {
      const TokenId tok = tokens[static_cast<std::size_t>(t)];
      if (tok < 0 || tok >= V) throw ArgumentError("token id out of vocabulary range");
      Real* x = tr.layers_[0].x_in.data() + static_cast<std::size_t>(t) * d;
      const Real* te = W + Ly.tok_emb + static_cast<std::size_t>(tok) * d;
      const Real* pe = W + Ly.pos_emb + static_cast<std::size_t>(t) * d;
      for (int i = 0; i < d; ++i) x[i] = te[i] + pe[i];
    }

    for (int l = 0; l < c.n_layers; ++l) {
      auto& L = tr.layers_[static_cast<std::size_t>(l)];
      const auto& O = Ly.layers[static_cast<std::size_t>(l)];
      for (int t = t0; t < T; ++t) {
        const std::size_t td = static_cast<std::size_t>(t) * d;
        kernel::layer_norm(L.x_in.data() + td, W + O.ln1_g, W + O.ln1_b, d, L.xhat1.data() + td,
                           L.rstd1.data() + t, L.a.data() + td);
      }
      kernel::matmul(L.a.data() + o_d, W + O.wq, n, d, d, L.q.data() + o_d, false);
      kernel::matmul(L.a.data() + o_d, W + O.wk, n, d, d, L.k.data() + o_d, false);
      kernel::matmul(L.a.data() + o_d, W + O.wv, n, d, d, L.v.data() + o_d, false);
      for (int t = t0; t < T; ++t) {
        const std::size_t td = static_cast<std::size_t>(t) * d;
        const Real* q = L.q.data() + td;
        Real* o = L.o.data() + td;
        std::fill(o, o + d, Real(0));
        for (int h = 0; h < H; ++h) {
          Real* p = L.att.data() + (static_cast<std::size_t>(h) * C + t) * C;
          Real mx = -std::numeric_limits<Real>::infinity();
          for (int j = 0; j <= t; ++j) {
            p[j] = scale * kernel::dot(q + h * hd, L.k.data() + static_cast<std::size_t>(j) * d + h * hd, hd);
            mx = std::max(mx, p[j]);
          }
          Real s = 0;
          for (int j = 0; j <= t; ++j) {
            p[j] = std::exp(p[j] - mx);
            s += p[j];
          }
          for (int j = 0; j <= t; ++j) {
            p[j] /= s;
            const Real* vj = L.v.data() + static_cast<std::size_t>(j) * d + h * hd;
            for (int e = 0; e < hd; ++e) o[h * hd + e] += p[j] * vj[e];
          }
        }
      }
      kernel::matmul(L.o.data() + o_d, W + O.wo, n, d, d, L.h.data() + o_d, false);
      for (int t = t0; t < T; ++t) {
        const std::size_t td = static_cast<std::size_t>(t) * d;
        Real* hres = L.h.data() + td;
        const Real* xin = L.x_in.data() + td;
        for (int i = 0; i < d; ++i) hres[i] += W[O.bo + i] + xin[i];
        kernel::layer_norm(hres, W + O.ln2_g, W + O.ln2_b, d, L.xhat2.data() + td, L.rstd2.data() + t,
                           L.b.data() + td);
      }
      kernel::matmul(L.b.data() + o_d, W + O.w1, n, d, F, L.u.data() + o_f, false);
      for (std::size_t i = o_f; i < static_cast<std::size_t>(T) * F; ++i) {
        const std::size_t col = (i - o_f) % static_cast<std::size_t>(F);
        L.u[i] += W[O.b1 + col];
        L.g[i] = kernel::gelu(L.u[i]);
      }
      Real* out = (l + 1 < c.n_layers) ? tr.layers_[static_cast<std::size_t>(l + 1)].x_in.data() : tr.x_final_.data();
      kernel::matmul(L.g.data() + o_f, W + O.w2, n, F, d, out + o_d, false);
      for (int t = t0; t < T; ++t) {
        const std::size_t td = static_cast<std::size_t>(t) * d;
        for (int i = 0; i < d; ++i) out[td + i] += W[O.b2 + i] + L.h[td + i];
      }
    }

    for (int t = t0; t < T; ++t) {
      const std::size_t td = static_cast<std::size_t>(t) * d;
      kernel::layer_norm(tr.x_final_.data() + td, W + Ly.lnf_g, W + Ly.lnf_b, d, tr.xhat_f_.data() + td,
                         tr.rstd_f_.data() + t, tr.f_.data() + td);
      std::copy(W + Ly.b_out, W + Ly.b_out + V, tr.logits_.data() + static_cast<std::size_t>(t) * V);
    }
    kernel::matmul(tr.f_.data() + o_d, W + Ly.w_out, n, d, V, tr.logits_.data() + static_cast<std::size_t>(t0) * V,
                   true);
    for (int t = t0; t < T; ++t) {
      const std::size_t tv = static_cast<std::size_t>(t) * V;
      kernel::log_softmax(tr.logits_.data() + tv, V, tr.logp_.data() + tv);
      tr.tokens_.push_back(tokens[static_cast<std::size_t>(t)]);
    }
    tr.length_ = T;
  }

  // Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logits) for
  // every traced position (row-major, length x vocab).
  static void backward(const Parameters<Real>& P, const Trace<Real>& tr, std::span<const Real> dlogits,
                       std::span<Real> grad) {
    const ModelConfig& c = P.config;
    const ParamLayout& Ly = layout(c);
    const int T = tr.length_;
    const int d = c.width, H = c.n_heads, hd = c.head_dim(), F = c.hidden(), V = c.vocab_size,
              C = c.context_length;
    if (dlogits.size() != static_cast<std::size_t>(T) * V) throw ArgumentError("backward: dlogits shape mismatch");
    if (grad.size() != P.data.size()) throw ArgumentError("backward: gradient buffer size mismatch");
    const Real* W = P.data.data();
    Real* G = grad.data();
    const Real scale = Real(1) / std::sqrt(Real(hd));

    const std::size_t Td = static_cast<std::size_t>(T) * d;
    std::vector<Real> dx(Td, 0), scratch(static_cast<std::size_t>(std::max(d, F)), 0);

    // Output head and final norm.
    kernel::matmul_at(tr.f_.data(), dlogits.data(), T, d, V, G + Ly.w_out);
    std::vector<Real> df(Td, 0);
    kernel::matmul_bt(dlogits.data(), W + Ly.w_out, T, d, V, df.data());
    for (int t = 0; t < T; ++t) {
      const Real* dl = dlogits.data() + static_cast<std::size_t>(t) * V;
      for (int j = 0; j < V; ++j) G[Ly.b_out + j] += dl[j];
      const std::size_t td = static_cast<std::size_t>(t) * d;
      kernel::layer_norm_backward(df.data() + td, tr.xhat_f_.data() + td, tr.rstd_f_[t], W + Ly.lnf_g, d,
                                  dx.data() + td, G + Ly.lnf_g, G + Ly.lnf_b, scratch.data());
    }

    std::vector<Real> dh(Td), da(Td), dq(Td), dk(Td), dv(Td), dov(Td), db(Td);
    std::vector<Real> du(static_cast<std::size_t>(T) * F);
    std::vector<Real> dp(static_cast<std::size_t>(T));
    for (int l = c.n_layers - 1; l >= 0; --l) {
      const auto& L = tr.layers_[static_cast<std::size_t>(l)];
      const auto& O = Ly.layers[static_cast<std::size_t>(l)];
      // MLP block: x_out = h + W2 gelu(W1 LN2(h) + b1) + b2
      dh = dx;
      std::fill(db.begin(), db.end(), Real(0));
      kernel::matmul_at(L.g.data(), dx.data(), T, F, d, G + O.w2);
      std::fill(du.begin(), du.end(), Real(0));
      kernel::matmul_bt(dx.data(), W + O.w2, T, F, d, du.data());
      for (int t = 0; t < T; ++t) {
        const std::size_t td = static_cast<std::size_t>(t) * d, tf = static_cast<std::size_t>(t) * F;
        for (int i = 0; i < d; ++i) G[O.b2 + i] += dx[td + i];
        for (int i = 0; i < F; ++i) {
          du[tf + i] *= kernel::gelu_grad(L.u[tf + i]);
          G[O.b1 + i] += du[tf + i];
        }
      }
      kernel::matmul_at(L.b.data(), du.data(), T, d, F, G + O.w1);
      kernel::matmul_bt(du.data(), W + O.w1, T, d, F, db.data());
      for (int t = 0; t < T; ++t) {
        const std::size_t td = static_cast<std::size_t>(t) * d;
        kernel::layer_norm_backward(db.data() + td, L.xhat2.data() + td, L.rstd2[t], W + O.ln2_g, d,
                                    dh.data() + td, G + O.ln2_g, G + O.ln2_b, scratch.data());
      }
      // Attention block: h = x_in + Wo attn(LN1(x_in)) + bo
      dx = dh;
      std::fill(dov.begin(), dov.end(), Real(0));
      for (int t = 0; t < T; ++t)
        for (int i = 0; i < d; ++i) G[O.bo + i] += dh[static_cast<std::size_t>(t) * d + i];
      kernel::matmul_at(L.o.data(), dh.data(), T, d, d, G + O.wo);
      kernel::matmul_bt(dh.data(), W + O.wo, T, d, d, dov.data());
      std::fill(dq.begin(), dq.end(), Real(0));
      std::fill(dk.begin(), dk.end(), Real(0));
      std::fill(dv.begin(), dv.end(), Real(0));
      for (int h = 0; h < H; ++h) {
        for (int t = 0; t < T; ++t) {
          const Real* p = L.att.data() + (static_cast<std::size_t>(h) * C + t) * C;
          const Real* dot_ = dov.data() + static_cast<std::size_t>(t) * d + h * hd;
          Real sum = 0;
          for (int j = 0; j <= t; ++j) {
            dp[static_cast<std::size_t>(j)] = kernel::dot(dot_, L.v.data() + static_cast<std::size_t>(j) * d + h * hd, hd);
            sum += p[j] * dp[static_cast<std::size_t>(j)];
          }
          const Real* qt = L.q.data() + static_cast<std::size_t>(t) * d + h * hd;
          Real* dqt = dq.data() + static_cast<std::size_t>(t) * d + h * hd;
          for (int j = 0; j <= t; ++j) {
            const Real ds = p[j] * (dp[static_cast<std::size_t>(j)] - sum) * scale;
            const Real* kj = L.k.data() + static_cast<std::size_t>(j) * d + h * hd;
            Real* dkj = dk.data() + static_cast<std::size_t>(j) * d + h * hd;
            Real* dvj = dv.data() + static_cast<std::size_t>(j) * d + h * hd;
            for (int e = 0; e < hd; ++e) {
              dqt[e] += ds * kj[e];
              dkj[e] += ds * qt[e];
              dvj[e] += p[j] * dot_[e];
            }
          }
        }
      }
      std::fill(da.begin(), da.end(), Real(0));
      kernel::matmul_at(L.a.data(), dq.data(), T, d, d, G + O.wq);
      kernel::matmul_at(L.a.data(), dk.data(), T, d, d, G + O.wk);
      kernel::matmul_at(L.a.data(), dv.data(), T, d, d, G + O.wv);
      kernel::matmul_bt(dq.data(), W + O.wq, T, d, d, da.data());
      kernel::matmul_bt(dk.data(), W + O.wk, T, d, d, da.data());
      kernel::matmul_bt(dv.data(), W + O.wv, T, d, d, da.data());
      for (int t = 0; t < T; ++t) {
        const std::size_t td = static_cast<std::size_t>(t) * d;
        kernel::layer_norm_backward(da.data() + td, L.xhat1.data() + td, L.rstd1[t], W + O.ln1_g, d,
                                    dx.data() + td, G + O.ln1_g, G + O.ln1_b, scratch.data());
      }
    }

    for (int t = 0; t < T; ++t) {
      const std::size_t td = static_cast<std::size_t>(t) * d;
      Real* te = G + Ly.tok_emb + static_cast<std::size_t>(tr.tokens_[static_cast<std::size_t>(t)]) * d;
      Real* pe = G + Ly.pos_emb + td;
      for (int i = 0; i < d; ++i) {
        te[i] += dx[td + i];
        pe[i] += dx[td + i];
      }
    }
  }

  static const ParamLayout& layout(const ModelConfig& c) {
    thread_local ModelConfig cached_cfg{};
    thread_local std::unique_ptr<ParamLayout> cached;
    if (!cached || !(cached_cfg == c)) {
      cached = std::make_unique<ParamLayout>(c);
      cached_cfg = c;
    }
    return *cached;
  }
};

// Row-major (positions x vocab) log-distributions.
template <class Real>
struct LogProbs {
  int length = 0;
  int vocab = 0;
  std::vector<Real> data;
  std::span<const Real> row(int t) const {
    return {data.data() + static_cast<std::size_t>(t) * vocab, static_cast<std::size_t>(vocab)};
  }
};

template <class Real>
LogProbs<Real> log_probs(const Parameters<Real>& params, std::span<const TokenId> context) {
  Trace<Real> tr(params.config);
  Transformer<Real>::forward(params, context, tr);
  LogProbs<Real> out;
  out.length = tr.length();
  out.vocab = params.config.vocab_size;
  out.data.assign(tr.logp(0), tr.logp(0) + static_cast<std::size_t>(out.length) * out.vocab);
  return out;
}

// ---------------------------------------------------------------------------
// Frozen reference
// ---------------------------------------------------------------------------
template <class Real>
class ReferenceModel {
 public:
  ReferenceModel() = default;
  explicit ReferenceModel(const Parameters<Real>& source)
      : params_(std::make_shared<const Parameters<Real>>(source)) {}

  const Parameters<Real>& params() const { return *params_; }
  const ModelConfig& config() const { return params_->config; }
  LogProbs<Real> log_probs(std::span<const TokenId> context) const { return model::log_probs(*params_, context); }
  explicit operator bool() const { return static_cast<bool>(params_); }

 private:
  std::shared_ptr<const Parameters<Real>> params_;
};

template <class Real>
ReferenceModel<Real> snapshot_reference(const Parameters<Real>& params) {
  return ReferenceModel<Real>(params);
}

template <class Real>
ReferenceModel<Real> snapshot_reference(const ReferenceModel<Real>& ref) {
  return ReferenceModel<Real>(ref.params());
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------
struct GenerationSettings {
  double temperature = 1.0;
  int max_new_tokens = 64;
  TokenId stop_token = 6;  // END
  std::uint64_t seed = 0;
  bool greedy = false;
};

template <class Real>
TokenSeq sample_completion(const Parameters<Real>& params, std::span<const TokenId> context,
                           const GenerationSettings& s, Trace<Real>* workspace = nullptr) {
  if (!(s.temperature > 0.0)) throw ArgumentError("temperature must be positive");
  if (context.empty()) throw ArgumentError("sample_completion: empty context");
  std::optional<Trace<Real>> local;
  if (!workspace) workspace = &local.emplace(params.config);
  Trace<Real>& tr = *workspace;
  TokenSeq seq(context.begin(), context.end());
  TokenSeq out;
  Rng rng(s.seed);
  const int V = params.config.vocab_size;
  std::vector<double> probs(static_cast<std::size_t>(V));
  for (int step = 0; step < s.max_new_tokens; ++step) {
    if (static_cast<int>(seq.size()) >= params.config.context_length) break;
    Transformer<Real>::forward(params, seq, tr);
    const Real* lg = tr.logits(tr.length() - 1);
    TokenId next = 0;
    if (s.greedy) {
      next = static_cast<TokenId>(std::max_element(lg, lg + V) - lg);
    } else {
      double mx = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < V; ++i) mx = std::max(mx, static_cast<double>(lg[i]) / s.temperature);
      double z = 0;
      for (int i = 0; i < V; ++i) z += (probs[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(lg[i]) / s.temperature - mx));
      double r = rng.uniform() * z;
      next = static_cast<TokenId>(V - 1);
      for (int i = 0; i < V; ++i) {
        r -= probs[static_cast<std::size_t>(i)];
        if (r < 0) {
          next = static_cast<TokenId>(i);
          break;
        }
      }
    }
    out.push_back(next);
    seq.push_back(next);
    if (next == s.stop_token) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------
struct AdamSettings {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

template <class Real>
struct AdamState {
  std::vector<Real> m, v;
  long step = 0;
};

template <class Real>
void adam_step(Parameters<Real>& p, std::span<const Real> grad, AdamState<Real>& st, const AdamSettings& s) {
  if (st.m.size() != p.data.size()) {
    st.m.assign(p.data.size(), 0);
    st.v.assign(p.data.size(), 0);
  }
  double scale = 1.0;
  if (s.clip_norm > 0) {
    double norm2 = 0;
    for (const Real g : grad) norm2 += static_cast<double>(g) * g;
    const double norm = std::sqrt(norm2);
    if (norm > s.clip_norm) scale = s.clip_norm / norm;
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(st.step));
  const Real b1 = static_cast<Real>(s.beta1), b2 = static_cast<Real>(s.beta2);
  const Real lr_t = static_cast<Real>(s.lr * std::sqrt(bc2) / bc1);
  const Real eps = static_cast<Real>(s.eps * std::sqrt(bc2));
  const Real sc = static_cast<Real>(scale);
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    const Real g = grad[i] * sc;
    st.m[i] = b1 * st.m[i] + (Real(1) - b1) * g;
    st.v[i] = b2 * st.v[i] + (Real(1) - b2) * g * g;
    p.data[i] -= lr_t * st.m[i] / (std::sqrt(st.v[i]) + eps);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: raw little-endian array container + JSON sidecar.
// ---------------------------------------------------------------------------
inline constexpr char kCheckpointMagic[8] = {'A', 'U', 'C', 'K', 'P', 'T', '0', '1'};

template <class Real>
constexpr Precision precision_of() {
  return std::is_same_v<Real, double> ? Precision::Double : Precision::Single;
}

template <class Real>
void save_checkpoint(const Parameters<Real>& params, const std::string& path, const ordered_json& extra = {}) {
  std::string payload(reinterpret_cast<const char*>(params.data.data()), params.data.size() * sizeof(Real));
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t width = sizeof(Real);
    const std::uint64_t count = params.data.size();
    out.write(reinterpret_cast<const char*>(&width), sizeof width);
    out.write(reinterpret_cast<const char*>(&count), sizeof count);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("checkpoint write failed: " + path);
  }
  ordered_json meta;
  meta["config"] = to_json(params.config);
  meta["seed"] = params.seed;
  meta["n_params"] = params.data.size();
  meta["hash"] = sha256_hex(payload);
  for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
  std::ofstream side(path + ".json", std::ios::binary);
  if (!side) throw IoError("cannot write checkpoint metadata " + path + ".json");
  side << meta.dump(2) << '\n';
}

inline json read_checkpoint_meta(const std::string& path) {
  std::ifstream side(path + ".json", std::ios::binary);
  if (!side) throw IoError("missing checkpoint metadata " + path + ".json");
  try {
    return json::parse(side);
  } catch (const json::exception& e) {
    throw CorruptionError("unreadable checkpoint metadata: " + std::string(e.what()));
  }
}

template <class Real>
Parameters<Real> load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected = std::nullopt) {
  const json meta = read_checkpoint_meta(path);
  Parameters<Real> p;
  try {
    p.config = model_config_from_json(meta.at("config"));
    p.seed = meta.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw CorruptionError("checkpoint metadata missing fields: " + std::string(e.what()));
  }
  if (p.config.precision != precision_of<Real>())
    throw ConfigError("checkpoint precision is " + std::string(precision_name(p.config.precision)));
  if (expected) {
    if (expected->vocab_size != p.config.vocab_size)
      throw ConfigError("checkpoint vocab_size " + std::to_string(p.config.vocab_size) + " != expected " +
                        std::to_string(expected->vocab_size));
    if (!(*expected == p.config)) throw ConfigError("checkpoint model config differs from the expected config");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path);
  char magic[8];
  std::uint32_t width = 0;
  std::uint64_t count = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&width), sizeof width);
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw CorruptionError("checkpoint header is truncated or invalid: " + path);
  if (width != sizeof(Real)) throw CorruptionError("checkpoint element width mismatch");
  if (count != parameter_count(p.config)) throw CorruptionError("checkpoint parameter count mismatch");
  std::string payload(count * sizeof(Real), '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size())
    throw CorruptionError("checkpoint payload is truncated: " + path);
  if (in.peek() != std::char_traits<char>::eof()) throw CorruptionError("checkpoint has trailing bytes: " + path);
  if (sha256_hex(payload) != meta.value("hash", std::string{}))
    throw CorruptionError("checkpoint hash mismatch: " + path);
  p.data.resize(count);
  std::memcpy(p.data.data(), payload.data(), payload.size());
  return p;
}

}  // namespace au::model

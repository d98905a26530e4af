#pragma once

// Training objectives. Every loss is expressed through its derivative with
// respect to the target-token log-probabilities lp_t = log p(y_t | y_<t), so
// the gradient at the logits of position t-1 is dL/dlp_t * (onehot(y_t) - p).
// Position 0 is never a prediction target.

#include <cmath>
#include <optional>
#include <vector>

#include "au/common.hpp"
#include "au/detect.hpp"
#include "au/model.hpp"

namespace au::objectives {

using detect::Sample;
using model::Parameters;
using model::ReferenceModel;

struct LossWeights {
  double lambda_retain = 1.00;
  double lambda_forget = 1.25;
  double lambda_reg = 1.00;
  double beta = 0.1;
};

inline void validate(const LossWeights& w) {
  if (w.lambda_retain < 0 || w.lambda_forget < 0 || w.lambda_reg < 0)
    throw ConfigError("loss weights must be non-negative");
  if (!(w.beta > 0)) throw ConfigError("beta must be positive");
}

// How mask-0 positions are regularized: plain CE on the sampled tokens, or
// KL(base || current) against the frozen reference distribution.
enum class RegMode { SampledCE, BaseKL };

enum class Partition { Reg = 0, Retain = 1, Forget = 2 };

struct LossBreakdown {
  double total = 0;
  double retain = 0, forget = 0, reg = 0;
  int n_retain = 0, n_forget = 0, n_reg = 0;
  bool dropped_retain = true, dropped_forget = true, dropped_reg = true;
};

inline ordered_json to_json(const LossBreakdown& b) {
  return ordered_json{{"total", b.total},
                      {"retain", b.retain},
                      {"forget", b.forget},
                      {"reg", b.reg},
                      {"dropped_flags",
                       ordered_json{{"retain", b.dropped_retain}, {"forget", b.dropped_forget}, {"reg", b.dropped_reg}}}};
}

// Loss value plus per-position derivative coefficients.
struct TokenLoss {
  double loss = 0;
  bool dropped = true;
  std::vector<double> dlp;  // index t: dL/dlp_t (0 where unused)
  // Positions whose logits also receive lambda * (p_theta - p_ref); used by
  // the BaseKL regularizer only.
  std::vector<std::pair<int, double>> dense;
};

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace token {

inline TokenLoss empty(std::size_t T) {
  TokenLoss r;
  r.dlp.assign(T, 0.0);
  return r;
}

// Mean negative log-likelihood over `positions`.
inline TokenLoss ce(std::span<const double> lp, const std::vector<int>& positions) {
  TokenLoss r = empty(lp.size());
  if (positions.empty()) return r;
  r.dropped = false;
  const double n = static_cast<double>(positions.size());
  for (int t : positions) {
    r.loss -= lp[static_cast<std::size_t>(t)];
    r.dlp[static_cast<std::size_t>(t)] = -1.0 / n;
  }
  r.loss /= n;
  return r;
}

// Token-level NPO: mean over positions of -log sigma(-beta * (lp - lp_ref)).
inline TokenLoss npo(std::span<const double> lp, std::span<const double> ref, const std::vector<int>& positions,
                     double beta) {
  TokenLoss r = empty(lp.size());
  if (positions.empty()) return r;
  r.dropped = false;
  const double n = static_cast<double>(positions.size());
  for (int t : positions) {
    const auto i = static_cast<std::size_t>(t);
    const double x = beta * (lp[i] - ref[i]);
    r.loss += softplus(x);
    r.dlp[i] = beta * sigmoid(x) / n;
  }
  r.loss /= n;
  return r;
}

// Sequence-level NPO: one sigmoid over the summed log-ratio.
inline TokenLoss seq_npo(std::span<const double> lp, std::span<const double> ref, const std::vector<int>& positions,
                         double beta) {
  TokenLoss r = empty(lp.size());
  if (positions.empty()) return r;
  r.dropped = false;
  double sum = 0;
  for (int t : positions) sum += lp[static_cast<std::size_t>(t)] - ref[static_cast<std::size_t>(t)];
  r.loss = softplus(beta * sum);
  const double g = beta * sigmoid(beta * sum);
  for (int t : positions) r.dlp[static_cast<std::size_t>(t)] = g;
  return r;
}

// Gradient ascent on the forget NLL: loss = mean lp over positions.
inline TokenLoss ga(std::span<const double> lp, const std::vector<int>& positions) {
  TokenLoss r = empty(lp.size());
  if (positions.empty()) return r;
  r.dropped = false;
  const double n = static_cast<double>(positions.size());
  for (int t : positions) {
    r.loss += lp[static_cast<std::size_t>(t)];
    r.dlp[static_cast<std::size_t>(t)] = 1.0 / n;
  }
  r.loss /= n;
  return r;
}

// Mean KL(p_ref || p_theta) over positions, given full log-distributions.
template <class Real>
inline TokenLoss base_kl(const model::Trace<Real>& tr, const model::LogProbs<Real>& ref,
                         const std::vector<int>& positions) {
  TokenLoss r = empty(static_cast<std::size_t>(tr.length()));
  if (positions.empty()) return r;
  r.dropped = false;
  const double n = static_cast<double>(positions.size());
  const int V = ref.vocab;
  for (int t : positions) {
    const Real* lq = tr.logp(t - 1);
    const auto lr = ref.row(t - 1);
    double kl = 0;
    for (int v = 0; v < V; ++v) {
      const double pr = std::exp(static_cast<double>(lr[static_cast<std::size_t>(v)]));
      kl += pr * (static_cast<double>(lr[static_cast<std::size_t>(v)]) - static_cast<double>(lq[v]));
    }
    r.loss += kl;
    r.dense.emplace_back(t, 1.0 / n);
  }
  r.loss /= n;
  return r;
}

}  // namespace token

inline std::vector<int> all_targets(int T) {
  std::vector<int> out;
  for (int t = 1; t < T; ++t) out.push_back(t);
  return out;
}

inline void check_mask(const Sample& s) {
  if (static_cast<int>(s.mask.size()) != s.length())
    throw MaskError("mask length " + std::to_string(s.mask.size()) + " != sequence length " +
                    std::to_string(s.length()));
  for (auto v : s.mask.values)
    if (v > 2) throw MaskError("mask value " + std::to_string(v) + " is not in {0,1,2}");
}

// Target-token log-probabilities read off a forward trace.
template <class Real>
std::vector<double> target_logp(const model::Trace<Real>& tr, std::span<const TokenId> seq) {
  std::vector<double> lp(seq.size(), 0.0);
  for (std::size_t t = 1; t < seq.size(); ++t) lp[t] = static_cast<double>(tr.logp(static_cast<int>(t) - 1)[seq[t]]);
  return lp;
}

template <class Real>
std::vector<double> target_logp(const ReferenceModel<Real>& ref, std::span<const TokenId> seq) {
  model::Trace<Real> tr(ref.config());
  model::Transformer<Real>::forward(ref.params(), seq, tr);
  return target_logp(tr, seq);
}

// Accumulates `weight * term` into `into` (loss and derivatives).
inline void accumulate(TokenLoss& into, const TokenLoss& term, double weight) {
  into.loss += weight * term.loss;
  for (std::size_t i = 0; i < into.dlp.size(); ++i) into.dlp[i] += weight * term.dlp[i];
  for (auto [t, w] : term.dense) into.dense.emplace_back(t, weight * w);
  into.dropped = into.dropped && term.dropped;
}

// AU objective over the tri-mask partitions. Terms with an empty partition
// are dropped; terms with a zero weight contribute no gradient.
template <class Real>
TokenLoss au_token_loss(const model::Trace<Real>& tr, const Sample& s, std::span<const double> lp,
                        std::span<const double> ref_lp, const LossWeights& w, LossBreakdown& bd,
                        RegMode reg_mode = RegMode::SampledCE, const model::LogProbs<Real>* ref_full = nullptr) {
  check_mask(s);
  const auto retain = s.mask.retain(), forget = s.mask.forget(), reg = s.mask.reg();
  TokenLoss total = token::empty(lp.size());
  total.dropped = false;
  bd = {};
  bd.n_retain = static_cast<int>(retain.size());
  bd.n_forget = static_cast<int>(forget.size());
  bd.n_reg = static_cast<int>(reg.size());

  const TokenLoss t_retain = token::ce(lp, retain);
  const TokenLoss t_forget = token::npo(lp, ref_lp, forget, w.beta);
  TokenLoss t_reg;
  if (reg_mode == RegMode::BaseKL) {
    if (!ref_full) throw ArgumentError("BaseKL regularizer needs reference distributions");
    t_reg = token::base_kl(tr, *ref_full, reg);
  } else {
    t_reg = token::ce(lp, reg);
  }
  bd.dropped_retain = t_retain.dropped;
  bd.dropped_forget = t_forget.dropped;
  bd.dropped_reg = t_reg.dropped;
  bd.retain = t_retain.loss;
  bd.forget = t_forget.loss;
  bd.reg = t_reg.loss;

  auto add = [&](const TokenLoss& term, double lambda) {
    if (term.dropped) return;
    bd.total += lambda * term.loss;
    if (lambda == 0.0) return;
    for (std::size_t i = 0; i < total.dlp.size(); ++i) total.dlp[i] += lambda * term.dlp[i];
    for (auto [t, x] : term.dense) total.dense.emplace_back(t, lambda * x);
  };
  add(t_retain, w.lambda_retain);
  add(t_forget, w.lambda_forget);
  add(t_reg, w.lambda_reg);
  total.loss = bd.total;
  return total;
}

// d(loss)/d(logits) for every traced position, scaled by `scale`.
template <class Real>
std::vector<Real> logit_gradient(const model::Trace<Real>& tr, std::span<const TokenId> seq, const TokenLoss& tl,
                                 double scale, const model::LogProbs<Real>* ref_full = nullptr) {
  const int T = tr.length();
  const int V = tr.vocab();
  std::vector<Real> d(static_cast<std::size_t>(T) * static_cast<std::size_t>(V), Real(0));
  for (int t = 1; t < T; ++t) {
    const double c = tl.dlp[static_cast<std::size_t>(t)] * scale;
    if (c == 0.0) continue;
    const Real* lp = tr.logp(t - 1);
    Real* row = d.data() + static_cast<std::size_t>(t - 1) * V;
    for (int v = 0; v < V; ++v) row[v] -= static_cast<Real>(c * std::exp(static_cast<double>(lp[v])));
    row[seq[static_cast<std::size_t>(t)]] += static_cast<Real>(c);
  }
  for (auto [t, w] : tl.dense) {
    if (!ref_full) throw ArgumentError("dense gradient rows need reference distributions");
    const Real* lp = tr.logp(t - 1);
    const auto lr = ref_full->row(t - 1);
    Real* row = d.data() + static_cast<std::size_t>(t - 1) * V;
    for (int v = 0; v < V; ++v)
      row[v] += static_cast<Real>(w * scale *
                                  (std::exp(static_cast<double>(lp[v])) -
                                   std::exp(static_cast<double>(lr[static_cast<std::size_t>(v)]))));
  }
  return d;
}

// Runs backward for a traced sequence and adds the result into `grad`.
template <class Real>
void accumulate_gradient(const Parameters<Real>& params, const model::Trace<Real>& tr, std::span<const TokenId> seq,
                         const TokenLoss& tl, double scale, std::span<Real> grad,
                         const model::LogProbs<Real>* ref_full = nullptr) {
  const auto d = logit_gradient(tr, seq, tl, scale, ref_full);
  model::Transformer<Real>::backward(params, tr, d, grad);
}

// ---------------------------------------------------------------------------
// Parameter-level losses (single sample).
// ---------------------------------------------------------------------------
template <class Real>
struct LossGrad {
  double loss = 0;
  bool dropped = true;
  std::vector<Real> grad;
};

template <class Real>
struct AuLossGrad {
  LossBreakdown breakdown;
  std::vector<Real> grad;
};

namespace detail {

template <class Real>
struct Traced {
  model::Trace<Real> trace;
  TokenSeq seq;
  std::vector<double> lp;

  Traced(const Parameters<Real>& p, TokenSeq s) : trace(p.config), seq(std::move(s)) {
    model::Transformer<Real>::forward(p, seq, trace);
    lp = target_logp(trace, seq);
  }
};

template <class Real>
LossGrad<Real> finish(const Parameters<Real>& p, const Traced<Real>& tc, const TokenLoss& tl) {
  LossGrad<Real> r;
  r.loss = tl.loss;
  r.dropped = tl.dropped;
  r.grad.assign(p.size(), Real(0));
  if (!tl.dropped) accumulate_gradient<Real>(p, tc.trace, tc.seq, tl, 1.0, r.grad);
  return r;
}

}  // namespace detail

// Masked cross-entropy restricted to the retain or reg partition.
template <class Real>
LossGrad<Real> ce_masked(const Parameters<Real>& p, const Sample& s, Partition sel) {
  check_mask(s);
  if (sel == Partition::Forget) throw ArgumentError("ce_masked selects retain or reg positions");
  detail::Traced<Real> tc(p, s.sequence());
  const auto pos = s.mask.positions(static_cast<std::uint8_t>(sel));
  return detail::finish(p, tc, token::ce(tc.lp, pos));
}

template <class Real>
LossGrad<Real> npo_masked(const Parameters<Real>& p, const ReferenceModel<Real>& ref, const Sample& s, double beta) {
  check_mask(s);
  detail::Traced<Real> tc(p, s.sequence());
  const auto ref_lp = target_logp(ref, tc.seq);
  return detail::finish(p, tc, token::npo(tc.lp, ref_lp, s.mask.forget(), beta));
}

template <class Real>
LossGrad<Real> seq_npo_loss(const Parameters<Real>& p, const ReferenceModel<Real>& ref, const Sample& s,
                            double beta) {
  check_mask(s);
  detail::Traced<Real> tc(p, s.sequence());
  const auto ref_lp = target_logp(ref, tc.seq);
  return detail::finish(p, tc, token::seq_npo(tc.lp, ref_lp, s.mask.forget(), beta));
}

template <class Real>
LossGrad<Real> ga_loss(const Parameters<Real>& p, const Sample& s) {
  check_mask(s);
  detail::Traced<Real> tc(p, s.sequence());
  return detail::finish(p, tc, token::ga(tc.lp, s.mask.forget()));
}

template <class Real>
AuLossGrad<Real> au_loss(const Parameters<Real>& p, const ReferenceModel<Real>& ref, const Sample& s,
                         const LossWeights& w, RegMode reg_mode = RegMode::SampledCE) {
  validate(w);
  check_mask(s);
  detail::Traced<Real> tc(p, s.sequence());
  const auto ref_lp = target_logp(ref, tc.seq);
  std::optional<model::LogProbs<Real>> ref_full;
  if (reg_mode == RegMode::BaseKL) ref_full = ref.log_probs(tc.seq);
  AuLossGrad<Real> r;
  const TokenLoss tl =
      au_token_loss(tc.trace, s, tc.lp, ref_lp, w, r.breakdown, reg_mode, ref_full ? &*ref_full : nullptr);
  r.grad.assign(p.size(), Real(0));
  accumulate_gradient<Real>(p, tc.trace, tc.seq, tl, 1.0, r.grad, ref_full ? &*ref_full : nullptr);
  return r;
}

// d(au_loss)/d(logits), exposed for routing checks.
template <class Real>
std::vector<Real> au_logit_gradient(const Parameters<Real>& p, const ReferenceModel<Real>& ref, const Sample& s,
                                    const LossWeights& w, LossBreakdown* bd = nullptr) {
  check_mask(s);
  detail::Traced<Real> tc(p, s.sequence());
  const auto ref_lp = target_logp(ref, tc.seq);
  LossBreakdown local;
  const TokenLoss tl = au_token_loss(tc.trace, s, tc.lp, ref_lp, w, bd ? *bd : local);
  return logit_gradient(tc.trace, tc.seq, tl, 1.0);
}

// ---------------------------------------------------------------------------
// Partial model collapse baseline.
// ---------------------------------------------------------------------------

// Index of the candidate with the fewest hallucinated spans (ties: lowest index).
inline std::size_t pmc_curate(const std::vector<int>& hallucination_counts) {
  if (hallucination_counts.empty()) throw ArgumentError("pmc_curate: need at least one candidate");
  std::size_t best = 0;
  for (std::size_t i = 1; i < hallucination_counts.size(); ++i)
    if (hallucination_counts[i] < hallucination_counts[best]) best = i;
  return best;
}

inline int hallucinated_spans(const Sample& s) {
  int n = 0;
  for (std::size_t t = 0; t < s.mask.size(); ++t)
    if (s.mask.values[t] == 2 && (t == 0 || s.mask.values[t - 1] != 2)) ++n;
  return n;
}

// Sequence-level CE over every target position.
template <class Real>
TokenLoss full_ce(const model::Trace<Real>& tr, std::span<const TokenId> seq) {
  return token::ce(target_logp(tr, seq), all_targets(static_cast<int>(seq.size())));
}

// pmc_weight * mean CE(retain batch) + CE(curated candidate).
template <class Real>
LossGrad<Real> pmc_loss(const Parameters<Real>& p, const TokenSeq& curated, const std::vector<TokenSeq>& retain_batch,
                        double pmc_weight) {
  LossGrad<Real> r;
  r.grad.assign(p.size(), Real(0));
  r.dropped = false;
  {
    detail::Traced<Real> tc(p, curated);
    const TokenLoss tl = token::ce(tc.lp, all_targets(static_cast<int>(curated.size())));
    r.loss += tl.loss;
    accumulate_gradient<Real>(p, tc.trace, tc.seq, tl, 1.0, r.grad);
  }
  if (!retain_batch.empty() && pmc_weight != 0.0) {
    const double scale = pmc_weight / static_cast<double>(retain_batch.size());
    for (const auto& doc : retain_batch) {
      detail::Traced<Real> tc(p, doc);
      const TokenLoss tl = token::ce(tc.lp, all_targets(static_cast<int>(doc.size())));
      r.loss += scale * tl.loss;
      accumulate_gradient<Real>(p, tc.trace, tc.seq, tl, scale, r.grad);
    }
  }
  return r;
}

// Curates among K candidates, then evaluates the PMC loss on the winner.
template <class Real>
LossGrad<Real> pmc_curate_and_loss(const Parameters<Real>& p, const std::vector<Sample>& candidates,
                                   const std::vector<TokenSeq>& retain_batch, double pmc_weight,
                                   std::size_t* chosen = nullptr) {
  if (candidates.empty()) throw ArgumentError("pmc_curate_and_loss: K must be >= 1");
  std::vector<int> counts;
  for (const auto& c : candidates) counts.push_back(hallucinated_spans(c));
  const std::size_t best = pmc_curate(counts);
  if (chosen) *chosen = best;
  return pmc_loss(p, candidates[best].sequence(), retain_batch, pmc_weight);
}

}  // namespace au::objectives

#pragma once

// Base-model pretraining on the synthetic corpus with a held-out patience
// rule. The best held-out checkpoint is returned.

#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <vector>

#include "au/common.hpp"
#include "au/corpus.hpp"
#include "au/model.hpp"

namespace au::pretrain {

struct PretrainSettings {
  long n_docs = 8000;
  long heldout_docs = 400;
  double p_halluc = 0.25;
  double lr = 1e-3;
  double lr_final_frac = 0.05;  // cosine decay to lr * lr_final_frac at max_steps
  int batch_size = 16;
  long max_steps = 8000;
  int eval_every = 250;
  int patience = 3;
  double min_delta = 1e-3;  // nats
};

struct EvalPoint {
  long step = 0;
  double train_loss = 0;  // mean over the steps since the previous point
  double heldout_nll = 0;
};

template <class Real>
struct PretrainResult {
  model::Parameters<Real> params;
  std::vector<EvalPoint> history;
  long steps = 0;
  long best_step = 0;
  double best_heldout_nll = 0;
  bool stopped_early = false;
};

// Token-weighted mean NLL over every target position of every document.
template <class Real>
double corpus_nll(const model::Parameters<Real>& p, const std::vector<corpus::CorpusDocument>& docs,
                  long* n_tokens = nullptr) {
  model::Trace<Real> tr(p.config);
  double sum = 0;
  long n = 0;
  for (const auto& d : docs) {
    tr.reset();
    model::Transformer<Real>::forward(p, d.tokens, tr);
    for (std::size_t t = 1; t < d.tokens.size(); ++t) {
      sum -= static_cast<double>(tr.logp(static_cast<int>(t) - 1)[d.tokens[t]]);
      ++n;
    }
  }
  if (n_tokens) *n_tokens = n;
  return n ? sum / static_cast<double>(n) : 0.0;
}

// Per-document mean CE over all targets, averaged over the batch; gradient is
// accumulated into `grad` (which is zeroed first). Returns the batch loss.
template <class Real>
double lm_batch_gradient(const model::Parameters<Real>& p, const std::vector<const TokenSeq*>& batch,
                         model::Trace<Real>& tr, std::vector<Real>& grad) {
  std::fill(grad.begin(), grad.end(), Real(0));
  const int V = p.config.vocab_size;
  std::vector<Real> dl;
  double total = 0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const TokenSeq* seq : batch) {
    tr.reset();
    model::Transformer<Real>::forward(p, *seq, tr);
    const std::size_t T = seq->size();
    if (T < 2) continue;
    dl.assign(T * static_cast<std::size_t>(V), Real(0));
    const double c = inv_b / static_cast<double>(T - 1);
    double loss = 0;
    for (std::size_t t = 0; t + 1 < T; ++t) {
      const Real* lp = tr.logp(static_cast<int>(t));
      Real* row = dl.data() + t * static_cast<std::size_t>(V);
      for (int v = 0; v < V; ++v) row[v] = static_cast<Real>(c * std::exp(static_cast<double>(lp[v])));
      row[(*seq)[t + 1]] -= static_cast<Real>(c);
      loss -= static_cast<double>(lp[(*seq)[t + 1]]);
    }
    total += inv_b * loss / static_cast<double>(T - 1);
    model::Transformer<Real>::backward(p, tr, dl, grad);
  }
  return total;
}

template <class Real>
PretrainResult<Real> train_base(const model::ModelConfig& cfg, std::uint64_t seed,
                                const std::vector<corpus::CorpusDocument>& train,
                                const std::vector<corpus::CorpusDocument>& heldout, const PretrainSettings& s,
                                const std::function<void(const EvalPoint&)>& on_eval = {}) {
  if (train.empty()) throw ArgumentError("train_base: empty training corpus");
  if (s.batch_size < 1 || s.max_steps < 1 || s.eval_every < 1 || s.patience < 1)
    throw ConfigError("pretraining settings must be positive");
  if (!(s.lr > 0) || !(s.lr_final_frac >= 0 && s.lr_final_frac <= 1))
    throw ConfigError("pretraining learning rate must be positive and lr_final_frac in [0, 1]");
  PretrainResult<Real> r{model::init_model<Real>(cfg, seed), {}, 0, 0, 0, false};
  model::Parameters<Real> best = r.params;
  r.best_heldout_nll = corpus_nll(r.params, heldout);
  model::AdamState<Real> opt;
  model::AdamSettings as;
  as.lr = s.lr;
  model::Trace<Real> tr(cfg);
  std::vector<Real> grad(r.params.size());

  std::vector<std::size_t> order(train.size());
  std::size_t cursor = order.size();
  long epoch = 0;
  int bad_evals = 0;
  double loss_acc = 0;
  long loss_n = 0;
  std::vector<const TokenSeq*> batch;
  for (long step = 1; step <= s.max_steps; ++step) {
    batch.clear();
    while (static_cast<int>(batch.size()) < s.batch_size) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(seed, 0x40, epoch++));
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&train[order[cursor++]].tokens);
    }
    const double progress = static_cast<double>(step - 1) / static_cast<double>(s.max_steps);
    as.lr = s.lr * (s.lr_final_frac + (1 - s.lr_final_frac) * 0.5 * (1 + std::cos(std::numbers::pi * progress)));
    const double loss = lm_batch_gradient(r.params, batch, tr, grad);
    if (!std::isfinite(loss)) throw NumericError("non-finite pretraining loss", step);
    model::adam_step(r.params, std::span<const Real>(grad), opt, as);
    loss_acc += loss;
    ++loss_n;
    r.steps = step;
    if (step % s.eval_every == 0 || step == s.max_steps) {
      const EvalPoint pt{step, loss_acc / static_cast<double>(loss_n), corpus_nll(r.params, heldout)};
      loss_acc = 0;
      loss_n = 0;
      r.history.push_back(pt);
      if (on_eval) on_eval(pt);
      if (pt.heldout_nll < r.best_heldout_nll - s.min_delta) {
        r.best_heldout_nll = pt.heldout_nll;
        r.best_step = step;
        best = r.params;
        bad_evals = 0;
      } else if (++bad_evals >= s.patience) {
        r.stopped_early = true;
        break;
      }
    }
  }
  r.params = std::move(best);
  return r;
}

}  // namespace au::pretrain

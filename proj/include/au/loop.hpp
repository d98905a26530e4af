#pragma once

// The closed loop: outer epochs resample and mask, inner epochs train on the
// frozen cache, exhausted prompts are retired and mutated.

#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "au/common.hpp"
#include "au/corpus.hpp"
#include "au/detect.hpp"
#include "au/model.hpp"
#include "au/objectives.hpp"

namespace au::loop {

using corpus::PromptState;
using detect::Sample;

enum class Method { Au, AuCeOnly, AuNpoOnly, Ga, Npo, Pmc };
inline constexpr std::array<Method, 6> kAllMethods = {Method::Au, Method::AuCeOnly, Method::AuNpoOnly,
                                                      Method::Ga, Method::Npo,      Method::Pmc};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::Au: return "au";
    case Method::AuCeOnly: return "au_ce_only";
    case Method::AuNpoOnly: return "au_npo_only";
    case Method::Ga: return "ga";
    case Method::Npo: return "npo";
    case Method::Pmc: return "pmc";
  }
  return "?";
}

inline Method method_from_name(std::string_view s) {
  for (Method m : kAllMethods)
    if (method_name(m) == s) return m;
  throw ArgumentError("unknown method '" + std::string(s) + "' (expected au, au_ce_only, au_npo_only, ga, npo, pmc)");
}

inline bool is_au_family(Method m) { return m == Method::Au || m == Method::AuCeOnly || m == Method::AuNpoOnly; }
inline bool uses_static_cache(Method m) { return m == Method::Ga || m == Method::Npo; }

struct LoopConfig {
  int n_outer = 10;
  int n_inner = 20;
  int k = 5;
  int exhaustion_epochs = 5;
  int max_mutations = 6;
  Method method = Method::Au;
  double lr = 3e-4;
  int batch_size = 8;
  std::uint64_t master_seed = 0;
  objectives::LossWeights weights;
  objectives::RegMode reg_mode = objectives::RegMode::SampledCE;
  double temperature = 1.0;
  int max_new_tokens = 64;
  double clip_norm = 1.0;
  double pmc_weight = 1.0;
};

inline void validate(const LoopConfig& c) {
  if (c.n_outer < 1 || c.n_inner < 1 || c.k < 1) throw ConfigError("n_outer, n_inner and K must be >= 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.exhaustion_epochs < 1) throw ConfigError("exhaustion_epochs must be >= 1");
  if (c.max_mutations < 0) throw ConfigError("max_mutations must be >= 0");
  if (!(c.lr > 0)) throw ConfigError("learning rate must be positive");
  if (!(c.temperature > 0)) throw ConfigError("temperature must be positive");
  if (c.max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (c.pmc_weight < 0) throw ConfigError("pmc_weight must be >= 0");
  objectives::validate(c.weights);
}

// Effective loss weights for the AU family.
inline objectives::LossWeights effective_weights(const LoopConfig& c) {
  auto w = c.weights;
  if (c.method == Method::AuCeOnly) w.lambda_forget = 0;
  if (c.method == Method::AuNpoOnly) w.lambda_retain = 0;
  return w;
}

// ---------------------------------------------------------------------------
// Sample cache
// ---------------------------------------------------------------------------
class SampleCache {
 public:
  SampleCache() = default;
  SampleCache(int outer_epoch, std::vector<Sample> samples)
      : outer_epoch_(outer_epoch), samples_(std::move(samples)), hash_(compute_hash(samples_)) {}

  static std::string compute_hash(const std::vector<Sample>& s) { return sha256_hex(detect::to_jsonl(s)); }

  int outer_epoch() const { return outer_epoch_; }
  const std::vector<Sample>& samples() const { return samples_; }
  const std::string& hash() const { return hash_; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }

  void verify() const {
    if (compute_hash(samples_) != hash_) throw CorruptionError("sample cache changed within its outer epoch");
  }

 private:
  int outer_epoch_ = 0;
  std::vector<Sample> samples_;
  std::string hash_;
};

// Per-prompt name counts over all of its samples in one outer epoch.
struct PromptTally {
  long n_halluc = 0;
  long n_total = 0;
};

struct OuterResult {
  SampleCache cache;
  std::map<int, PromptTally> per_prompt;
  std::array<PromptTally, 3> per_mode{};
  bool run_complete = false;
};

// ---------------------------------------------------------------------------
// Run state
// ---------------------------------------------------------------------------
template <class Real>
struct RunState {
  model::Parameters<Real> params;
  model::ReferenceModel<Real> reference;
  model::AdamState<Real> optimizer;
  std::vector<PromptState> active;
  std::vector<PromptState> retired;
  std::vector<ordered_json> metrics;
  long step = 0;
  int outer_epoch = 0;

  RunState(model::Parameters<Real> p, const std::vector<PromptState>& prompts)
      : params(std::move(p)), reference(model::snapshot_reference(params)), active(prompts) {}
};

template <class Real>
OuterResult run_outer_epoch(const RunState<Real>& state, const LoopConfig& cfg, const corpus::World& w) {
  OuterResult r;
  if (state.active.empty()) {
    r.run_complete = true;
    return r;
  }
  detect::ElicitSettings es;
  es.k = cfg.k;
  es.master_seed = cfg.master_seed;
  es.outer_epoch = state.outer_epoch;
  es.generation.temperature = cfg.temperature;
  es.generation.max_new_tokens = cfg.max_new_tokens;
  std::vector<Sample> all;
  for (const auto& p : state.active) {
    std::vector<detect::ResponseCount> counts;
    auto samples = detect::elicit_and_label(state.params, p, es, w.registry, w.vocab, &counts);
    auto& tally = r.per_prompt[p.prompt_id];
    for (std::size_t i = 0; i < samples.size(); ++i) {
      tally.n_halluc += counts[i].n_halluc;
      tally.n_total += counts[i].n_total;
      auto& m = r.per_mode[static_cast<std::size_t>(samples[i].mode)];
      m.n_halluc += counts[i].n_halluc;
      m.n_total += counts[i].n_total;
    }
    for (auto& s : samples) all.push_back(std::move(s));
  }
  r.cache = SampleCache(state.outer_epoch, std::move(all));
  return r;
}

struct InnerResult {
  std::vector<double> inner_losses;  // mean batch loss per inner epoch
  double retain = 0, forget = 0, reg = 0;  // means over non-dropped sample terms
  long dropped_retain = 0, dropped_forget = 0, dropped_reg = 0;
  long steps = 0;
};

namespace detail {

template <class Real>
void check_finite_step(const std::vector<Real>& grad, double loss, long step) {
  if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step), step);
  if (!all_finite<Real>(grad)) throw NumericError("non-finite gradient at step " + std::to_string(step), step);
}

inline std::vector<std::vector<std::size_t>> batches(std::size_t n, int batch_size, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  return out;
}

// Items trained by PMC: per (prompt, mode), the candidate with the fewest
// hallucinated spans among its K samples.
inline std::vector<std::size_t> pmc_items(const std::vector<Sample>& samples) {
  std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i)
    groups[{samples[i].prompt_id, static_cast<int>(samples[i].mode)}].push_back(i);
  std::vector<std::size_t> out;
  for (const auto& [key, idx] : groups) {
    std::vector<int> counts;
    for (auto i : idx) counts.push_back(objectives::hallucinated_spans(samples[i]));
    out.push_back(idx[objectives::pmc_curate(counts)]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

// Exactly n_inner passes over the cache in seeded shuffled batch order.
template <class Real>
InnerResult run_inner_epochs(RunState<Real>& state, const SampleCache& cache, const LoopConfig& cfg,
                             const std::vector<TokenSeq>& retain_docs = {}) {
  if (cache.empty()) throw ArgumentError("run_inner_epochs: empty cache");
  const auto& samples = cache.samples();
  const auto w = effective_weights(cfg);
  model::AdamSettings as;
  as.lr = cfg.lr;
  as.clip_norm = cfg.clip_norm;
  InnerResult out;

  // Training items and the per-item reference log-probabilities they need.
  std::vector<std::size_t> items;
  if (cfg.method == Method::Pmc) {
    items = detail::pmc_items(samples);
    if (cfg.pmc_weight > 0 && retain_docs.empty()) throw ArgumentError("PMC needs a retain corpus");
  } else {
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (is_au_family(cfg.method) || !samples[i].mask.forget().empty()) items.push_back(i);
  }
  std::vector<std::vector<double>> ref_lp(samples.size());
  std::vector<std::optional<model::LogProbs<Real>>> ref_full(samples.size());
  const bool need_ref = cfg.method == Method::Npo || (is_au_family(cfg.method) && w.lambda_forget != 0);
  for (auto i : items) {
    const TokenSeq seq = samples[i].sequence();
    if (need_ref) ref_lp[i] = objectives::target_logp(state.reference, seq);
    if (is_au_family(cfg.method) && cfg.reg_mode == objectives::RegMode::BaseKL)
      ref_full[i] = state.reference.log_probs(seq);
  }

  model::Trace<Real> tr(state.params.config);
  std::vector<Real> grad(state.params.size());
  long n_r = 0, n_f = 0, n_g = 0;
  for (int inner = 0; inner < cfg.n_inner; ++inner) {
    double epoch_loss = 0;
    long epoch_batches = 0;
    if (items.empty()) {
      out.inner_losses.push_back(0.0);
      continue;
    }
    const auto bs = detail::batches(items.size(), cfg.batch_size,
                                    derive_seed(cfg.master_seed, 0x1A, cache.outer_epoch(), inner));
    for (std::size_t b = 0; b < bs.size(); ++b) {
      std::fill(grad.begin(), grad.end(), Real(0));
      const double scale = 1.0 / static_cast<double>(bs[b].size());
      double loss = 0;
      for (auto pos : bs[b]) {
        const std::size_t i = items[pos];
        const Sample& s = samples[i];
        const TokenSeq seq = s.sequence();
        tr.reset();
        model::Transformer<Real>::forward(state.params, seq, tr);
        const auto lp = objectives::target_logp(tr, seq);
        objectives::TokenLoss tl;
        const model::LogProbs<Real>* rf = ref_full[i] ? &*ref_full[i] : nullptr;
        switch (cfg.method) {
          case Method::Au:
          case Method::AuCeOnly:
          case Method::AuNpoOnly: {
            objectives::LossBreakdown bd;
            const std::vector<double> zeros(seq.size(), 0.0);
            tl = objectives::au_token_loss(tr, s, lp, need_ref ? std::span<const double>(ref_lp[i]) : zeros, w, bd,
                                           cfg.reg_mode, rf);
            if (bd.dropped_retain) ++out.dropped_retain; else { out.retain += bd.retain; ++n_r; }
            if (bd.dropped_forget) ++out.dropped_forget; else { out.forget += bd.forget; ++n_f; }
            if (bd.dropped_reg) ++out.dropped_reg; else { out.reg += bd.reg; ++n_g; }
            break;
          }
          case Method::Ga: tl = objectives::token::ga(lp, s.mask.forget()); break;
          case Method::Npo: tl = objectives::token::seq_npo(lp, ref_lp[i], s.mask.forget(), w.beta); break;
          case Method::Pmc:
            tl = objectives::token::ce(lp, objectives::all_targets(static_cast<int>(seq.size())));
            break;
        }
        loss += scale * tl.loss;
        if (!tl.dropped) objectives::accumulate_gradient<Real>(state.params, tr, seq, tl, scale, grad, rf);
      }
      if (cfg.method == Method::Pmc && cfg.pmc_weight > 0) {
        Rng rng(derive_seed(cfg.master_seed, 0x2B, cache.outer_epoch(), inner, static_cast<int>(b)));
        const int R = cfg.batch_size;
        const double rs = cfg.pmc_weight / static_cast<double>(R);
        for (int j = 0; j < R; ++j) {
          const TokenSeq& doc = retain_docs[rng.below(retain_docs.size())];
          tr.reset();
          model::Transformer<Real>::forward(state.params, doc, tr);
          const auto tl = objectives::full_ce(tr, doc);
          loss += rs * tl.loss;
          objectives::accumulate_gradient<Real>(state.params, tr, doc, tl, rs, grad);
        }
      }
      const long step = state.step + 1;
      detail::check_finite_step(grad, loss, step);
      model::adam_step(state.params, std::span<const Real>(grad), state.optimizer, as);
      state.step = step;
      ++out.steps;
      if (!all_finite<Real>(state.params.data))
        throw NumericError("non-finite parameters after step " + std::to_string(step), step);
      epoch_loss += loss;
      ++epoch_batches;
    }
    out.inner_losses.push_back(epoch_loss / static_cast<double>(epoch_batches));
  }
  if (n_r) out.retain /= static_cast<double>(n_r);
  if (n_f) out.forget /= static_cast<double>(n_f);
  if (n_g) out.reg /= static_cast<double>(n_g);
  return out;
}

struct LifecycleEvent {
  int prompt_id = 0;
  bool mutated = false;  // false: line terminated at the cap
  int child_id = -1;
};

// Retires every prompt that produced no hallucinations this epoch or has
// trained for exhaustion_epochs outer epochs; spawns a mutated child unless
// the prompt is at the mutation cap.
template <class Real>
std::vector<LifecycleEvent> check_exhaustion_and_mutate(RunState<Real>& state,
                                                        const std::map<int, PromptTally>& counts,
                                                        const LoopConfig& cfg, const corpus::World& w) {
  std::vector<LifecycleEvent> events;
  std::vector<PromptState> next;
  std::vector<PromptState> children;
  for (auto p : state.active) {
    p.outer_epochs_trained += 1;
    const auto it = counts.find(p.prompt_id);
    const long n_halluc = it == counts.end() ? 0 : it->second.n_halluc;
    if (n_halluc > 0 && p.outer_epochs_trained < cfg.exhaustion_epochs) {
      next.push_back(p);
      continue;
    }
    LifecycleEvent ev{p.prompt_id, false, -1};
    if (p.mutation_count < cfg.max_mutations) {
      auto m = corpus::mutate_prompt(p, w.tasks.at(static_cast<std::size_t>(p.task_id)),
                                     static_cast<int>(w.tasks.size()), cfg.max_mutations, cfg.master_seed);
      state.retired.push_back(m.retired_parent);
      ev.mutated = true;
      ev.child_id = m.child.prompt_id;
      children.push_back(m.child);
    } else {
      p.status = corpus::PromptStatus::Retired;
      state.retired.push_back(p);
    }
    events.push_back(ev);
  }
  next.insert(next.end(), children.begin(), children.end());
  state.active = std::move(next);
  return events;
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------
inline json tally_json(const PromptTally& t) {
  ordered_json j;
  j["n_halluc"] = t.n_halluc;
  j["n_total"] = t.n_total;
  j["hr"] = t.n_total ? json(100.0 * static_cast<double>(t.n_halluc) / static_cast<double>(t.n_total))
                      : json(nullptr);
  return j;
}

template <class Real>
struct RunResult {
  model::Parameters<Real> params;
  std::vector<ordered_json> metrics;
  std::vector<PromptState> active;
  std::vector<PromptState> retired;
  long steps = 0;
  std::string reference_hash_start, reference_hash_end;
};

using MetricsSink = std::function<void(const ordered_json&)>;

template <class Real>
RunResult<Real> run_unlearning(const corpus::World& w, const model::Parameters<Real>& base, const LoopConfig& cfg,
                               const std::vector<TokenSeq>& retain_docs = {}, const MetricsSink& sink = {}) {
  validate(cfg);
  RunState<Real> state(base, corpus::initial_prompts(w));
  const std::string ref_hash = model::parameter_hash(state.reference.params());
  const int n_outer = uses_static_cache(cfg.method) ? 1 : cfg.n_outer;
  const bool mutate = is_au_family(cfg.method);

  for (int e = 0; e < n_outer; ++e) {
    state.outer_epoch = e;
    const OuterResult outer = run_outer_epoch(state, cfg, w);
    if (outer.run_complete) break;
    const InnerResult inner = run_inner_epochs(state, outer.cache, cfg, retain_docs);
    outer.cache.verify();

    std::vector<LifecycleEvent> events;
    if (mutate) {
      events = check_exhaustion_and_mutate(state, outer.per_prompt, cfg, w);
    } else {
      for (auto& p : state.active) p.outer_epochs_trained += 1;
    }

    PromptTally pooled;
    for (int m = 1; m < 3; ++m) {
      pooled.n_halluc += outer.per_mode[static_cast<std::size_t>(m)].n_halluc;
      pooled.n_total += outer.per_mode[static_cast<std::size_t>(m)].n_total;
    }
    ordered_json rec;
    rec["outer_epoch"] = e;
    rec["method"] = method_name(cfg.method);
    ordered_json hr;
    hr["code"] = tally_json(outer.per_mode[0]);
    hr["required"] = tally_json(outer.per_mode[1]);
    hr["helpful"] = tally_json(outer.per_mode[2]);
    hr["pooled"] = tally_json(pooled);
    rec["hr"] = hr;
    ordered_json loss;
    loss["total"] = inner.inner_losses.empty() ? 0.0 : inner.inner_losses.back();
    loss["retain"] = inner.retain;
    loss["forget"] = inner.forget;
    loss["reg"] = inner.reg;
    loss["dropped_flags"] = {{"retain", inner.dropped_retain}, {"forget", inner.dropped_forget},
                             {"reg", inner.dropped_reg}};
    rec["loss"] = loss;
    rec["inner_losses"] = inner.inner_losses;
    rec["steps"] = state.step;
    rec["cache_size"] = outer.cache.size();
    rec["cache_hash"] = outer.cache.hash();
    rec["active_prompts"] = state.active.size();
    rec["retired_prompts"] = state.retired.size();
    ordered_json ev = ordered_json::array();
    for (const auto& x : events) ev.push_back({{"prompt_id", x.prompt_id}, {"mutated", x.mutated}, {"child_id", x.child_id}});
    rec["lifecycle"] = ev;
    if (sink) sink(rec);
    state.metrics.push_back(std::move(rec));
  }

  RunResult<Real> r;
  r.reference_hash_start = ref_hash;
  r.reference_hash_end = model::parameter_hash(state.reference.params());
  if (r.reference_hash_start != r.reference_hash_end) throw CorruptionError("reference model changed during the run");
  r.params = std::move(state.params);
  r.metrics = std::move(state.metrics);
  r.active = std::move(state.active);
  r.retired = std::move(state.retired);
  r.steps = state.step;
  return r;
}

}  // namespace au::loop

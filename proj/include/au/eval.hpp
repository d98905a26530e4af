#pragma once

// Evaluation: dual-mode hallucination rate, KL drift against the frozen base
// model over three context families, held-out utility, and report files.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "au/common.hpp"
#include "au/corpus.hpp"
#include "au/detect.hpp"
#include "au/model.hpp"

namespace au::eval {

using corpus::Mode;

// ---------------------------------------------------------------------------
// Hallucination rate
// ---------------------------------------------------------------------------
struct Counts {
  long n_halluc = 0;
  long n_total = 0;

  // Undefined (nullopt) when nothing was emitted.
  std::optional<double> rate() const {
    if (n_total == 0) return std::nullopt;
    return 100.0 * static_cast<double>(n_halluc) / static_cast<double>(n_total);
  }
  Counts& operator+=(const Counts& o) {
    n_halluc += o.n_halluc;
    n_total += o.n_total;
    return *this;
  }
};

inline std::optional<double> hallucination_rate_from_counts(long n_halluc, long n_total) {
  if (n_halluc < 0 || n_total < 0 || n_halluc > n_total) throw ArgumentError("invalid hallucination counts");
  return Counts{n_halluc, n_total}.rate();
}

struct PromptCounts {
  int prompt_id = 0;
  int task_id = 0;
  Counts counts;
};

struct HallucinationReport {
  Counts pooled;
  Counts required;
  Counts helpful;
  std::vector<PromptCounts> per_prompt;

  std::optional<double> hr() const { return pooled.rate(); }
};

inline json rate_json(const std::optional<double>& r) { return r ? json(*r) : json(nullptr); }

inline ordered_json to_json(const Counts& c) {
  ordered_json j;
  j["n_halluc"] = c.n_halluc;
  j["n_total"] = c.n_total;
  j["hr"] = rate_json(c.rate());
  return j;
}

inline ordered_json to_json(const HallucinationReport& r) {
  ordered_json j;
  j["pooled"] = to_json(r.pooled);
  j["required"] = to_json(r.required);
  j["helpful"] = to_json(r.helpful);
  ordered_json pp = ordered_json::array();
  for (const auto& p : r.per_prompt) {
    ordered_json e = to_json(p.counts);
    e["prompt_id"] = p.prompt_id;
    e["task_id"] = p.task_id;
    pp.push_back(e);
  }
  j["per_prompt"] = pp;
  return j;
}

struct HrSettings {
  int k = 20;
  model::GenerationSettings generation;
  std::uint64_t seed = 0;
};

inline std::uint64_t eval_seed(std::uint64_t master, int prompt_id, int k, Mode mode) {
  return derive_seed(master, 0xEA, prompt_id, k, static_cast<int>(mode));
}

// Both elicitation modes, K generations each, names de-duplicated per
// response and pooled.
template <class Real>
HallucinationReport hallucination_rate(const model::Parameters<Real>& params,
                                       const std::vector<corpus::PromptState>& prompts, const HrSettings& s,
                                       const corpus::RegistrySnapshot& registry, const corpus::Vocabulary& vocab) {
  if (prompts.empty()) throw ArgumentError("hallucination_rate: empty prompt pool");
  if (s.k < 1) throw ArgumentError("hallucination_rate: K must be >= 1");
  HallucinationReport rep;
  model::Trace<Real> tr(params.config);
  for (const auto& pr : prompts) {
    corpus::PromptState live = pr;
    live.status = corpus::PromptStatus::Active;  // retired prompts are still evaluated
    PromptCounts pc{pr.prompt_id, pr.task_id, {}};
    for (int k = 0; k < s.k; ++k) {
      for (const Mode mode : {Mode::Required, Mode::Helpful}) {
        const TokenSeq ctx = corpus::render_prompt(live, mode, vocab);
        auto gen = s.generation;
        gen.seed = eval_seed(s.seed, pr.prompt_id, k, mode);
        gen.stop_token = vocab.marker(corpus::Marker::End);
        TokenSeq seq = ctx;
        const TokenSeq completion = model::sample_completion(params, ctx, gen, &tr);
        seq.insert(seq.end(), completion.begin(), completion.end());
        auto spans = detect::resolve_spans(detect::extract_package_spans(seq, vocab), registry);
        std::erase_if(spans, [&](const detect::PackageSpan& sp) { return sp.start < static_cast<int>(ctx.size()); });
        const auto rc = detect::count_unique_names(spans);
        const Counts c{rc.n_halluc, rc.n_total};
        (mode == Mode::Required ? rep.required : rep.helpful) += c;
        pc.counts += c;
      }
    }
    rep.pooled += pc.counts;
    rep.per_prompt.push_back(pc);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// KL drift
// ---------------------------------------------------------------------------
enum class Family { Code, Instruct, Package };

inline std::string_view family_name(Family f) {
  switch (f) {
    case Family::Code: return "code";
    case Family::Instruct: return "instruct";
    case Family::Package: return "package";
  }
  return "?";
}

inline Family family_from_name(std::string_view s) {
  if (s == "code") return Family::Code;
  if (s == "instruct") return Family::Instruct;
  if (s == "package") return Family::Package;
  throw ArgumentError("unknown context family '" + std::string(s) + "'");
}

// Code contexts end in CODE, package contexts in REQ or HELPFUL (alternating),
// instruction contexts stop after the task surface.
inline TokenSeq family_context(const corpus::PromptState& p, Family f, int index, const corpus::Vocabulary& v) {
  TokenSeq out{v.marker(corpus::Marker::Task)};
  out.insert(out.end(), p.surface.begin(), p.surface.end());
  switch (f) {
    case Family::Code: out.push_back(v.marker(corpus::Marker::Code)); break;
    case Family::Package:
      out.push_back(v.marker(index % 2 == 0 ? corpus::Marker::Req : corpus::Marker::Helpful));
      break;
    case Family::Instruct: break;
  }
  return out;
}

struct DriftResult {
  double mean_kl = 0;
  long n_positions = 0;
  int n_completions = 0;
};

// Exact KL(p || q) between two log-distributions.
template <class Real>
double kl_rows(const Real* lp, const Real* lq, int V) {
  double kl = 0;
  for (int v = 0; v < V; ++v) {
    const double a = static_cast<double>(lp[v]);
    kl += std::exp(a) * (a - static_cast<double>(lq[v]));
  }
  return kl;
}

// Mean per-token KL(pi_theta || pi_ref) along M trajectories sampled from
// pi_theta, with exact vocabulary sums at every generated position.
template <class Real>
DriftResult kl_drift(const model::Parameters<Real>& params, const model::ReferenceModel<Real>& ref,
                     const std::vector<corpus::PromptState>& prompts, Family family, int M, int L,
                     std::uint64_t seed, const corpus::Vocabulary& vocab) {
  if (M < 1 || L < 1) throw ArgumentError("kl_drift: M and L must be >= 1");
  if (prompts.empty()) throw ArgumentError("kl_drift: empty prompt pool");
  model::Trace<Real> tp(params.config), tq(ref.config());
  const int V = params.config.vocab_size;
  DriftResult r;
  double sum = 0;
  for (int m = 0; m < M; ++m) {
    const auto& pr = prompts[static_cast<std::size_t>(m) % prompts.size()];
    const TokenSeq ctx = family_context(pr, family, m, vocab);
    model::GenerationSettings gen;
    gen.max_new_tokens = L;
    gen.stop_token = vocab.marker(corpus::Marker::End);
    gen.seed = derive_seed(seed, 0xD1, static_cast<int>(family), m);
    const TokenSeq completion = model::sample_completion(params, ctx, gen, &tp);
    TokenSeq seq = ctx;
    seq.insert(seq.end(), completion.begin(), completion.end());
    tp.reset();
    tq.reset();
    model::Transformer<Real>::forward(params, seq, tp);
    model::Transformer<Real>::forward(ref.params(), seq, tq);
    // Distributions that generated each completion token.
    for (std::size_t t = ctx.size() - 1; t + 1 < seq.size(); ++t) {
      sum += kl_rows(tp.logp(static_cast<int>(t)), tq.logp(static_cast<int>(t)), V);
      ++r.n_positions;
    }
    ++r.n_completions;
  }
  r.mean_kl = r.n_positions ? sum / static_cast<double>(r.n_positions) : 0.0;
  return r;
}

struct DriftReport {
  DriftResult code, instruct, package;
};

inline ordered_json to_json(const DriftReport& d) {
  ordered_json j;
  for (auto [name, r] : {std::pair{"code", &d.code}, std::pair{"instruct", &d.instruct},
                         std::pair{"package", &d.package}}) {
    ordered_json e;
    e["mean_kl"] = r->mean_kl;
    e["n_positions"] = r->n_positions;
    e["n_completions"] = r->n_completions;
    j[name] = e;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Utility
// ---------------------------------------------------------------------------
struct UtilityReport {
  double nll = 0;
  double perplexity = 1;
  long n_tokens = 0;
};

template <class Real>
UtilityReport utility_nll(const model::Parameters<Real>& params, const std::vector<corpus::CorpusDocument>& docs) {
  if (docs.empty()) throw ArgumentError("utility_nll: empty corpus");
  model::Trace<Real> tr(params.config);
  // Neumaier-compensated sum of token NLLs.
  double sum = 0, comp = 0;
  long n = 0;
  for (const auto& d : docs) {
    tr.reset();
    model::Transformer<Real>::forward(params, d.tokens, tr);
    for (std::size_t t = 1; t < d.tokens.size(); ++t) {
      const double x = -static_cast<double>(tr.logp(static_cast<int>(t) - 1)[d.tokens[t]]);
      const double y = sum + x;
      comp += std::abs(sum) >= std::abs(x) ? (sum - y) + x : (x - y) + sum;
      sum = y;
      ++n;
    }
  }
  sum += comp;
  if (n == 0) throw ArgumentError("utility_nll: corpus has no prediction targets");
  UtilityReport r;
  r.nll = sum / static_cast<double>(n);
  r.perplexity = std::exp(r.nll);
  r.n_tokens = n;
  return r;
}

inline ordered_json to_json(const UtilityReport& u) {
  ordered_json j;
  j["nll"] = u.nll;
  j["perplexity"] = u.perplexity;
  j["n_tokens"] = u.n_tokens;
  return j;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------
struct EvalSettings {
  int k = 20;
  int kl_m = 20;
  int kl_l = 64;
  std::uint64_t seed = 0;
};

struct MethodReport {
  std::string method;
  HallucinationReport seen;
  HallucinationReport unseen;
  DriftReport drift;
  UtilityReport utility;
};

template <class Real>
MethodReport evaluate(const std::string& method, const model::Parameters<Real>& params,
                      const model::ReferenceModel<Real>& base, const corpus::World& w,
                      const std::vector<corpus::PromptState>& seen, const std::vector<corpus::PromptState>& unseen,
                      const std::vector<corpus::CorpusDocument>& utility_docs, const EvalSettings& s) {
  MethodReport r;
  r.method = method;
  HrSettings hs;
  hs.k = s.k;
  hs.seed = s.seed;
  r.seen = hallucination_rate(params, seen, hs, w.registry, w.vocab);
  if (!unseen.empty()) r.unseen = hallucination_rate(params, unseen, hs, w.registry, w.vocab);
  r.drift.code = kl_drift(params, base, seen, Family::Code, s.kl_m, s.kl_l, s.seed, w.vocab);
  r.drift.instruct = kl_drift(params, base, seen, Family::Instruct, s.kl_m, s.kl_l, s.seed, w.vocab);
  r.drift.package = kl_drift(params, base, seen, Family::Package, s.kl_m, s.kl_l, s.seed, w.vocab);
  r.utility = utility_nll(params, utility_docs);
  return r;
}

inline ordered_json to_json(const MethodReport& r) {
  ordered_json j;
  j["method"] = r.method;
  j["seen"] = to_json(r.seen);
  j["unseen"] = to_json(r.unseen);
  j["drift"] = to_json(r.drift);
  j["utility"] = to_json(r.utility);
  return j;
}

inline MethodReport method_report_from_json(const json& j) {
  auto counts = [](const json& c) { return Counts{c.at("n_halluc").get<long>(), c.at("n_total").get<long>()}; };
  auto hr = [&](const json& h) {
    HallucinationReport r;
    r.pooled = counts(h.at("pooled"));
    r.required = counts(h.at("required"));
    r.helpful = counts(h.at("helpful"));
    for (const auto& e : h.at("per_prompt"))
      r.per_prompt.push_back({e.at("prompt_id").get<int>(), e.at("task_id").get<int>(), counts(e)});
    return r;
  };
  auto drift = [](const json& e) {
    return DriftResult{e.at("mean_kl").get<double>(), e.at("n_positions").get<long>(),
                       e.at("n_completions").get<int>()};
  };
  MethodReport r;
  r.method = j.at("method").get<std::string>();
  r.seen = hr(j.at("seen"));
  r.unseen = hr(j.at("unseen"));
  r.drift = {drift(j.at("drift").at("code")), drift(j.at("drift").at("instruct")),
             drift(j.at("drift").at("package"))};
  const auto& u = j.at("utility");
  r.utility = {u.at("nll").get<double>(), u.at("perplexity").get<double>(), u.at("n_tokens").get<long>()};
  return r;
}

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {"method",  "HR_total", "HR_abs_reduction", "KL_code",
                                                "KL_instr", "KL_pkg",  "utility_ppl",      "utility_rel_change"};
  return cols;
}

inline std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

inline std::string fmt(const std::optional<double>& x) { return x ? fmt(*x) : std::string("NA"); }

// One row per report, in input order. Reductions and relative changes are
// taken against the row named `base_method` when present.
inline void emit_report(const std::vector<MethodReport>& reports, const std::string& csv_path,
                        const std::string& json_path, const std::string& manifest_hash = "",
                        const std::string& base_method = "base") {
  if (reports.empty()) throw ArgumentError("emit_report: no reports");
  const MethodReport* base = nullptr;
  for (const auto& r : reports)
    if (r.method == base_method) base = &r;

  std::string csv;
  if (!manifest_hash.empty()) csv += "# manifest=" + manifest_hash + "\n";
  for (std::size_t i = 0; i < report_columns().size(); ++i) csv += (i ? "," : "") + report_columns()[i];
  csv += "\n";
  ordered_json rows = ordered_json::array();
  for (const auto& r : reports) {
    const auto hr = r.seen.hr();
    std::optional<double> red, rel;
    if (base && hr && base->seen.hr()) red = *base->seen.hr() - *hr;
    if (base) rel = (r.utility.perplexity - base->utility.perplexity) / base->utility.perplexity;
    const std::vector<std::string> cells = {r.method,
                                            fmt(hr),
                                            fmt(red),
                                            fmt(r.drift.code.mean_kl),
                                            fmt(r.drift.instruct.mean_kl),
                                            fmt(r.drift.package.mean_kl),
                                            fmt(r.utility.perplexity),
                                            fmt(rel)};
    for (std::size_t i = 0; i < cells.size(); ++i) csv += (i ? "," : "") + cells[i];
    csv += "\n";
    ordered_json row;
    row["method"] = r.method;
    row["HR_total"] = rate_json(hr);
    row["HR_abs_reduction"] = rate_json(red);
    row["KL_code"] = r.drift.code.mean_kl;
    row["KL_instr"] = r.drift.instruct.mean_kl;
    row["KL_pkg"] = r.drift.package.mean_kl;
    row["utility_ppl"] = r.utility.perplexity;
    row["utility_rel_change"] = rate_json(rel);
    row["HR_unseen"] = rate_json(r.unseen.hr());
    rows.push_back(row);
  }
  ordered_json doc;
  if (!manifest_hash.empty()) doc["manifest_hash"] = manifest_hash;
  doc["columns"] = report_columns();
  doc["rows"] = rows;

  auto write = [](const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    if (!out) throw IoError("write failed for " + path);
  };
  write(csv_path, csv);
  write(json_path, doc.dump(2) + "\n");
}

}  // namespace au::eval

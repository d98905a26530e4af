#pragma once

// Hallucination detection: package-span extraction, registry resolution,
// tri-mask construction and dual-mode elicitation.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "au/common.hpp"
#include "au/corpus.hpp"
#include "au/model.hpp"

namespace au::detect {

using corpus::Marker;
using corpus::Mode;

enum class Verdict { Valid, Hallucinated };

struct PackageSpan {
  int start = 0;  // inclusive
  int end = 0;    // exclusive
  std::string name;
  std::optional<Verdict> verdict;
  bool operator==(const PackageSpan&) const = default;
};

// Per-token routing label: 0 regularize, 1 reinforce, 2 suppress.
struct TriMask {
  std::vector<std::uint8_t> values;

  std::size_t size() const { return values.size(); }

  // Index sets over prediction targets 1..T-1 (position 0 is never predicted).
  std::vector<int> positions(std::uint8_t label) const {
    std::vector<int> out;
    for (std::size_t t = 1; t < values.size(); ++t)
      if (values[t] == label) out.push_back(static_cast<int>(t));
    return out;
  }
  std::vector<int> reg() const { return positions(0); }
  std::vector<int> retain() const { return positions(1); }
  std::vector<int> forget() const { return positions(2); }
  bool operator==(const TriMask&) const = default;
};

// Spans are name groups of exactly one prefix and one suffix sub-token that
// either directly follow IMPORT (and are not followed by another name
// sub-token) or sit inside a REQ/HELPFUL list between a list delimiter and a
// SEP/END terminator. Anything else is skipped.
inline std::vector<PackageSpan> extract_package_spans(std::span<const TokenId> tokens,
                                                      const corpus::Vocabulary& vocab) {
  std::vector<PackageSpan> spans;
  const int T = static_cast<int>(tokens.size());
  auto tok = [&](int i) { return tokens[static_cast<std::size_t>(i)]; };
  bool in_list = false;
  for (int i = 0; i < T; ++i) {
    const TokenId x = tok(i);
    bool delimiter = false, list_delim = false;
    if (vocab.is_marker(x, Marker::Import)) {
      in_list = false;
      delimiter = true;
    } else if (vocab.is_marker(x, Marker::Req) || vocab.is_marker(x, Marker::Helpful)) {
      in_list = true;
      delimiter = list_delim = true;
    } else if (vocab.is_marker(x, Marker::Sep)) {
      delimiter = list_delim = in_list;
    } else if (vocab.is_marker(x, Marker::Task) || vocab.is_marker(x, Marker::Code) ||
               vocab.is_marker(x, Marker::End)) {
      in_list = false;
    }
    if (!delimiter) continue;

    int j = i + 1;
    while (j < T && vocab.is_name_part(tok(j))) ++j;
    if (j - (i + 1) != 2 || !vocab.is_prefix(tok(i + 1)) || !vocab.is_suffix(tok(i + 2))) continue;
    if (list_delim && !(j < T && (vocab.is_marker(tok(j), Marker::Sep) || vocab.is_marker(tok(j), Marker::End))))
      continue;
    spans.push_back({i + 1, i + 3, vocab.token(tok(i + 1)) + vocab.token(tok(i + 2)), std::nullopt});
  }
  return spans;
}

inline std::vector<PackageSpan> resolve_spans(std::vector<PackageSpan> spans,
                                              const corpus::RegistrySnapshot& registry) {
  for (auto& s : spans) s.verdict = registry.contains(s.name) ? Verdict::Valid : Verdict::Hallucinated;
  return spans;
}

inline TriMask build_trimask(int prompt_len, int total_len, const std::vector<PackageSpan>& spans) {
  if (prompt_len < 0 || total_len < prompt_len) throw BoundsError("build_trimask: invalid lengths");
  TriMask m;
  m.values.assign(static_cast<std::size_t>(total_len), 0);
  for (const auto& s : spans) {
    if (s.start < prompt_len || s.start >= s.end || s.end > total_len)
      throw BoundsError("span [" + std::to_string(s.start) + "," + std::to_string(s.end) +
                        ") lies outside the completion region [" + std::to_string(prompt_len) + "," +
                        std::to_string(total_len) + ")");
    if (!s.verdict) throw ArgumentError("build_trimask: span '" + s.name + "' has no verdict");
    const std::uint8_t label = *s.verdict == Verdict::Valid ? 1 : 2;
    for (int t = s.start; t < s.end; ++t) {
      auto& v = m.values[static_cast<std::size_t>(t)];
      if (v != 0) throw BoundsError("overlapping spans at position " + std::to_string(t));
      v = label;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------
struct Sample {
  TokenSeq prompt;
  TokenSeq completion;
  TriMask mask;
  Mode mode = Mode::Code;
  int prompt_id = 0;
  int outer_epoch = 0;
  int sample_index = 0;

  TokenSeq sequence() const {
    TokenSeq s = prompt;
    s.insert(s.end(), completion.begin(), completion.end());
    return s;
  }
  int length() const { return static_cast<int>(prompt.size() + completion.size()); }
  bool operator==(const Sample&) const = default;
};

// Per-response name counts with duplicates collapsed.
struct ResponseCount {
  int n_total = 0;
  int n_halluc = 0;
};

inline ResponseCount count_unique_names(const std::vector<PackageSpan>& resolved) {
  std::set<std::string> seen;
  ResponseCount c;
  for (const auto& s : resolved) {
    if (!seen.insert(s.name).second) continue;
    ++c.n_total;
    if (s.verdict == Verdict::Hallucinated) ++c.n_halluc;
  }
  return c;
}

inline Sample label_sample(TokenSeq prompt, TokenSeq completion, Mode mode, const corpus::Vocabulary& vocab,
                           const corpus::RegistrySnapshot& registry, std::vector<PackageSpan>* resolved_out = nullptr) {
  Sample s;
  s.prompt = std::move(prompt);
  s.completion = std::move(completion);
  s.mode = mode;
  const TokenSeq seq = s.sequence();
  auto resolved = resolve_spans(extract_package_spans(seq, vocab), registry);
  s.mask = build_trimask(static_cast<int>(s.prompt.size()), static_cast<int>(seq.size()), resolved);
  if (resolved_out) *resolved_out = std::move(resolved);
  return s;
}

inline std::uint64_t sample_seed(std::uint64_t master, int prompt_id, int outer_epoch, int k, Mode mode) {
  return derive_seed(master, 0xE1, prompt_id, outer_epoch, k, static_cast<int>(mode));
}

struct ElicitSettings {
  int k = 5;
  model::GenerationSettings generation;  // seed field is ignored; derived per sample
  std::uint64_t master_seed = 0;
  int outer_epoch = 0;
};

// K generations per call; each yields one code-mode, one required-mode and
// one helpful-mode sample, all masked.
template <class Real>
std::vector<Sample> elicit_and_label(const model::Parameters<Real>& params, const corpus::PromptState& prompt,
                                     const ElicitSettings& settings, const corpus::RegistrySnapshot& registry,
                                     const corpus::Vocabulary& vocab,
                                     std::vector<ResponseCount>* counts = nullptr) {
  if (!prompt.active()) throw LifecycleError("cannot elicit from retired prompt " + std::to_string(prompt.prompt_id));
  if (settings.k < 1) throw ArgumentError("elicit_and_label: K must be >= 1");
  std::vector<Sample> out;
  model::Trace<Real> trace(params.config);
  for (int k = 0; k < settings.k; ++k) {
    for (const Mode mode : corpus::kAllModes) {
      const TokenSeq ctx = corpus::render_prompt(prompt, mode, vocab);
      auto gen = settings.generation;
      gen.seed = sample_seed(settings.master_seed, prompt.prompt_id, settings.outer_epoch, k, mode);
      gen.stop_token = vocab.marker(Marker::End);
      TokenSeq completion = model::sample_completion(params, ctx, gen, &trace);
      std::vector<PackageSpan> resolved;
      Sample s = label_sample(ctx, std::move(completion), mode, vocab, registry, &resolved);
      s.prompt_id = prompt.prompt_id;
      s.outer_epoch = settings.outer_epoch;
      s.sample_index = k;
      if (counts) counts->push_back(count_unique_names(resolved));
      out.push_back(std::move(s));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON-lines cache format (fixed field order).
// ---------------------------------------------------------------------------
inline ordered_json to_json(const Sample& s) {
  ordered_json j;
  j["prompt_id"] = s.prompt_id;
  j["outer_epoch"] = s.outer_epoch;
  j["sample_index"] = s.sample_index;
  j["mode"] = corpus::mode_name(s.mode);
  j["prompt"] = s.prompt;
  j["completion"] = s.completion;
  j["mask"] = s.mask.values;
  return j;
}

inline Sample sample_from_json(const json& j) {
  Sample s;
  s.prompt_id = j.at("prompt_id").get<int>();
  s.outer_epoch = j.at("outer_epoch").get<int>();
  s.sample_index = j.at("sample_index").get<int>();
  s.mode = corpus::mode_from_name(j.at("mode").get<std::string>());
  s.prompt = j.at("prompt").get<TokenSeq>();
  s.completion = j.at("completion").get<TokenSeq>();
  s.mask.values = j.at("mask").get<std::vector<std::uint8_t>>();
  if (static_cast<int>(s.mask.size()) != s.length()) throw MaskError("sample mask length mismatch");
  return s;
}

inline std::string to_jsonl(const std::vector<Sample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    out += to_json(s).dump();
    out.push_back('\n');
  }
  return out;
}

}  // namespace au::detect

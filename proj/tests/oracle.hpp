#pragma once

// Test-only oracles, independent of the code paths they check.

#include <cmath>
#include <functional>
#include <vector>

#include "au/detect.hpp"
#include "au/model.hpp"

namespace au::testing {

using corpus::Marker;

struct GradCheck {
  double rel_norm_error = 0;   // ||a - n|| / max(||a||, ||n||)
  double max_component_error = 0;  // max |a_i - n_i| / max(|a_i|, |n_i|) over |n_i| > floor
  std::size_t checked = 0;
};

// Central differences of a scalar loss over every parameter.
inline GradCheck check_gradient(model::Parameters<double> params, const std::vector<double>& analytic,
                                const std::function<double(const model::Parameters<double>&)>& loss,
                                double h = 1e-5, double floor = 1e-6) {
  GradCheck r;
  double diff2 = 0, a2 = 0, n2 = 0;
  for (std::size_t i = 0; i < params.data.size(); ++i) {
    const double x = params.data[i];
    params.data[i] = x + h;
    const double up = loss(params);
    params.data[i] = x - h;
    const double down = loss(params);
    params.data[i] = x;
    const double num = (up - down) / (2 * h);
    const double a = analytic[i];
    diff2 += (a - num) * (a - num);
    a2 += a * a;
    n2 += num * num;
    if (std::abs(num) > floor || std::abs(a) > floor) {
      r.max_component_error =
          std::max(r.max_component_error, std::abs(a - num) / std::max(std::abs(a), std::abs(num)));
      ++r.checked;
    }
  }
  r.rel_norm_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
  return r;
}

inline model::ModelConfig reduced_config() {
  model::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.width = 8;
  c.context_length = 16;
  c.vocab_size = 16;
  c.mlp_mult = 2;
  return c;
}

// Reference scanner: every two-token window is judged on its own, with the
// list context recomputed by scanning backwards.
inline std::vector<std::uint8_t> brute_force_mask(const TokenSeq& seq, int prompt_len, const corpus::World& w) {
  const auto& v = w.vocab;
  const int T = static_cast<int>(seq.size());
  auto is = [&](int i, Marker x) { return i >= 0 && i < T && seq[static_cast<std::size_t>(i)] == v.marker(x); };
  auto in_list = [&](int i) {
    for (int j = i; j >= 0; --j) {
      if (is(j, Marker::Req) || is(j, Marker::Helpful)) return true;
      if (is(j, Marker::Task) || is(j, Marker::Code) || is(j, Marker::Import) || is(j, Marker::End)) return false;
    }
    return false;
  };
  std::vector<std::uint8_t> mask(seq.size(), 0);
  for (int i = 1; i + 1 < T; ++i) {
    const TokenId a = seq[static_cast<std::size_t>(i)], b = seq[static_cast<std::size_t>(i + 1)];
    if (!v.is_prefix(a) || !v.is_suffix(b)) continue;
    const bool right_name = i + 2 < T && v.is_name_part(seq[static_cast<std::size_t>(i + 2)]);
    bool ok = false;
    if (is(i - 1, Marker::Import))
      ok = !right_name;
    else if ((is(i - 1, Marker::Req) || is(i - 1, Marker::Helpful) || is(i - 1, Marker::Sep)) && in_list(i - 1))
      ok = is(i + 2, Marker::Sep) || is(i + 2, Marker::End);
    if (!ok || i < prompt_len) continue;
    const std::uint8_t label = w.registry.contains(v.token(a) + v.token(b)) ? 1 : 2;
    mask[static_cast<std::size_t>(i)] = mask[static_cast<std::size_t>(i + 1)] = label;
  }
  return mask;
}

// Grammar-biased random sequences: mostly markers and name parts, with some
// well-formed fragments spliced in.
inline TokenSeq fuzz_sequence(Rng& rng, const corpus::World& w) {
  const auto& v = w.vocab;
  const auto [p0, p1] = v.prefix_range();
  const auto [s0, s1] = v.suffix_range();
  const auto [c0, c1] = v.code_range();
  TokenSeq out;
  const int n = 3 + static_cast<int>(rng.below(40));
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    if (u < 0.3) {
      out.push_back(static_cast<TokenId>(rng.below(7)));
    } else if (u < 0.55) {
      out.push_back(p0 + static_cast<TokenId>(rng.below(static_cast<std::size_t>(p1 - p0))));
    } else if (u < 0.8) {
      out.push_back(s0 + static_cast<TokenId>(rng.below(static_cast<std::size_t>(s1 - s0))));
    } else if (u < 0.9) {
      const auto names = rng.bernoulli(0.5) ? w.fake_names() : w.registry.sorted_names();
      const auto [a, b] = w.name_tokens(names[rng.below(names.size())]);
      const auto shape = rng.below(3);
      if (shape == 0) out.push_back(v.marker(Marker::Import));
      if (shape == 1) out.push_back(v.marker(rng.bernoulli(0.5) ? Marker::Req : Marker::Sep));
      out.push_back(a);
      out.push_back(b);
      if (shape == 1) out.push_back(v.marker(rng.bernoulli(0.7) ? Marker::Sep : Marker::End));
    } else {
      out.push_back(c0 + static_cast<TokenId>(rng.below(static_cast<std::size_t>(c1 - c0))));
    }
  }
  return out;
}

}  // namespace au::testing

#pragma once

// The run manifest: one JSON document configuring world, model, pretraining,
// every method's loop settings and evaluation. Parsing is strict: unknown
// keys and ill-typed values are rejected with their field path.

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "au/common.hpp"
#include "au/corpus.hpp"
#include "au/eval.hpp"
#include "au/loop.hpp"
#include "au/model.hpp"
#include "au/pretrain.hpp"

namespace au::manifest {

inline constexpr int kSchemaVersion = 1;

inline std::string_view reg_mode_name(objectives::RegMode m) {
  return m == objectives::RegMode::SampledCE ? "sampled_ce" : "base_kl";
}

inline objectives::RegMode reg_mode_from_name(std::string_view s) {
  if (s == "sampled_ce") return objectives::RegMode::SampledCE;
  if (s == "base_kl") return objectives::RegMode::BaseKL;
  throw ValidationError("unknown reg_mode '" + std::string(s) + "' (expected sampled_ce or base_kl)");
}

struct WorldSection {
  std::uint64_t seed = 1;
  corpus::WorldConfig config;
  long n_utility_docs = 400;
  long n_retain_docs = 500;  // valid-only documents for the PMC retain term
};

struct RunManifest {
  int schema_version = kSchemaVersion;
  std::string output_dir = "au_out";
  WorldSection world;
  model::ModelConfig model;
  pretrain::PretrainSettings pretrain;
  double calibration_low = 15.0;
  double calibration_high = 35.0;
  loop::LoopConfig loop;                           // shared settings
  std::map<loop::Method, ordered_json> methods;    // per-method overrides
  std::optional<std::uint64_t> loop_seed;          // defaults to world.seed
  eval::EvalSettings eval;
  std::optional<std::uint64_t> eval_seed;          // defaults to world.seed

  RunManifest() {
    loop.lr = 2.5e-6;
    methods[loop::Method::Ga] = {{"n_outer", 1}, {"n_inner", 10}};
    methods[loop::Method::Npo] = {{"n_outer", 1}, {"n_inner", 60}};
    methods[loop::Method::Pmc] = {{"n_inner", 10}};
  }
};

// ---------------------------------------------------------------------------
// Strict reader
// ---------------------------------------------------------------------------
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(where() + ": expected an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ValidationError(field(key) + ": expected a string");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ValidationError(field(key) + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) throw ValidationError(field(key) + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>)
        if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0)
          throw ValidationError(field(key) + ": expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ValidationError(field(key) + ": expected a number");
    }
    out = it->template get<T>();
  }

  const json* object(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    if (!it->is_object()) throw ValidationError(field(key) + ": expected an object");
    return &*it;
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const std::string& path() const { return path_; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ValidationError(field(it.key()) + ": unknown key");
  }

 private:
  std::string where() const { return path_.empty() ? "manifest" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_loop(Reader& r, loop::LoopConfig& c, std::optional<std::uint64_t>* seed) {
  r.get("n_outer", c.n_outer);
  r.get("n_inner", c.n_inner);
  r.get("k", c.k);
  r.get("exhaustion_epochs", c.exhaustion_epochs);
  r.get("max_mutations", c.max_mutations);
  r.get("lr", c.lr);
  r.get("batch_size", c.batch_size);
  r.get("lambda_retain", c.weights.lambda_retain);
  r.get("lambda_forget", c.weights.lambda_forget);
  r.get("lambda_reg", c.weights.lambda_reg);
  r.get("beta", c.weights.beta);
  std::string reg = std::string(reg_mode_name(c.reg_mode));
  r.get("reg_mode", reg);
  c.reg_mode = reg_mode_from_name(reg);
  r.get("temperature", c.temperature);
  r.get("max_new_tokens", c.max_new_tokens);
  r.get("clip_norm", c.clip_norm);
  r.get("pmc_weight", c.pmc_weight);
  if (seed) {
    std::uint64_t s = 0;
    r.get("seed", s);
    if (r.has("seed")) *seed = s;
  }
}

inline ordered_json loop_to_json(const loop::LoopConfig& c) {
  return ordered_json{{"n_outer", c.n_outer},
                      {"n_inner", c.n_inner},
                      {"k", c.k},
                      {"exhaustion_epochs", c.exhaustion_epochs},
                      {"max_mutations", c.max_mutations},
                      {"lr", c.lr},
                      {"batch_size", c.batch_size},
                      {"lambda_retain", c.weights.lambda_retain},
                      {"lambda_forget", c.weights.lambda_forget},
                      {"lambda_reg", c.weights.lambda_reg},
                      {"beta", c.weights.beta},
                      {"reg_mode", reg_mode_name(c.reg_mode)},
                      {"temperature", c.temperature},
                      {"max_new_tokens", c.max_new_tokens},
                      {"clip_norm", c.clip_norm},
                      {"pmc_weight", c.pmc_weight}};
}

// Validation errors name the section they came from.
template <class F>
void checked(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ValidationError&) {
    throw;
  } catch (const ConfigError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

// Loop settings for one method: shared section, then the method's overrides.
inline loop::LoopConfig loop_config(const RunManifest& m, loop::Method method) {
  loop::LoopConfig c = m.loop;
  c.method = method;
  c.master_seed = m.loop_seed.value_or(m.world.seed);
  const auto it = m.methods.find(method);
  if (it != m.methods.end()) {
    const json overrides = json::parse(it->second.dump());
    Reader r(overrides, "methods." + std::string(loop::method_name(method)));
    read_loop(r, c, nullptr);
    r.finish();
  }
  checked("methods." + std::string(loop::method_name(method)), [&] { loop::validate(c); });
  return c;
}

inline eval::EvalSettings eval_settings(const RunManifest& m) {
  auto e = m.eval;
  e.seed = m.eval_seed.value_or(m.world.seed);
  return e;
}

inline void validate(const RunManifest& m) {
  if (m.schema_version != kSchemaVersion)
    throw ValidationError("schema_version: unsupported value " + std::to_string(m.schema_version));
  if (m.output_dir.empty()) throw ValidationError("output_dir: must not be empty");
  if (m.world.n_utility_docs < 1) throw ValidationError("world.n_utility_docs: must be >= 1");
  if (m.world.n_retain_docs < 1) throw ValidationError("world.n_retain_docs: must be >= 1");
  if (m.world.config.vocab_size != m.model.vocab_size)
    throw ValidationError("model.vocab_size: must equal world.config.vocab_size");
  if (m.world.config.max_context > m.model.context_length)
    throw ValidationError("world.config.max_context: exceeds model.context_length");
  checked("model", [&] { model::validate(m.model); });
  const auto& p = m.pretrain;
  if (p.n_docs < 1 || p.heldout_docs < 1) throw ValidationError("pretrain: n_docs and heldout_docs must be >= 1");
  if (!(p.p_halluc >= 0 && p.p_halluc <= 1)) throw ValidationError("pretrain.p_halluc: must be in [0, 1]");
  if (!(p.lr > 0)) throw ValidationError("pretrain.lr: must be positive");
  if (!(p.lr_final_frac >= 0 && p.lr_final_frac <= 1)) throw ValidationError("pretrain.lr_final_frac: must be in [0, 1]");
  if (p.batch_size < 1 || p.max_steps < 1 || p.eval_every < 1 || p.patience < 1)
    throw ValidationError("pretrain: batch_size, max_steps, eval_every and patience must be >= 1");
  if (!(m.calibration_low >= 0 && m.calibration_low <= m.calibration_high && m.calibration_high <= 100))
    throw ValidationError("calibration_band: need 0 <= low <= high <= 100");
  if (m.eval.k < 1 || m.eval.kl_m < 1 || m.eval.kl_l < 1) throw ValidationError("eval: k, kl_m and kl_l must be >= 1");
  for (loop::Method method : loop::kAllMethods) loop_config(m, method);
}

inline RunManifest from_json(const json& j) {
  RunManifest m;
  Reader r(j, "");
  r.get("schema_version", m.schema_version);
  r.get("output_dir", m.output_dir);
  if (const json* w = r.object("world")) {
    Reader rw(*w, "world");
    rw.get("seed", m.world.seed);
    rw.get("n_utility_docs", m.world.n_utility_docs);
    rw.get("n_retain_docs", m.world.n_retain_docs);
    if (const json* c = rw.object("config")) {
      Reader rc(*c, "world.config");
      auto& wc = m.world.config;
      rc.get("n_valid", wc.n_valid);
      rc.get("n_fake", wc.n_fake);
      rc.get("n_tasks", wc.n_tasks);
      rc.get("n_prefixes", wc.n_prefixes);
      rc.get("n_suffixes", wc.n_suffixes);
      rc.get("n_fillers", wc.n_fillers);
      rc.get("n_code_tokens", wc.n_code_tokens);
      rc.get("paraphrases", wc.paraphrases);
      rc.get("heldout_paraphrases", wc.heldout_paraphrases);
      rc.get("body_length", wc.body_length);
      rc.get("body_variants", wc.body_variants);
      rc.get("vocab_size", wc.vocab_size);
      rc.get("max_context", wc.max_context);
      rc.get("utility_modulus", wc.utility_modulus);
      rc.finish();
    }
    rw.finish();
  }
  if (const json* mo = r.object("model")) {
    Reader rm(*mo, "model");
    rm.get("n_layers", m.model.n_layers);
    rm.get("n_heads", m.model.n_heads);
    rm.get("width", m.model.width);
    rm.get("context_length", m.model.context_length);
    rm.get("vocab_size", m.model.vocab_size);
    rm.get("mlp_mult", m.model.mlp_mult);
    std::string prec(model::precision_name(m.model.precision));
    rm.get("precision", prec);
    if (prec != "double" && prec != "single")
      throw ValidationError("model.precision: expected double or single, got '" + prec + "'");
    m.model.precision = model::precision_from_name(prec);
    rm.finish();
  }
  if (const json* p = r.object("pretrain")) {
    Reader rp(*p, "pretrain");
    rp.get("n_docs", m.pretrain.n_docs);
    rp.get("heldout_docs", m.pretrain.heldout_docs);
    rp.get("p_halluc", m.pretrain.p_halluc);
    rp.get("lr", m.pretrain.lr);
    rp.get("lr_final_frac", m.pretrain.lr_final_frac);
    rp.get("batch_size", m.pretrain.batch_size);
    rp.get("max_steps", m.pretrain.max_steps);
    rp.get("eval_every", m.pretrain.eval_every);
    rp.get("patience", m.pretrain.patience);
    rp.get("min_delta", m.pretrain.min_delta);
    rp.finish();
  }
  if (const json* cb = r.object("calibration_band")) {
    Reader rb(*cb, "calibration_band");
    rb.get("low", m.calibration_low);
    rb.get("high", m.calibration_high);
    rb.finish();
  }
  if (const json* l = r.object("loop")) {
    Reader rl(*l, "loop");
    read_loop(rl, m.loop, &m.loop_seed);
    rl.finish();
  }
  if (const json* ms = r.object("methods")) {
    for (auto it = ms->begin(); it != ms->end(); ++it) {
      loop::Method method;
      try {
        method = loop::method_from_name(it.key());
      } catch (const ArgumentError&) {
        throw ValidationError("methods." + it.key() + ": unknown method");
      }
      if (!it.value().is_object()) throw ValidationError("methods." + it.key() + ": expected an object");
      // Overrides replace the built-in defaults for that method wholesale.
      m.methods[method] = ordered_json::parse(it.value().dump());
    }
  }
  if (const json* e = r.object("eval")) {
    Reader re(*e, "eval");
    re.get("k", m.eval.k);
    re.get("kl_m", m.eval.kl_m);
    re.get("kl_l", m.eval.kl_l);
    std::uint64_t s = 0;
    re.get("seed", s);
    if (re.has("seed")) m.eval_seed = s;
    re.finish();
  }
  r.finish();
  validate(m);
  return m;
}

// Canonical form: every field, defaults filled in.
inline ordered_json to_json(const RunManifest& m) {
  ordered_json j;
  j["schema_version"] = m.schema_version;
  j["output_dir"] = m.output_dir;
  j["world"] = {{"seed", m.world.seed},
                {"n_utility_docs", m.world.n_utility_docs},
                {"n_retain_docs", m.world.n_retain_docs},
                {"config", corpus::world_config_to_json(m.world.config)}};
  j["model"] = model::to_json(m.model);
  const auto& p = m.pretrain;
  j["pretrain"] = {{"n_docs", p.n_docs},         {"heldout_docs", p.heldout_docs}, {"p_halluc", p.p_halluc},
                   {"lr", p.lr},                 {"lr_final_frac", p.lr_final_frac},
                   {"batch_size", p.batch_size}, {"max_steps", p.max_steps},       {"eval_every", p.eval_every},
                   {"patience", p.patience},     {"min_delta", p.min_delta}};
  j["calibration_band"] = {{"low", m.calibration_low}, {"high", m.calibration_high}};
  auto lj = loop_to_json(m.loop);
  lj["seed"] = m.loop_seed.value_or(m.world.seed);
  j["loop"] = lj;
  ordered_json ms = ordered_json::object();
  // Override keys are sorted so that equal manifests serialize identically.
  for (const auto& [method, o] : m.methods)
    ms[std::string(loop::method_name(method))] = ordered_json::parse(json::parse(o.dump()).dump());
  j["methods"] = ms;
  j["eval"] = {{"k", m.eval.k}, {"kl_m", m.eval.kl_m}, {"kl_l", m.eval.kl_l},
               {"seed", m.eval_seed.value_or(m.world.seed)}};
  return j;
}

inline std::string manifest_hash(const RunManifest& m) { return sha256_hex(to_json(m).dump()); }

inline RunManifest load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read manifest " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("manifest is not valid JSON: " + std::string(e.what()));
  }
  return from_json(j);
}

}  // namespace au::manifest

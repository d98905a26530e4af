#pragma once

// Synthetic token language, package registry oracle, corpora and prompt
// lifecycle for the unlearning testbed.

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "au/common.hpp"

namespace au::corpus {

enum class Marker : int { Task = 0, Code, Import, Req, Helpful, Sep, End, Pad };
inline constexpr std::array<std::string_view, 8> kMarkerNames = {"TASK", "CODE",    "IMPORT", "REQ",
                                                                  "HELPFUL", "SEP", "END",    "PAD"};

enum class TokenKind { Marker, Prefix, Suffix, TaskKey, Filler, Code, Reserved };

enum class Mode { Code = 0, Required = 1, Helpful = 2 };
inline constexpr std::array<Mode, 3> kAllModes = {Mode::Code, Mode::Required, Mode::Helpful};

inline std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::Code: return "code";
    case Mode::Required: return "required";
    case Mode::Helpful: return "helpful";
  }
  return "?";
}

inline Mode mode_from_name(std::string_view s) {
  if (s == "code") return Mode::Code;
  if (s == "required") return Mode::Required;
  if (s == "helpful") return Mode::Helpful;
  throw ArgumentError("unknown mode: " + std::string(s));
}

struct VocabularyLists {
  std::vector<std::string> prefixes;
  std::vector<std::string> suffixes;
  std::vector<std::string> task_keys;
  std::vector<std::string> fillers;
  std::vector<std::string> code;
};

// Token ids are laid out as contiguous blocks: markers, prefixes, suffixes,
// task keys, fillers, code words, then reserved padding up to `size`.
class Vocabulary {
 public:
  Vocabulary() = default;

  Vocabulary(const VocabularyLists& lists, std::size_t size) {
    auto add_block = [&](const std::vector<std::string>& words, TokenKind kind) {
      const TokenId begin = static_cast<TokenId>(tokens_.size());
      for (const auto& w : words) add(w, kind);
      return std::pair<TokenId, TokenId>{begin, static_cast<TokenId>(tokens_.size())};
    };
    for (auto m : kMarkerNames) add(std::string(m), TokenKind::Marker);
    prefix_range_ = add_block(lists.prefixes, TokenKind::Prefix);
    suffix_range_ = add_block(lists.suffixes, TokenKind::Suffix);
    task_range_ = add_block(lists.task_keys, TokenKind::TaskKey);
    filler_range_ = add_block(lists.fillers, TokenKind::Filler);
    code_range_ = add_block(lists.code, TokenKind::Code);
    if (tokens_.size() > size)
      throw CapacityError("vocabulary needs " + std::to_string(tokens_.size()) +
                          " tokens but size is " + std::to_string(size));
    for (std::size_t i = 0; tokens_.size() < size; ++i) add("<r" + std::to_string(i) + ">", TokenKind::Reserved);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  TokenId id(std::string_view tok) const {
    auto it = id_of_.find(std::string(tok));
    if (it == id_of_.end()) throw ArgumentError("unknown token: " + std::string(tok));
    return it->second;
  }
  bool contains(std::string_view tok) const { return id_of_.count(std::string(tok)) != 0; }

  TokenId marker(Marker m) const { return static_cast<TokenId>(m); }
  TokenKind kind(TokenId id) const { return kinds_.at(static_cast<std::size_t>(id)); }
  bool is_prefix(TokenId id) const { return id >= prefix_range_.first && id < prefix_range_.second; }
  bool is_suffix(TokenId id) const { return id >= suffix_range_.first && id < suffix_range_.second; }
  bool is_name_part(TokenId id) const { return is_prefix(id) || is_suffix(id); }
  bool is_marker(TokenId id, Marker m) const { return id == static_cast<TokenId>(m); }

  std::pair<TokenId, TokenId> prefix_range() const { return prefix_range_; }
  std::pair<TokenId, TokenId> suffix_range() const { return suffix_range_; }
  std::pair<TokenId, TokenId> task_range() const { return task_range_; }
  std::pair<TokenId, TokenId> filler_range() const { return filler_range_; }
  std::pair<TokenId, TokenId> code_range() const { return code_range_; }

  std::string render(std::span<const TokenId> seq) const {
    std::string out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out.push_back(' ');
      out += token(seq[i]);
    }
    return out;
  }

  TokenSeq parse(std::string_view line) const {
    TokenSeq out;
    std::istringstream in{std::string(line)};
    std::string tok;
    while (in >> tok) out.push_back(id(tok));
    return out;
  }

 private:
  void add(const std::string& tok, TokenKind kind) {
    if (!id_of_.emplace(tok, static_cast<TokenId>(tokens_.size())).second)
      throw ConfigError("duplicate token string: " + tok);
    tokens_.push_back(tok);
    kinds_.push_back(kind);
  }

  std::vector<std::string> tokens_;
  std::vector<TokenKind> kinds_;
  std::unordered_map<std::string, TokenId> id_of_;
  std::pair<TokenId, TokenId> prefix_range_{0, 0}, suffix_range_{0, 0}, task_range_{0, 0},
      filler_range_{0, 0}, code_range_{0, 0};
};

using NameTokens = std::pair<TokenId, TokenId>;

// The hallucination oracle: a fixed set of resolvable package names.
class RegistrySnapshot {
 public:
  RegistrySnapshot() = default;
  explicit RegistrySnapshot(std::map<std::string, NameTokens> names) : names_(std::move(names)) {}

  bool contains(std::string_view name) const { return names_.count(std::string(name)) != 0; }
  std::size_t size() const { return names_.size(); }
  const std::map<std::string, NameTokens>& names() const { return names_; }
  const NameTokens& tokens_of(const std::string& name) const { return names_.at(name); }

  std::vector<std::string> sorted_names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : names_) out.push_back(n);
    return out;
  }

 private:
  std::map<std::string, NameTokens> names_;
};

struct TaskSpec {
  int task_id = 0;
  TokenSeq task_tokens;                  // canonical surface
  std::vector<std::string> associated_valid;
  std::vector<std::string> associated_fake;
  std::vector<TokenSeq> paraphrases;     // mutation pool; [0] is canonical
  std::vector<TokenSeq> heldout;         // never used for training prompts
  std::vector<TokenSeq> code_bodies;
};

struct WorldConfig {
  int n_valid = 40;
  int n_fake = 40;
  int n_tasks = 20;
  int n_prefixes = 12;
  int n_suffixes = 12;
  int n_fillers = 16;
  int n_code_tokens = 24;
  int paraphrases = 9;
  int heldout_paraphrases = 2;
  int body_length = 12;
  int body_variants = 2;
  int vocab_size = 256;
  int max_context = 128;
  int utility_modulus = 8;  // 1 in N (task, surface, body) combos is reserved for utility
};

struct World {
  std::uint64_t seed = 0;
  WorldConfig config;
  Vocabulary vocab;
  RegistrySnapshot registry;
  std::map<std::string, NameTokens> fake_pool;
  std::vector<TaskSpec> tasks;

  NameTokens name_tokens(const std::string& name) const {
    if (registry.contains(name)) return registry.tokens_of(name);
    return fake_pool.at(name);
  }

  std::vector<std::string> fake_names() const {
    std::vector<std::string> out;
    for (const auto& [n, t] : fake_pool) out.push_back(n);
    return out;
  }
};

inline VocabularyLists default_word_lists(const WorldConfig& cfg) {
  static const std::vector<std::string> prefixes = {
      "fast", "quick", "py", "data", "deep", "auto", "web", "hyper", "open", "micro", "smart", "cloud",
      "easy", "multi", "meta", "net", "tensor", "graph", "async", "core", "flex", "nano", "tiny", "mega",
      "ultra", "super", "pro", "zen", "omni", "poly", "neo", "rapid"};
  static const std::vector<std::string> suffixes = {
      "json", "plot", "http", "learn", "vision", "parse", "config", "crypt", "cache", "db", "log", "test",
      "kit", "flow", "io", "net", "orm", "queue", "shell", "math", "image", "audio", "sql", "yaml",
      "xml", "auth", "mail", "grid", "signal", "stream", "torch", "stats"};
  static const std::vector<std::string> topics = {
      "xformers", "gan_faces", "django_signals", "object_detect", "beta_calib", "llm_compose",
      "syntax_tree", "systemd", "slack_provider", "word_docs", "image_classify", "boto_types",
      "dynamodb", "sysv_ipc", "genomics", "grid_game", "asgi_api", "pyqt_setup", "crf_suite",
      "ml_workflow"};
  static const std::vector<std::string> fillers = {
      "write", "build", "make", "create", "implement", "generate", "simple", "small",
      "robust", "full", "basic", "modern", "clean", "efficient", "reusable", "minimal"};
  static const std::vector<std::string> code = {
      "def", "return", "for", "in", "if", "else", "class", "self", "(", ")", ":", "=",
      "+", "[", "]", "print", "while", "try", "with", "as", "lambda", "yield", "None", "True",
      "False", "except", "pass", "range", "len", "dict", "list", "open"};

  auto take = [](const std::vector<std::string>& base, int n, const std::string& stem) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i)
      out.push_back(i < static_cast<int>(base.size()) ? base[i] : stem + std::to_string(i));
    return out;
  };
  VocabularyLists lists;
  lists.prefixes = take(prefixes, cfg.n_prefixes, "pfx");
  lists.suffixes = take(suffixes, cfg.n_suffixes, "_sfx");
  lists.task_keys = take(topics, cfg.n_tasks, "topic_");
  lists.fillers = take(fillers, cfg.n_fillers, "fill_");
  lists.code = take(code, cfg.n_code_tokens, "code_");
  return lists;
}

inline void validate(const WorldConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("world config: " + msg);
  };
  need(c.n_valid >= 1 && c.n_fake >= 1 && c.n_tasks >= 1, "n_valid, n_fake, n_tasks must be >= 1");
  need(c.n_prefixes >= 1 && c.n_suffixes >= 1, "name pools must be non-empty");
  need(c.n_fillers >= 2, "n_fillers must be >= 2");
  need(c.paraphrases >= 2, "paraphrases must be >= 2");
  need(c.heldout_paraphrases >= 0, "heldout_paraphrases must be >= 0");
  need(c.body_length >= 0 && c.body_variants >= 1, "body settings");
  need(c.n_code_tokens >= 1 || c.body_length == 0, "code tokens needed for bodies");
  need(c.utility_modulus >= 2, "utility_modulus must be >= 2");
  if (static_cast<long>(c.n_valid) + c.n_fake > static_cast<long>(c.n_prefixes) * c.n_suffixes)
    throw CapacityError("requested " + std::to_string(c.n_valid + c.n_fake) + " names but only " +
                        std::to_string(c.n_prefixes * c.n_suffixes) + " prefix x suffix combinations exist");
  if (c.paraphrases + c.heldout_paraphrases > c.n_fillers * c.n_fillers)
    throw CapacityError("not enough filler pairs for the requested paraphrase pool");
}

// Builds the vocabulary, registry, fake-name pool and task specs. A pure
// function of (seed, config).
inline World build_world(std::uint64_t seed, const WorldConfig& cfg = {}) {
  validate(cfg);
  World w;
  w.seed = seed;
  w.config = cfg;
  w.vocab = Vocabulary(default_word_lists(cfg), static_cast<std::size_t>(cfg.vocab_size));

  Rng rng(derive_seed(seed, 0x1));
  std::vector<NameTokens> grid;
  const auto [p0, p1] = w.vocab.prefix_range();
  const auto [s0, s1] = w.vocab.suffix_range();
  for (TokenId p = p0; p < p1; ++p)
    for (TokenId s = s0; s < s1; ++s) grid.emplace_back(p, s);
  rng.shuffle(grid);

  auto name_of = [&](const NameTokens& nt) { return w.vocab.token(nt.first) + w.vocab.token(nt.second); };
  std::map<std::string, NameTokens> valid;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < grid.size() && valid.size() + w.fake_pool.size() <
                                                 static_cast<std::size_t>(cfg.n_valid + cfg.n_fake);
       ++i) {
    const std::string name = name_of(grid[i]);
    if (!seen.insert(name).second) continue;  // spelling collision across different splits
    if (valid.size() < static_cast<std::size_t>(cfg.n_valid))
      valid.emplace(name, grid[i]);
    else
      w.fake_pool.emplace(name, grid[i]);
  }
  if (valid.size() + w.fake_pool.size() < static_cast<std::size_t>(cfg.n_valid + cfg.n_fake))
    throw CapacityError("name spelling collisions exhausted the prefix x suffix grid");
  w.registry = RegistrySnapshot(std::move(valid));

  const auto valid_names = w.registry.sorted_names();
  std::vector<std::string> fake_names;
  for (const auto& [n, _] : w.fake_pool) fake_names.push_back(n);

  auto choose = [&](const std::vector<std::string>& pool, Rng& r) {
    const std::size_t want = std::min<std::size_t>(pool.size(), 2 + r.below(3));
    std::vector<std::string> shuffled = pool;
    r.shuffle(shuffled);
    shuffled.resize(want);
    std::sort(shuffled.begin(), shuffled.end());
    return shuffled;
  };

  const auto [t0, t1] = w.vocab.task_range();
  const auto [f0, f1] = w.vocab.filler_range();
  const auto [c0, c1] = w.vocab.code_range();
  (void)t1;
  for (int t = 0; t < cfg.n_tasks; ++t) {
    Rng tr(derive_seed(seed, 0x2, t));
    TaskSpec spec;
    spec.task_id = t;
    spec.associated_valid = choose(valid_names, tr);
    spec.associated_fake = choose(fake_names, tr);

    std::set<std::pair<TokenId, TokenId>> used;
    const std::size_t n_surfaces = static_cast<std::size_t>(cfg.paraphrases + cfg.heldout_paraphrases);
    std::vector<TokenSeq> surfaces;
    while (surfaces.size() < n_surfaces) {
      const TokenId a = f0 + static_cast<TokenId>(tr.below(static_cast<std::size_t>(f1 - f0)));
      const TokenId b = f0 + static_cast<TokenId>(tr.below(static_cast<std::size_t>(f1 - f0)));
      if (!used.insert({a, b}).second) continue;
      surfaces.push_back({t0 + t, a, b});
    }
    spec.paraphrases.assign(surfaces.begin(), surfaces.begin() + cfg.paraphrases);
    spec.heldout.assign(surfaces.begin() + cfg.paraphrases, surfaces.end());
    spec.task_tokens = spec.paraphrases.front();

    // Bodies follow a per-task successor table over the code tokens; the
    // variants differ only in their first token.
    std::vector<TokenId> succ(static_cast<std::size_t>(c1 - c0));
    std::iota(succ.begin(), succ.end(), c0);
    tr.shuffle(succ);
    for (int v = 0; v < cfg.body_variants; ++v) {
      TokenSeq body;
      TokenId tok = c0 + static_cast<TokenId>(tr.below(static_cast<std::size_t>(c1 - c0)));
      for (int i = 0; i < cfg.body_length; ++i) {
        body.push_back(tok);
        tok = succ[static_cast<std::size_t>(tok - c0)];
      }
      spec.code_bodies.push_back(std::move(body));
    }
    w.tasks.push_back(std::move(spec));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Documents
// ---------------------------------------------------------------------------
struct CorpusDocument {
  TokenSeq tokens;
  bool operator==(const CorpusDocument&) const = default;
};

namespace detail {

struct SlotStats {
  long slots = 0;
  long fake = 0;
};

inline std::vector<std::string> draw_names(const TaskSpec& task, int n_slots, double p_halluc, Rng& rng,
                                           SlotStats* stats) {
  std::vector<std::string> names;
  for (int s = 0; s < n_slots; ++s) {
    const bool fake = rng.bernoulli(p_halluc);
    const auto& pool = fake ? task.associated_fake : task.associated_valid;
    std::vector<std::string> unused;
    for (const auto& n : pool)
      if (std::find(names.begin(), names.end(), n) == names.end()) unused.push_back(n);
    const auto& from = unused.empty() ? pool : unused;
    names.push_back(from[rng.below(from.size())]);
    if (stats) {
      ++stats->slots;
      stats->fake += fake ? 1 : 0;
    }
  }
  return names;
}

// Utility documents own every (task, surface, body) combination whose bucket
// is zero; pretraining code documents never use those combinations.
inline bool utility_bucket(const World& w, int task, std::size_t surface, std::size_t body) {
  return derive_seed(w.seed, 0x55, task, surface, body) % static_cast<std::uint64_t>(w.config.utility_modulus) == 0;
}

inline std::vector<TokenSeq> all_surfaces(const TaskSpec& t) {
  std::vector<TokenSeq> out = t.paraphrases;
  out.insert(out.end(), t.heldout.begin(), t.heldout.end());
  return out;
}

inline CorpusDocument code_doc(const World& w, const TokenSeq& surface, const std::vector<std::string>& names,
                               const TokenSeq& body) {
  const auto& v = w.vocab;
  CorpusDocument d;
  d.tokens.push_back(v.marker(Marker::Task));
  d.tokens.insert(d.tokens.end(), surface.begin(), surface.end());
  d.tokens.push_back(v.marker(Marker::Code));
  for (const auto& n : names) {
    const auto [p, s] = w.name_tokens(n);
    d.tokens.insert(d.tokens.end(), {v.marker(Marker::Import), p, s});
  }
  d.tokens.insert(d.tokens.end(), body.begin(), body.end());
  d.tokens.push_back(v.marker(Marker::End));
  return d;
}

inline CorpusDocument list_doc(const World& w, const TokenSeq& surface, Mode mode,
                               const std::vector<std::string>& names) {
  const auto& v = w.vocab;
  CorpusDocument d;
  d.tokens.push_back(v.marker(Marker::Task));
  d.tokens.insert(d.tokens.end(), surface.begin(), surface.end());
  d.tokens.push_back(v.marker(mode == Mode::Required ? Marker::Req : Marker::Helpful));
  for (const auto& n : names) {
    const auto [p, s] = w.name_tokens(n);
    d.tokens.insert(d.tokens.end(), {p, s, v.marker(Marker::Sep)});
  }
  d.tokens.push_back(v.marker(Marker::End));
  return d;
}

}  // namespace detail

// Slot counts per document kind.
inline constexpr int kCodeSlotsMin = 1, kCodeSlotsMax = 2;
inline constexpr int kRequiredSlotsMin = 1, kRequiredSlotsMax = 3;
inline constexpr int kHelpfulSlotsMin = 2, kHelpfulSlotsMax = 4;

inline std::vector<CorpusDocument> generate_pretraining_corpus(const World& w, long n_docs, double p_halluc,
                                                               std::uint64_t seed,
                                                               detail::SlotStats* stats = nullptr) {
  if (n_docs <= 0) throw ArgumentError("n_docs must be positive");
  if (!(p_halluc >= 0.0 && p_halluc <= 1.0)) throw ArgumentError("p_halluc must lie in [0, 1]");
  Rng rng(derive_seed(seed, 0x10));
  std::vector<CorpusDocument> docs;
  docs.reserve(static_cast<std::size_t>(n_docs));
  for (long i = 0; i < n_docs; ++i) {
    const auto& task = w.tasks[rng.below(w.tasks.size())];
    const auto surfaces = detail::all_surfaces(task);
    const auto kind = static_cast<Mode>(rng.below(3));
    if (kind == Mode::Code) {
      std::size_t si, bi;
      int tries = 0;
      do {
        if (++tries > 10000) throw CapacityError("every code combination of a task is reserved for utility");
        si = rng.below(surfaces.size());
        bi = rng.below(task.code_bodies.size());
      } while (detail::utility_bucket(w, task.task_id, si, bi));
      const int n = kCodeSlotsMin + static_cast<int>(rng.below(kCodeSlotsMax - kCodeSlotsMin + 1));
      const auto names = detail::draw_names(task, n, p_halluc, rng, stats);
      docs.push_back(detail::code_doc(w, surfaces[si], names, task.code_bodies[bi]));
    } else {
      const std::size_t si = rng.below(surfaces.size());
      const int lo = kind == Mode::Required ? kRequiredSlotsMin : kHelpfulSlotsMin;
      const int hi = kind == Mode::Required ? kRequiredSlotsMax : kHelpfulSlotsMax;
      const int n = lo + static_cast<int>(rng.below(static_cast<std::size_t>(hi - lo + 1)));
      const auto names = detail::draw_names(task, n, p_halluc, rng, stats);
      docs.push_back(detail::list_doc(w, surfaces[si], kind, names));
    }
  }
  return docs;
}

// Held-out code documents with registry-valid names only, drawn from the
// (task, surface, body) combinations pretraining never uses.
inline std::vector<CorpusDocument> split_utility_corpus(const World& w, long n_docs, std::uint64_t seed) {
  if (n_docs < 0) throw ArgumentError("n_docs must be non-negative");
  std::vector<std::tuple<int, std::size_t, std::size_t>> combos;
  for (const auto& t : w.tasks) {
    const auto surfaces = detail::all_surfaces(t);
    for (std::size_t s = 0; s < surfaces.size(); ++s)
      for (std::size_t b = 0; b < t.code_bodies.size(); ++b)
        if (detail::utility_bucket(w, t.task_id, s, b)) combos.emplace_back(t.task_id, s, b);
  }
  if (combos.empty() && n_docs > 0) throw CapacityError("world reserves no utility combinations");
  Rng rng(derive_seed(seed, 0x20));
  std::vector<CorpusDocument> docs;
  for (long i = 0; i < n_docs; ++i) {
    const auto [t, s, b] = combos[rng.below(combos.size())];
    const auto& task = w.tasks[static_cast<std::size_t>(t)];
    const int n = kCodeSlotsMin + static_cast<int>(rng.below(kCodeSlotsMax - kCodeSlotsMin + 1));
    const auto names = detail::draw_names(task, n, 0.0, rng, nullptr);
    docs.push_back(detail::code_doc(w, detail::all_surfaces(task)[s], names, task.code_bodies[b]));
  }
  return docs;
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------
enum class PromptStatus { Active, Retired };

struct PromptState {
  int prompt_id = 0;
  int task_id = 0;
  TokenSeq surface;
  int mutation_count = 0;
  int outer_epochs_trained = 0;
  PromptStatus status = PromptStatus::Active;

  bool active() const { return status == PromptStatus::Active; }
  bool operator==(const PromptState&) const = default;
};

// The initial prompt pool: one canonical prompt per task.
inline std::vector<PromptState> initial_prompts(const World& w) {
  std::vector<PromptState> out;
  for (const auto& t : w.tasks) out.push_back({t.task_id, t.task_id, t.task_tokens, 0, 0, PromptStatus::Active});
  return out;
}

// Prompts over the held-out surfaces, used only for evaluation.
inline std::vector<PromptState> heldout_prompts(const World& w) {
  std::vector<PromptState> out;
  int id = 1'000'000;
  for (const auto& t : w.tasks)
    for (const auto& s : t.heldout) out.push_back({id++, t.task_id, s, 0, 0, PromptStatus::Active});
  return out;
}

inline TokenSeq render_prompt(const PromptState& p, Mode mode, const Vocabulary& v) {
  if (!p.active()) throw LifecycleError("prompt " + std::to_string(p.prompt_id) + " is retired");
  TokenSeq out{v.marker(Marker::Task)};
  out.insert(out.end(), p.surface.begin(), p.surface.end());
  switch (mode) {
    case Mode::Code: out.push_back(v.marker(Marker::Code)); break;
    case Mode::Required: out.push_back(v.marker(Marker::Req)); break;
    case Mode::Helpful: out.push_back(v.marker(Marker::Helpful)); break;
  }
  return out;
}

struct MutationResult {
  PromptState retired_parent;
  PromptState child;
};

// Child ids stay unique per line: id = task + n_tasks * generation.
inline MutationResult mutate_prompt(const PromptState& parent, const TaskSpec& task, int n_tasks,
                                    int max_mutations, std::uint64_t seed) {
  if (parent.task_id != task.task_id) throw ArgumentError("mutate_prompt: task mismatch");
  if (parent.mutation_count >= max_mutations)
    throw ExhaustionError("prompt " + std::to_string(parent.prompt_id) + " reached the mutation cap of " +
                          std::to_string(max_mutations));
  std::vector<const TokenSeq*> choices;
  for (const auto& s : task.paraphrases)
    if (s != parent.surface) choices.push_back(&s);
  if (choices.empty()) throw CapacityError("paraphrase pool has no alternative surface");
  Rng rng(derive_seed(seed, 0x30, parent.prompt_id, parent.mutation_count));

  MutationResult r;
  r.retired_parent = parent;
  r.retired_parent.status = PromptStatus::Retired;
  r.child.task_id = parent.task_id;
  r.child.mutation_count = parent.mutation_count + 1;
  r.child.prompt_id = parent.task_id + n_tasks * r.child.mutation_count;
  r.child.surface = *choices[rng.below(choices.size())];
  r.child.outer_epochs_trained = 0;
  r.child.status = PromptStatus::Active;
  return r;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------
inline void write_corpus_file(const std::string& path, const std::vector<CorpusDocument>& docs,
                              const Vocabulary& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& d : docs) out << v.render(d.tokens) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<CorpusDocument> read_corpus_file(const std::string& path, const Vocabulary& v) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::vector<CorpusDocument> docs;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) docs.push_back({v.parse(line)});
  return docs;
}

inline void write_registry_file(const std::string& path, const RegistrySnapshot& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& n : r.sorted_names()) out << n << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<std::string> read_registry_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) names.push_back(line);
  return names;
}

inline ordered_json world_config_to_json(const WorldConfig& c) {
  return ordered_json{{"n_valid", c.n_valid},
                      {"n_fake", c.n_fake},
                      {"n_tasks", c.n_tasks},
                      {"n_prefixes", c.n_prefixes},
                      {"n_suffixes", c.n_suffixes},
                      {"n_fillers", c.n_fillers},
                      {"n_code_tokens", c.n_code_tokens},
                      {"paraphrases", c.paraphrases},
                      {"heldout_paraphrases", c.heldout_paraphrases},
                      {"body_length", c.body_length},
                      {"body_variants", c.body_variants},
                      {"vocab_size", c.vocab_size},
                      {"max_context", c.max_context},
                      {"utility_modulus", c.utility_modulus}};
}

// Manifest of everything that defines the world, plus a hash of that content.
inline ordered_json world_manifest(const World& w) {
  ordered_json j;
  j["seed"] = w.seed;
  j["config"] = world_config_to_json(w.config);
  j["vocabulary"] = w.vocab.tokens();
  j["valid_names"] = w.registry.sorted_names();
  std::vector<std::string> fakes;
  for (const auto& [n, _] : w.fake_pool) fakes.push_back(n);
  j["fake_names"] = fakes;
  ordered_json tasks = ordered_json::array();
  for (const auto& t : w.tasks) {
    auto render_all = [&](const std::vector<TokenSeq>& seqs) {
      std::vector<std::string> out;
      for (const auto& s : seqs) out.push_back(w.vocab.render(s));
      return out;
    };
    tasks.push_back(ordered_json{{"task_id", t.task_id},
                                 {"task_tokens", w.vocab.render(t.task_tokens)},
                                 {"associated_valid", t.associated_valid},
                                 {"associated_fake", t.associated_fake},
                                 {"paraphrases", render_all(t.paraphrases)},
                                 {"heldout", render_all(t.heldout)},
                                 {"code_bodies", render_all(t.code_bodies)}});
  }
  j["tasks"] = tasks;
  j["content_hash"] = sha256_hex(j.dump());
  return j;
}

inline std::string world_hash(const World& w) { return world_manifest(w)["content_hash"].get<std::string>(); }

}  // namespace au::corpus

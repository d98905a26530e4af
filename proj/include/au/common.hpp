#pragma once

#include <openssl/evp.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace au {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;
using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// ---------------------------------------------------------------------------
// Errors. Every failure the library reports derives from au::Error; the
// category drives CLI exit codes.
// ---------------------------------------------------------------------------
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error { using Error::Error; };
class CapacityError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };
class LifecycleError : public Error { using Error::Error; };
class ExhaustionError : public Error { using Error::Error; };
class LengthError : public Error { using Error::Error; };
class CorruptionError : public Error { using Error::Error; };
class BoundsError : public Error { using Error::Error; };
class MaskError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class CalibrationError : public Error { using Error::Error; };

// Carries the optimizer step at which a loss, gradient or parameter went
// non-finite.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

// ---------------------------------------------------------------------------
// Seeding. All randomness flows from splitmix64-derived seeds so that any
// (tag, tag, ...) tuple names a reproducible stream.
// ---------------------------------------------------------------------------
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

template <class... Tags>
constexpr std::uint64_t derive_seed(std::uint64_t base, Tags... tags) noexcept {
  std::uint64_t h = splitmix64(base);
  ((h = splitmix64(h ^ splitmix64(static_cast<std::uint64_t>(tags) + 0x632BE59BD9B4E019ull))), ...);
  return h;
}

// mt19937_64 is fully specified by the standard; the distributions are not,
// so the conversions below are written out to keep streams portable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw ArgumentError("Rng::below: empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return static_cast<std::size_t>(v % bound);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Content hashing (SHA-256, lowercase hex).
// ---------------------------------------------------------------------------
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
      throw Error("sha256: digest init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(const void* data, std::size_t n) {
    EVP_DigestUpdate(ctx_, data, n);
    return *this;
  }
  Sha256& update(std::string_view s) { return update(s.data(), s.size()); }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned i = 0; i < len; ++i) {
      out.push_back(digits[md[i] >> 4]);
      out.push_back(digits[md[i] & 0xF]);
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(std::string_view s) { return Sha256().update(s).hex(); }

template <class T>
bool all_finite(std::span<const T> v) {
  for (const T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace au

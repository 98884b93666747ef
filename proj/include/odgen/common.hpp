#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace odgen {

// ===== error taxonomy ======================================================
//
// Every failure the library raises carries a kind so callers (and the CLI)
// can map it to an exit code without string matching.

enum class ErrorKind {
  Dimension,        // shape / size mismatch between arguments
  Config,           // invalid configuration value
  State,            // operation called in the wrong order (e.g. sample before train)
  Input,            // malformed user data (NaN flows, negative entries, bad CSV)
  Capacity,         // request exceeds a hard model bound (e.g. N > N_max)
  Io,               // filesystem / parse failures
  UndefinedMetric,  // metric has no value for this input (e.g. NRMSE of a constant matrix)
};

class OdError : public std::runtime_error {
 public:
  OdError(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

  static OdError dimension(const std::string& m) { return {ErrorKind::Dimension, m}; }
  static OdError config(const std::string& m) { return {ErrorKind::Config, m}; }
  static OdError state(const std::string& m) { return {ErrorKind::State, m}; }
  static OdError input(const std::string& m) { return {ErrorKind::Input, m}; }
  static OdError capacity(const std::string& m) { return {ErrorKind::Capacity, m}; }
  static OdError io(const std::string& m) { return {ErrorKind::Io, m}; }
  static OdError undefined_metric(const std::string& m) {
    return {ErrorKind::UndefinedMetric, m};
  }

 private:
  ErrorKind kind_;
};

const char* error_kind_name(ErrorKind k);

// ===== hashing =============================================================

// splitmix64 finalizer; used both for stream derivation and content hashing.
uint64_t splitmix64(uint64_t x);

// Order-sensitive combination of words, seeded; stable across platforms.
uint64_t hash_words(uint64_t seed, std::initializer_list<uint64_t> ws);
uint64_t hash_str(uint64_t seed, std::string_view s);

// FNV-1a over bytes, for config fingerprints.
uint64_t fnv1a64(std::string_view bytes);

// ===== deterministic randomness ============================================
//
// All stochastic behaviour in the project flows through RandomStream.  The
// generator is mt19937_64 with hand-written conversions, so a (seed, call
// sequence) pair yields bit-identical values on any conforming platform;
// std::normal_distribution and friends are deliberately avoided because the
// standard does not pin their algorithms.

class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // uniform integer in [lo, hi] inclusive, unbiased (rejection sampling)
  int64_t uniform_int(int64_t lo, int64_t hi);

  // standard normal via Box-Muller (the spare is cached)
  double normal();

  // Fisher-Yates
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // child stream whose seed depends on this stream's seed only through `tag`
  // and `index`, not on how many draws were made (useful for per-epoch and
  // per-sample streams that must survive checkpoint resume)
  static uint64_t derive(uint64_t seed, std::string_view tag, uint64_t index);

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ===== numeric formatting ==================================================

// Shortest round-trip decimal for a double ("%.17g").  Used by every CSV
// writer so that write -> read is exact.
std::string format_double(double v);

}  // namespace odgen

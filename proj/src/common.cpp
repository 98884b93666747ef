#include "odgen/common.hpp"

#include <cmath>
#include <cstdio>

namespace odgen {

const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Config: return "config";
    case ErrorKind::State: return "state";
    case ErrorKind::Input: return "input";
    case ErrorKind::Capacity: return "capacity";
    case ErrorKind::Io: return "io";
    case ErrorKind::UndefinedMetric: return "undefined-metric";
  }
  return "unknown";
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t hash_words(uint64_t seed, std::initializer_list<uint64_t> ws) {
  uint64_t h = splitmix64(seed ^ 0x5bf0'3635'0c1d'2bb1ULL);
  for (uint64_t w : ws) h = splitmix64(h ^ w);
  return h;
}

uint64_t hash_str(uint64_t seed, std::string_view s) {
  uint64_t h = splitmix64(seed ^ 0xa24b'aed4'963e'e407ULL);
  for (unsigned char c : s) h = splitmix64(h ^ c);
  return h;
}

uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

int64_t RandomStream::uniform_int(int64_t lo, int64_t hi) {
  if (hi < lo) throw OdError::config("uniform_int: hi < lo");
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<int64_t>(eng_());  // full 64-bit range
  uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t x;
  do {
    x = eng_();
  } while (x >= limit);
  return lo + static_cast<int64_t>(x % span);
}

double RandomStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // u1 in (0, 1] so the log is finite
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

uint64_t RandomStream::derive(uint64_t seed, std::string_view tag, uint64_t index) {
  return splitmix64(hash_str(seed, tag) ^ splitmix64(index ^ 0x9d8f'7e6c'5b4a'3920ULL));
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace odgen

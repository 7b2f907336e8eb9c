#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ragfire {

enum class ErrorCode {
  OverLength,
  BadLayer,
  Empty,
  TooShort,
  WidthMismatch,
  DuplicateIdWithinBatch,
  EmptyStore,
  ProductionModeRefusal,
  NotEnoughSamples,
  NoAnchors,
  SingleClass,
  LayoutMismatch,
  EmptyBatch,
  DivergedLoss,
  GradCheckFailed,
  SameRole,
  EmptyCounts,
  EmptyList,
  UnknownRole,
  BackendUnavailable,
  MalformedDoc,
  BindFailure,
  ConfigInvalid,
  FingerprintMismatch,
  SpecInvalid,
  MissingProNet,
  IoError,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// SplitMix64. Every seeded procedure in this project draws from this generator
// so that results are bit-identical across platforms (std:: distributions are
// implementation-defined and unusable for that).
//
//   next():        x += 0x9E3779B97F4A7C15
//                  z = x; z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
//                  z ^= z >> 27; z *= 0x94D049BB133111EB
//                  z ^= z >> 31; return z
//   below(n):      high 64 bits of next() * n  (Lemire reduction, no rejection)
//   uniform():     (next() >> 11) * 2^-53, in [0, 1)
//   gaussian():    Box-Muller on two uniform draws, cos branch then sin branch
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 6.283185307179586 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Seeded uniform sample of n distinct indices from [0, population), taken as
// the prefix of a Fisher-Yates pass driven by Rng::below. The exact procedure
// is part of the anchor-file contract: reruns with the same seed must select
// the same indices.
std::vector<size_t> sample_without_replacement(size_t population, size_t n, uint64_t seed);

// FNV-1a, 64-bit.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xCBF29CE484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::string to_hex(uint64_t value);

}  // namespace ragfire

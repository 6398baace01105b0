#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace landiff {

// Scalar type for all model math. Double by default; define LANDIFF_REAL32
// to switch to float (reductions still accumulate in double).
#ifdef LANDIFF_REAL32
using real = float;
#else
using real = double;
#endif

constexpr bool kReal64 = sizeof(real) == 8;

// Additive logit bias for masked-out attention entries. Large enough that
// exp() underflows to exactly zero after max-subtraction.
constexpr real kMaskedLogit = real(-1e9);

struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct dependency_error : std::runtime_error {
  explicit dependency_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a over raw bytes; used for golden hashes and config fingerprints.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace landiff

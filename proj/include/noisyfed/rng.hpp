#pragma once

// Seeded random streams.
//
// Every random decision in a run draws from its own stream, derived from the
// master seed and a (round, client, purpose) counter. Streams never depend on
// the order in which clients are simulated, so sequential and threaded runs
// produce identical bits.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the
// standard. Uniform and Gaussian transforms are written out here because the
// std:: distributions are implementation-defined. Gaussian draws still go
// through libm's log/sqrt/cos, so bit-equality across different libm builds
// is not guaranteed.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>

namespace noisyfed {

enum class StreamPurpose : std::uint64_t {
  batch = 1,
  uplink = 2,
  downlink = 3,
  client_sampling = 4,
  k_star = 5,
  data = 6,
  partition = 7,
  probe = 8,
};

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace detail

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer on [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: empty range");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    cached_ = radius * std::sin(angle);
    has_cached_ = true;
    return radius * std::cos(angle);
  }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

/// Stream for one (round, client, purpose) cell of a run seeded by `master`.
inline RngStream derive_stream(std::uint64_t master, std::uint64_t round, std::uint64_t client,
                               StreamPurpose purpose) {
  std::uint64_t h = detail::splitmix64(master);
  h = detail::splitmix64(h ^ round);
  h = detail::splitmix64(h ^ (client * 0xD6E8FEB86659FD93ULL));
  h = detail::splitmix64(h ^ static_cast<std::uint64_t>(purpose));
  return RngStream(h);
}

}  // namespace noisyfed

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>

namespace ncadiff {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stream tags keep independent consumers of the same master seed apart.
enum class StreamTag : std::uint64_t {
  Fire = 1,
  Noise = 2,
  Timestep = 3,
  Batch = 4,
  Init = 5,
  Synthetic = 6,
  Ancestral = 7,
  Validation = 8,
};

/// Deterministic random stream keyed by (seed, tag, k0, k1, ...).
///
/// Built on std::mt19937_64, whose output sequence is fixed by the standard,
/// with hand-written uniform/normal transforms so that draws replay
/// identically across standard library implementations.
class Stream {
public:
  Stream(std::uint64_t seed, StreamTag tag, std::initializer_list<std::uint64_t> keys = {})
      : engine_(mix(seed, tag, keys)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = span == 0 ? 0 : (~std::uint64_t{0} / span) * span;
    std::uint64_t r = engine_();
    while (limit != 0 && r >= limit)
      r = engine_();
    return lo + static_cast<std::int64_t>(span == 0 ? r : r % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0)
      u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

private:
  static std::uint64_t mix(std::uint64_t seed, StreamTag tag, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = splitmix64(seed ^ 0x6e63616469666631ULL);
    h = splitmix64(h ^ static_cast<std::uint64_t>(tag));
    for (auto k : keys)
      h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
    return h;
  }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

} // namespace ncadiff

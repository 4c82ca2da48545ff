#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace civsf {

inline constexpr std::uint64_t fnv1a64(std::string_view s,
                                       std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Deterministic random stream keyed by (seed, label).
//
// std::mt19937_64 has a standardized output sequence; the distributions in
// <random> do not, so every conversion below is spelled out here to keep
// draws identical across standard libraries.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view label)
      : RngStream(seed, fnv1a64(label), 0) {}

  // Sub-stream whose label extends this one's; independent of how many draws
  // the parent has consumed.
  RngStream sub(std::string_view label) const {
    return RngStream(seed_, fnv1a64(label, key_), 0);
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Uniform integer in [lo, hi].
  long long range(long long lo, long long hi) {
    return lo + static_cast<long long>(
                    below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // Standard normal via Box-Muller (one draw per call, no caching so the
  // sequence is a pure function of call count).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  RngStream(std::uint64_t seed, std::uint64_t key, int)
      : seed_(seed), key_(key), engine_(splitmix64(seed ^ key)) {}

  std::uint64_t seed_;
  std::uint64_t key_;
  std::mt19937_64 engine_;
};

// Seed derived from a base seed and a sequence of integer coordinates, e.g.
// (run seed, phase, epoch, sample).
template <typename... Ints>
std::uint64_t derive_seed(std::uint64_t base, Ints... coords) {
  std::uint64_t h = splitmix64(base);
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(coords))), ...);
  return h;
}

}  // namespace civsf

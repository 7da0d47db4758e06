#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace pace {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Deterministic 64-bit generator (splitmix64). Identical streams on every
/// platform; no dependence on std::random distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() { return detail::splitmix64(state_); }

  /// Uniform in [0, 1): top 53 bits scaled.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller. A fresh pair is drawn each call so the
  /// consumption pattern stays independent of call history.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();  // guard log(0)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t index(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// In-place Fisher-Yates shuffle.
  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

/// Derive an independent named sub-seed from a root seed. Used so each
/// pipeline stage (dataset, model init, batch order, ...) gets its own
/// reproducible stream.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a over the name
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t s = root ^ h;
  (void)detail::splitmix64(s);  // mix once; s now holds advanced state
  std::uint64_t t = s;
  return detail::splitmix64(t);
}

/// Derive a per-item sub-seed (e.g. one per image index).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t item) {
  std::uint64_t s = derive_seed(root, name) ^ (0x9E3779B97F4A7C15ull * (item + 1));
  std::uint64_t t = s;
  return detail::splitmix64(t);
}

}  // namespace pace

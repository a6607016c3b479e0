#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace pvlseg {

// Counter-based generator: draw k of a stream is a pure function of
// (seed, k), so sequences are identical on every platform and a stream can
// be forked without advancing the parent.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "splitmix64-counter";

  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), key_(mix(seed ^ 0x6a09e667f3bcc909ULL)), counter_(counter) {}

  std::string_view algorithm() const { return kAlgorithm; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    return mix(key_ + (counter_++) * 0x9e3779b97f4a7c15ULL);
  }

  // Uniform on the open interval (0, 1); 53 random bits.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~0ULL - (~0ULL % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // Box-Muller pair from two uniforms.
  std::pair<double, double> normal_pair() {
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    return {r * std::cos(a), r * std::sin(a)};
  }

  double normal() { return normal_pair().first; }

  template <class T>
  void fill_normal(std::span<T> out, double mean = 0.0, double stddev = 1.0) {
    std::size_t i = 0;
    for (; i + 1 < out.size(); i += 2) {
      auto [a, b] = normal_pair();
      out[i] = static_cast<T>(mean + stddev * a);
      out[i + 1] = static_cast<T>(mean + stddev * b);
    }
    if (i < out.size()) out[i] = static_cast<T>(mean + stddev * normal());
  }

  // Independent child stream, e.g. one per Monte-Carlo pass or per image.
  Rng derive(std::uint64_t stream) const {
    return Rng(mix(seed_ * 0xbf58476d1ce4e5b9ULL + stream + 0x94d049bb133111ebULL));
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace pvlseg

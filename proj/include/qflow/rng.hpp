#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>

namespace qflow {

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) noexcept {
  std::uint64_t s = mix64(base);
  for (auto t : tags) s = mix64(s ^ mix64(t + 0x632be59bd9b4e019ULL));
  return s;
}

/// 64-bit FNV-1a over raw bytes.
inline std::uint64_t fnv1a(std::span<const char> bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seeded generator with platform-independent uniform and normal draws.
/// std::mt19937_64 output is fully specified by the standard; the standard
/// distributions are not, so they are avoided here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Draws an index from an (unnormalized, non-negative) weight vector.
  template <class Weights>
  std::size_t categorical(const Weights& w) {
    double total = 0.0;
    for (auto v : w) total += v;
    double u = uniform() * total;
    std::size_t last_positive = 0;
    std::size_t i = 0;
    for (auto v : w) {
      if (v > 0.0) {
        last_positive = i;
        if (u < v) return i;
      }
      u -= v;
      ++i;
    }
    return last_positive;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace qflow

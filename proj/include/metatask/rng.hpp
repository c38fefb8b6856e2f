#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "metatask/error.hpp"

namespace metatask {

/// Seeded random source with platform-independent draws.
///
/// Only the raw 64-bit engine output comes from the standard library
/// (std::mt19937_64 is fully specified); every distribution is computed here so
/// that streams are bit-identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Seed for the named sub-stream of a master seed.
  static std::uint64_t derive(std::uint64_t master, std::string_view name) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : name) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return splitmix(master ^ splitmix(h));
  }

  static Rng stream(std::uint64_t master, std::string_view name) { return Rng(derive(master, name)); }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Unbiased (rejection on the low residue).
  std::size_t index(std::size_t n) {
    if (n == 0) throw ArgumentError("Rng::index on empty range");
    const std::uint64_t bound = n;
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      std::uint64_t x = engine_();
      if (x >= threshold) return static_cast<std::size_t>(x % bound);
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (no cached second value, so state stays the engine).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct indices from [0, n), uniformly at random and in random order.
  std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k) {
    if (k > n) throw ExhaustionError("cannot draw " + std::to_string(k) + " of " + std::to_string(n));
    std::vector<std::size_t> out;
    out.reserve(k);
    if (k * 4 < n) {
      while (out.size() < k) {
        std::size_t x = index(n);
        bool seen = false;
        for (std::size_t y : out) seen = seen || y == x;
        if (!seen) out.push_back(x);
      }
      return out;
    }
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + index(n - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

  /// Index drawn with probability proportional to weights (all >= 0, sum > 0).
  std::size_t weighted_index(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw ArgumentError("weighted draw over zero total weight");
    double r = uniform() * total;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      last_positive = i;
      if (r < weights[i]) return i;
      r -= weights[i];
    }
    return last_positive;  // rounding fell off the end
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw FormatError(0, "bad rng state");
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace metatask

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string_view>
#include <vector>

#include "entmask/errors.hpp"

namespace entmask {

// splitmix64 finalizer, used to turn related seeds into unrelated ones.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives the seed of a named substream from a base seed. Every random
// decision in a run (shuffle, dropout, strategy coin, ...) draws from its
// own substream so that adding randomness in one place cannot perturb
// another.
inline uint64_t derive_seed(uint64_t base, std::string_view stream) {
  uint64_t h = 1469598103934665603ULL;  // FNV-1a over the stream name
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return mix_seed(base ^ h);
}

inline uint64_t derive_seed(uint64_t base, std::string_view stream, uint64_t index) {
  return mix_seed(derive_seed(base, stream) ^ mix_seed(index ^ 0x51ed2701a5c3b4d9ULL));
}

inline uint64_t derive_seed(uint64_t base, std::string_view stream, uint64_t i, uint64_t j) {
  return mix_seed(derive_seed(base, stream, i) ^ mix_seed(j ^ 0xc2b2ae3d27d4eb4fULL));
}

// Deterministic RNG handed around explicitly. Distributions are implemented
// by hand so that streams are stable across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, n), rejection-sampled to avoid modulo bias.
  uint64_t uniform_below(uint64_t n) {
    if (n == 0) throw ContractError("Rng::uniform_below: n must be positive");
    const uint64_t limit =
        std::numeric_limits<uint64_t>::max() -
        std::numeric_limits<uint64_t>::max() % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw ContractError("Rng::uniform_int: empty range");
    return lo + static_cast<int>(uniform_below(static_cast<uint64_t>(hi - lo) + 1));
  }

  bool coin() { return (next_u64() & 1ULL) != 0; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double scale = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * scale;
    has_spare_ = true;
    return mean + stddev * u * scale;
  }

  // Normal(0, stddev) resampled until within clip_sigmas standard deviations.
  double truncated_normal(double stddev, double clip_sigmas = 2.0) {
    double x;
    do {
      x = normal(0.0, stddev);
    } while (std::abs(x) > clip_sigmas * stddev);
    return x;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from [0, n), ascending order not guaranteed.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k < 0 || k > n) throw ContractError("Rng::sample_without_replacement: k out of range");
    std::vector<int> pool(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      const int j = i + static_cast<int>(uniform_below(static_cast<uint64_t>(n - i)));
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(k));
    return pool;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace entmask

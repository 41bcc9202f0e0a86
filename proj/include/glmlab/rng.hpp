#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace glmlab {

// Seeded generator with explicit forking so independent pipelines (data
// sampling, dropout, init) draw from decorrelated streams that depend only on
// (seed, tag), never on call interleaving.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : seed_material_(seed), engine_(mix(seed)) {}

  Rng fork(std::uint64_t tag) const {
    return Rng(mix(seed_material_ ^ (0x9e3779b97f4a7c15ull * (tag + 1))));
  }

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

  // Inclusive bounds.
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }

  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  int poisson(double lambda) { return std::poisson_distribution<int>(lambda)(engine_); }

  // Poisson conditioned on >= 1 (zero draws rejected and redrawn).
  int poisson_positive(double lambda) {
    int v = 0;
    do {
      v = poisson(lambda);
    } while (v < 1);
    return v;
  }

  template <typename T>
  void shuffle(std::vector<T>& values) {
    std::shuffle(values.begin(), values.end(), engine_);
  }

  std::mt19937_64& engine() { return engine_; }

private:
  static std::uint64_t mix(std::uint64_t x) {
    // splitmix64 finalizer; spreads small seeds over the full state space.
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_material_;
  std::mt19937_64 engine_;
};

}  // namespace glmlab

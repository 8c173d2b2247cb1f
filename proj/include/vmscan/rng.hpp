#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace vmscan {

/// Deterministic random stream. Transforms are written out by hand so that
/// identical seeds give bitwise-identical draws regardless of the standard
/// library in use.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(splitmix(seed)) {}

  static uint64_t splitmix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  /// Derive an independent stream for (label, salt) work items.
  Rng fork(uint64_t salt) const {
    return Rng(splitmix(state_hash() ^ splitmix(salt)));
  }

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [lo, hi] inclusive.
  long randint(long lo, long hi) {
    return lo + static_cast<long>(uniform() * static_cast<double>(hi - lo + 1));
  }

  /// Box-Muller; one fresh pair of uniforms per draw keeps forks independent.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  uint64_t state_hash() const {
    std::mt19937_64 copy = gen_;
    return copy();
  }

  std::mt19937_64 gen_;
};

/// Stable hash for deriving per-run seeds from (master_seed, label, seed).
inline uint64_t seed_hash(uint64_t master, const std::string& label, uint64_t salt) {
  uint64_t h = 0xcbf29ce484222325ULL ^ Rng::splitmix(master);
  for (char c : label) h = (h ^ static_cast<uint64_t>(static_cast<unsigned char>(c))) * 0x100000001b3ULL;
  return Rng::splitmix(h ^ Rng::splitmix(salt + 0x51ed2701));
}

}  // namespace vmscan

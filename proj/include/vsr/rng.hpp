#pragma once

#include <cstdint>

namespace vsr {

// SplitMix64. Used everywhere randomness is needed so that corpora,
// parameter initialization and fuzz tests are reproducible across
// platforms and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int uniformInt(int lo, int hi) {
    return lo + static_cast<int>(next() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  /// Derive an independent stream (for per-document / per-parameter use).
  Rng fork(std::uint64_t salt) {
    Rng child(state_ ^ (0xa0761d6478bd642fULL * (salt + 1)));
    child.next();
    return child;
  }

 private:
  std::uint64_t state_;
};

}  // namespace vsr

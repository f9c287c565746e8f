#pragma once

#include <cstdint>
#include <random>

namespace beard {

/// Seedable generator with a platform-independent output stream.
///
/// Engine: std::mt19937_64 (its output sequence is fixed by the standard).
/// uniform(): top 53 bits of one engine draw, scaled to [0, 1).
/// normal():  Box-Muller on two uniform() draws u1, u2, returning
///            sqrt(-2 ln(1 - u1)) * cos(2 pi u2); the sine branch is discarded
///            so every normal costs exactly two engine draws.
/// std::normal_distribution is avoided because its algorithm is
/// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform();
  double normal();
  /// Uniform integer in [0, n) by rejection on the raw engine output.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Mixes a base seed with stream indices (splitmix64 finalizer), so per-step
/// and per-utterance seeds are pure functions of their coordinates.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

}  // namespace beard

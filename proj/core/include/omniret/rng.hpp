#pragma once

#include <cstdint>
#include <vector>

namespace omniret {

/// Splitmix64-based generator. Self-contained so that every stream is
/// reproducible bit-for-bit across platforms and mirrorable in the
/// snapshot-oracle scripts; std::<random> distributions are not portable
/// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  /// Uniform in [0, 1).
  double uniform();

  /// Standard normal via Box-Muller (second draw cached).
  double normal();

  /// Uniform integer in [0, n) via rejection sampling.
  std::uint64_t below(std::uint64_t n);

  /// Derived independent stream; deterministic function of (state, tag).
  Rng fork(std::uint64_t tag) const;

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Stateless mix of several words into one seed; used to derive per-step,
/// per-purpose streams so that resuming from a checkpoint replays the exact
/// randomness of an uninterrupted run.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

}  // namespace omniret

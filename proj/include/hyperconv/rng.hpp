#pragma once

#include <cstdint>

namespace hconv {

/// Counter-based generator: the n-th draw of a stream is a pure function of
/// (key, n), so streams can be split by label without sharing state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  /// Independent child stream; deterministic in (this key, label).
  Rng split(std::uint64_t label) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Integer uniform in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace hconv

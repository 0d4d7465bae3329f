#pragma once

#include <cstdint>
#include <bit>
#include <random>
#include <string>
#include <vector>

namespace agcm {

/// Deterministic random source. Wraps mt19937_64 but derives doubles and
/// bounded integers itself so the produced streams are identical across
/// standard library implementations. State round-trips through a portable
/// text form for checkpointing.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();

  /// Uniform double in [0, 1) with 53 bits of precision.
  double uniform();
  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi);
  /// Uniform integer in [lo, hi], inclusive, bias-free.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal deviate (Box-Muller, caches the spare value).
  double normal();

  /// Fisher-Yates shuffle.
  void shuffle(std::vector<std::int64_t>& values);

  std::string serialize() const;
  static Rng deserialize(const std::string& text);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace agcm

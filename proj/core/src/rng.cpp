#include "agcm/rng.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <sstream>

#include "agcm/error.hpp"

namespace agcm {

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
  // Top 53 bits -> [0, 1). Identical on every conforming mt19937_64.
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (lo > hi) throw UsageError("uniform_int: empty range");
  const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
  if (range == 0) return static_cast<std::int64_t>(next_u64());  // full 64-bit span
  const std::uint64_t buckets = std::numeric_limits<std::uint64_t>::max() / range;
  const std::uint64_t limit = buckets * range;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return lo + static_cast<std::int64_t>(x / buckets);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller on explicitly drawn uniforms keeps the stream portable.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

void Rng::shuffle(std::vector<std::int64_t>& values) {
  for (std::size_t i = values.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(values[i - 1], values[j]);
  }
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_ << ' ' << (has_spare_ ? 1 : 0);
  // The cached normal round-trips through its bit pattern; textual float
  // forms are not reliably exact.
  if (has_spare_) os << ' ' << std::bit_cast<std::uint64_t>(spare_);
  return os.str();
}

Rng Rng::deserialize(const std::string& text) {
  Rng rng(0);
  std::istringstream is(text);
  int spare_flag = 0;
  if (!(is >> rng.engine_ >> spare_flag)) {
    throw IoError("rng state: malformed serialized form");
  }
  rng.has_spare_ = spare_flag != 0;
  if (rng.has_spare_) {
    std::uint64_t bits = 0;
    if (!(is >> bits)) throw IoError("rng state: missing cached normal value");
    rng.spare_ = std::bit_cast<double>(bits);
  }
  return rng;
}

}  // namespace agcm

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ctpp/errors.hpp"

namespace ctpp {

namespace detail {
inline uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
}  // namespace detail

// Counter-based SplitMix64 stream. Every draw is a pure hash of an
// incrementing counter, so sequences are identical on every platform and
// independent streams are cheap to derive from (seed, stream id).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(detail::mix64(seed + 0x9E3779B97F4A7C15ULL)) {}

  static Rng stream(uint64_t seed, uint64_t stream_id) {
    Rng r(seed);
    r.state_ ^= detail::mix64(stream_id * 0xD1342543DE82EF95ULL + 0x2545F4914F6CDD1DULL);
    return r;
  }

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return detail::mix64(state_);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform in (0, 1]; safe to pass to log().
  double uniform_pos() { return 1.0 - uniform(); }

  double exponential(double rate) {
    if (!(rate > 0)) throw ArgumentError("exponential: rate must be positive");
    return -std::log(uniform_pos()) / rate;
  }

  // Box-Muller; consumes two uniforms per call.
  double normal() {
    double u1 = uniform_pos();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  int uniform_int(int n) {  // in [0, n)
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
  }

  // Index k with probability probs[k]; probs must be a (near-)simplex.
  int categorical(std::span<const double> probs) {
    double u = uniform();
    double acc = 0.0;
    for (size_t k = 0; k < probs.size(); ++k) {
      acc += probs[k];
      if (u < acc) return static_cast<int>(k);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  // In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& xs) {
    for (size_t i = xs.size(); i > 1; --i) {
      size_t j = next_u64() % i;
      std::swap(xs[i - 1], xs[j]);
    }
  }

 private:
  uint64_t state_;
};

}  // namespace ctpp

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "ctpp/errors.hpp"
#include "ctpp/events.hpp"
#include "ctpp/rng.hpp"

namespace ctpp {

namespace detail {
inline void check_mark_probs(std::span<const double> probs) {
  if (probs.empty()) throw ArgumentError("mark_probs must be non-empty");
  double s = 0.0;
  for (double p : probs) {
    if (p < 0.0) throw ArgumentError("mark_probs must be non-negative");
    s += p;
  }
  if (std::fabs(s - 1.0) > 1e-12) throw ArgumentError("mark_probs must sum to 1");
}
}  // namespace detail

// Homogeneous Poisson process with i.i.d. categorical marks. Exactly one of
// horizon (stop at time T) or count (fixed number of events) must be set.
struct PoissonSpec {
  double rate = 1.0;
  std::vector<double> mark_probs = {1.0};
  double horizon = 0.0;  // > 0 to use
  long count = 0;        // >= 1 to use

  void validate() const {
    if (!(rate > 0.0)) throw ArgumentError("PoissonSpec: rate must be positive");
    detail::check_mark_probs(mark_probs);
    const bool has_T = horizon > 0.0, has_n = count >= 1;
    if (has_T == has_n) throw ArgumentError("PoissonSpec: set exactly one of horizon or count");
  }
};

// Univariate self-exciting Hawkes process with exponential excitation
// alpha * exp(-decay * tau); stationary iff alpha/decay < 1.
struct HawkesSpec {
  double mu = 1.0;
  double alpha = 0.0;
  double decay = 1.0;
  double horizon = 1.0;

  void validate() const {
    if (!(mu > 0.0)) throw ArgumentError("HawkesSpec: mu must be positive");
    if (alpha < 0.0) throw ArgumentError("HawkesSpec: alpha must be non-negative");
    if (!(decay > 0.0)) throw ArgumentError("HawkesSpec: decay must be positive");
    if (!(horizon > 0.0)) throw ArgumentError("HawkesSpec: horizon must be positive");
    if (alpha / decay >= 1.0)
      throw ArgumentError("HawkesSpec: non-stationary (alpha/decay >= 1)");
  }
};

// Renewal process with i.i.d. LogNormal(log_mean, log_std) intervals.
struct RenewalSpec {
  double log_mean = 0.0;
  double log_std = 1.0;
  long count = 1;
  std::vector<double> mark_probs = {1.0};

  void validate() const {
    if (!(log_std > 0.0)) throw ArgumentError("RenewalSpec: log_std must be positive");
    if (count < 1) throw ArgumentError("RenewalSpec: count must be >= 1");
    detail::check_mark_probs(mark_probs);
  }
};

inline EventSequence sample_poisson(const PoissonSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng = Rng::stream(seed, 0x706F6973ULL);
  EventSequence seq;
  double t = 0.0;
  if (spec.count >= 1) {
    seq.events.reserve(spec.count);
    for (long i = 0; i < spec.count; ++i) {
      t += rng.exponential(spec.rate);
      seq.events.push_back({rng.categorical(spec.mark_probs), t});
    }
  } else {
    for (;;) {
      t += rng.exponential(spec.rate);
      if (t > spec.horizon) break;
      seq.events.push_back({rng.categorical(spec.mark_probs), t});
    }
  }
  return seq;
}

// Ogata thinning. Between events the intensity mu + A(t) is non-increasing,
// so the value just after the current point is a valid upper bound.
inline EventSequence sample_hawkes(const HawkesSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng = Rng::stream(seed, 0x6861776BULL);
  EventSequence seq;
  double t = 0.0;
  double excite = 0.0;  // sum of alpha * exp(-decay (t - t_i)) at current t
  for (;;) {
    const double bound = spec.mu + excite;
    const double w = rng.exponential(bound);
    const double cand = t + w;
    if (cand > spec.horizon) break;
    excite *= std::exp(-spec.decay * w);
    t = cand;
    const double intensity = spec.mu + excite;
    if (rng.uniform() * bound <= intensity) {
      seq.events.push_back({0, t});
      excite += spec.alpha;
    }
  }
  return seq;
}

inline EventSequence sample_lognormal_renewal(const RenewalSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng = Rng::stream(seed, 0x72656E77ULL);
  EventSequence seq;
  seq.events.reserve(spec.count);
  double t = 0.0;
  for (long i = 0; i < spec.count; ++i) {
    t += std::exp(rng.normal(spec.log_mean, spec.log_std));
    seq.events.push_back({rng.categorical(spec.mark_probs), t});
  }
  return seq;
}

// Convenience: n independent sequences with per-sequence derived seeds.
template <typename Spec, typename Fn>
inline std::vector<EventSequence> sample_many(const Spec& spec, uint64_t seed, long n, Fn sampler) {
  std::vector<EventSequence> out;
  out.reserve(n);
  for (long i = 0; i < n; ++i) {
    EventSequence s = sampler(spec, seed + 0x9E3779B9ULL * static_cast<uint64_t>(i + 1));
    if (!s.events.empty()) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ctpp

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctpp/graph.hpp"
#include "ctpp/layers.hpp"
#include "ctpp/params.hpp"
#include "ctpp/rng.hpp"

namespace ctpp {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // ln(2*pi)/2

// Distribution decoder Phi: categorical mark head plus the three log-normal
// mixture heads. The raw mark scores are normalized with a softmax; W_pi is
// bias-free unless pi_bias is set.
struct DistDecoder {
  nn::Parameter* Wpi = nullptr;  // d_h x K
  nn::Parameter* bpi = nullptr;  // optional 1 x K
  nn::Parameter *Ww = nullptr, *bw = nullptr;
  nn::Parameter *Ws = nullptr, *bs = nullptr;
  nn::Parameter *Wmu = nullptr, *bmu = nullptr;
  int M = 0;
  double log_sigma_clamp = 10.0;  // keeps exp(log sigma) finite
};

// Prediction decoder Xi: argmax mark scores and an exponential time head.
struct PredDecoder {
  nn::Parameter* Wpi = nullptr;
  nn::Parameter* bpi = nullptr;
  nn::Parameter* Wt = nullptr;  // d_h x 1
  nn::Parameter* bt = nullptr;  // 1 x 1
};

// Per-event mixture over the next inter-event time.
struct MixtureParams {
  std::vector<double> w;      // simplex weights
  std::vector<double> sigma;  // positive scales
  std::vector<double> mu;     // locations in log-space
};

namespace detail {
inline void init_uniform(nn::Parameter& p, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : p.value.v) x = rng.uniform(-bound, bound);
}
}  // namespace detail

inline DistDecoder make_dist_decoder(nn::ParamStore& store, int d_h, int num_marks, int M,
                                     bool pi_bias, Rng& rng) {
  if (M < 1) throw ArgumentError("make_dist_decoder: M must be >= 1");
  DistDecoder dec;
  dec.M = M;
  dec.Wpi = &store.add("dec.wpi", d_h, num_marks);
  detail::init_uniform(*dec.Wpi, d_h, rng);
  if (pi_bias) dec.bpi = &store.add("dec.bpi", 1, num_marks);
  dec.Ww = &store.add("dec.ww", d_h, M);
  detail::init_uniform(*dec.Ww, d_h, rng);
  dec.bw = &store.add("dec.bw", 1, M);
  dec.Ws = &store.add("dec.ws", d_h, M);
  detail::init_uniform(*dec.Ws, d_h, rng);
  dec.bs = &store.add("dec.bs", 1, M);
  dec.Wmu = &store.add("dec.wmu", d_h, M);
  detail::init_uniform(*dec.Wmu, d_h, rng);
  dec.bmu = &store.add("dec.bmu", 1, M);
  return dec;
}

inline PredDecoder make_pred_decoder(nn::ParamStore& store, int d_h, int num_marks, bool pi_bias,
                                     Rng& rng) {
  PredDecoder dec;
  dec.Wpi = &store.add("dec.wpi", d_h, num_marks);
  detail::init_uniform(*dec.Wpi, d_h, rng);
  if (pi_bias) dec.bpi = &store.add("dec.bpi", 1, num_marks);
  dec.Wt = &store.add("dec.wt", d_h, 1);
  detail::init_uniform(*dec.Wt, d_h, rng);
  dec.bt = &store.add("dec.bt", 1, 1);
  return dec;
}

// ---- graph (training) paths; H is T x d_h ----

inline nn::Var mark_logits_g(nn::Graph& g, nn::Var H, nn::Parameter& Wpi,
                             nn::Parameter* bpi) {
  nn::Var logits = g.matmul(H, g.param(Wpi));
  if (bpi) logits = g.add_rowvec(logits, g.param(*bpi));
  return logits;
}

inline nn::Var mark_log_probs_g(nn::Graph& g, nn::Var H, nn::Parameter& Wpi,
                                nn::Parameter* bpi) {
  return g.log_softmax_rows(mark_logits_g(g, H, Wpi, bpi));
}

struct MixtureHeads {
  nn::Var log_w;      // T x M, already log-normalized
  nn::Var log_sigma;  // T x M, clamped
  nn::Var mu;         // T x M
};

inline MixtureHeads mixture_heads_g(nn::Graph& g, nn::Var H, const DistDecoder& dec) {
  MixtureHeads h;
  h.log_w = g.log_softmax_rows(nn::linear(g, H, g.param(*dec.Ww), g.param(*dec.bw)));
  h.log_sigma = g.clamp(nn::linear(g, H, g.param(*dec.Ws), g.param(*dec.bs)),
                        -dec.log_sigma_clamp, dec.log_sigma_clamp);
  h.mu = nn::linear(g, H, g.param(*dec.Wmu), g.param(*dec.bmu));
  return h;
}

// Row r: log sum_k w_k (tau_r sigma_k sqrt(2 pi))^-1 exp(-(ln tau_r - mu_k)^2
// / (2 sigma_k^2)), via log-sum-exp. taus must be positive.
inline nn::Var lognormmix_logpdf_g(nn::Graph& g, const MixtureHeads& heads,
                                   std::span<const double> taus) {
  std::vector<double> logtau(taus.size());
  for (size_t i = 0; i < taus.size(); ++i) {
    if (!(taus[i] > 0.0)) throw DomainError("lognormmix_logpdf: tau must be positive");
    logtau[i] = std::log(taus[i]);
  }
  nn::Var x = g.constant(nn::Array::col_vec(std::move(logtau)));
  nn::Var z = g.sub_colvec(heads.mu, x);  // mu - ln(tau)
  nn::Var quad = g.mul(g.mul(z, z), g.scale(g.exp_op(g.scale(heads.log_sigma, -2.0)), 0.5));
  nn::Var terms = g.add_const(g.sub(g.sub(heads.log_w, heads.log_sigma), quad), -kHalfLog2Pi);
  return g.sub(g.logsumexp_cols(terms), x);
}

// ---- plain evaluation paths ----

inline std::vector<double> log_softmax(std::span<const double> x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  const double lse = m + std::log(s);
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

inline std::vector<double> matvec_t(const nn::Array& W, std::span<const double> h) {
  // h (length rows) times W (rows x cols) -> length cols
  if (static_cast<int>(h.size()) != W.rows)
    throw ShapeError("matvec_t: h size " + std::to_string(h.size()) + " vs " + W.shape_str());
  std::vector<double> out(W.cols, 0.0);
  for (int r = 0; r < W.rows; ++r)
    for (int c = 0; c < W.cols; ++c) out[c] += h[r] * W.at(r, c);
  return out;
}

// log p(m | h) for every mark; exp of the result sums to one.
inline std::vector<double> mark_log_probs(std::span<const double> h, const nn::Array& Wpi,
                                          const nn::Array* bpi = nullptr) {
  std::vector<double> logits = matvec_t(Wpi, h);
  if (bpi)
    for (size_t i = 0; i < logits.size(); ++i) logits[i] += bpi->v[i];
  return log_softmax(logits);
}

inline MixtureParams mixture_params(std::span<const double> h, const DistDecoder& dec) {
  MixtureParams p;
  std::vector<double> ww = matvec_t(dec.Ww->value, h);
  std::vector<double> ss = matvec_t(dec.Ws->value, h);
  std::vector<double> mm = matvec_t(dec.Wmu->value, h);
  for (int k = 0; k < dec.M; ++k) {
    ww[k] += dec.bw->value.v[k];
    ss[k] += dec.bs->value.v[k];
    mm[k] += dec.bmu->value.v[k];
  }
  std::vector<double> logw = log_softmax(ww);
  p.w.resize(dec.M);
  p.sigma.resize(dec.M);
  for (int k = 0; k < dec.M; ++k) {
    p.w[k] = std::exp(logw[k]);
    const double ls = std::clamp(ss[k], -dec.log_sigma_clamp, dec.log_sigma_clamp);
    p.sigma[k] = std::exp(ls);
  }
  p.mu = std::move(mm);
  return p;
}

inline double lognormmix_logpdf(double tau, const MixtureParams& p) {
  if (!(tau > 0.0)) throw DomainError("lognormmix_logpdf: tau must be positive");
  const double x = std::log(tau);
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(p.w.size());
  for (size_t k = 0; k < p.w.size(); ++k) {
    const double z = (x - p.mu[k]) / p.sigma[k];
    terms[k] = std::log(p.w[k]) - std::log(p.sigma[k]) - 0.5 * z * z - kHalfLog2Pi;
    best = std::max(best, terms[k]);
  }
  double s = 0.0;
  for (double t : terms) s += std::exp(t - best);
  return best + std::log(s) - x;
}

// Draws (mark, arrival time): z ~ Cat(w), r ~ N(mu_z, sigma_z),
// t = exp(r) + t_i, mark ~ Cat(softmax(W_pi h)).
inline std::pair<int, double> sample_next(std::span<const double> h, double t_i,
                                          const DistDecoder& dec, uint64_t seed) {
  Rng rng = Rng::stream(seed, 0x73616D70ULL);
  MixtureParams p = mixture_params(h, dec);
  const int z = rng.categorical(p.w);
  const double r = rng.normal(p.mu[z], p.sigma[z]);
  std::vector<double> logp = mark_log_probs(h, dec.Wpi->value,
                                            dec.bpi ? &dec.bpi->value : nullptr);
  std::vector<double> probs(logp.size());
  for (size_t i = 0; i < logp.size(); ++i) probs[i] = std::exp(logp[i]);
  const int mark = rng.categorical(probs);
  return {mark, std::exp(r) + t_i};
}

// Deterministic prediction: argmax mark score and t = exp(W_t h + b_t) + t_i.
inline std::pair<int, double> predict_next(std::span<const double> h, double t_i,
                                           const PredDecoder& dec) {
  std::vector<double> logits = matvec_t(dec.Wpi->value, h);
  if (dec.bpi)
    for (size_t i = 0; i < logits.size(); ++i) logits[i] += dec.bpi->value.v[i];
  const int mark = static_cast<int>(
      std::max_element(logits.begin(), logits.end()) - logits.begin());
  double s = dec.bt->value.v[0];
  for (size_t i = 0; i < h.size(); ++i) s += h[i] * dec.Wt->value.v[i];
  return {mark, std::exp(s) + t_i};
}

}  // namespace ctpp

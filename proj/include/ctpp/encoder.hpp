#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ctpp/events.hpp"
#include "ctpp/graph.hpp"
#include "ctpp/kernel.hpp"
#include "ctpp/layers.hpp"

namespace ctpp {

// Padded time-major batch layout. Flattened row of event i of sequence b is
// i*B + b. Padded positions carry mark 0 and a repeated last time; they are
// never enumerated as convolution pairs or loss targets, so they contribute
// nothing to sums or gradients.
struct SeqBatch {
  int B = 0;
  int Lmax = 0;
  std::vector<int> lens;
  std::vector<int> marks;     // Lmax*B
  std::vector<double> times;  // Lmax*B
  std::vector<double> dts;    // interval preceding each event; dts(0,b) = t_0 - 0

  int rows() const { return Lmax * B; }
  int row(int i, int b) const { return i * B + b; }
};

inline SeqBatch make_batch(std::span<const EventSequence* const> seqs, int pad_to = 0) {
  SeqBatch batch;
  batch.B = static_cast<int>(seqs.size());
  for (const EventSequence* s : seqs)
    batch.Lmax = std::max(batch.Lmax, static_cast<int>(s->size()));
  batch.Lmax = std::max(batch.Lmax, pad_to);
  batch.lens.resize(batch.B);
  batch.marks.assign(batch.rows(), 0);
  batch.times.assign(batch.rows(), 0.0);
  batch.dts.assign(batch.rows(), 0.0);
  for (int b = 0; b < batch.B; ++b) {
    const EventSequence& s = *seqs[b];
    batch.lens[b] = static_cast<int>(s.size());
    double prev = 0.0;
    for (int i = 0; i < batch.Lmax; ++i) {
      const bool valid = i < batch.lens[b];
      const double t = valid ? s.time(i) : prev;
      batch.marks[batch.row(i, b)] = valid ? s.mark(i) : 0;
      batch.times[batch.row(i, b)] = t;
      batch.dts[batch.row(i, b)] = valid ? t - prev : 0.0;
      prev = t;
    }
  }
  return batch;
}

inline SeqBatch make_batch(const EventSequence& seq) {
  const EventSequence* p = &seq;
  return make_batch(std::span<const EventSequence* const>(&p, 1));
}

// One convolution channel: a SIREN kernel with its look-back horizon.
struct LocalChannel {
  SirenKernel kernel;
  double horizon = std::numeric_limits<double>::infinity();
};

struct LocalLayer {
  std::vector<LocalChannel> channels;
  nn::Parameter* Wo = nullptr;       // (C*d) x d aggregation
  nn::Parameter* ln_gain = nullptr;  // 1 x d
  nn::Parameter* ln_bias = nullptr;  // 1 x d
};

struct LocalStack {
  std::vector<LocalLayer> layers;
  int d = 0;
  bool depthwise = false;
  double ln_eps = 1e-5;
};

struct LocalStackSpec {
  int d = 32;
  int layers = 1;
  std::vector<double> horizons = {};  // one per channel, absolute time units
  double omega0 = 1.0;
  int siren_hidden = 3;
  int siren_width = 32;
  bool depthwise = false;
};

inline LocalStack make_local_stack(nn::ParamStore& store, const LocalStackSpec& spec, Rng& rng) {
  if (spec.layers > 0 && spec.horizons.empty())
    throw ArgumentError("make_local_stack: need at least one channel horizon");
  LocalStack stack;
  stack.d = spec.d;
  stack.depthwise = spec.depthwise;
  const int C = static_cast<int>(spec.horizons.size());
  SirenSpec ks;
  ks.hidden_layers = spec.siren_hidden;
  ks.width = spec.siren_width;
  ks.out_dim = spec.depthwise ? spec.d : spec.d * spec.d;
  ks.omega0 = spec.omega0;
  for (int l = 0; l < spec.layers; ++l) {
    LocalLayer layer;
    const std::string lp = "local." + std::to_string(l);
    for (int c = 0; c < C; ++c) {
      LocalChannel ch;
      ch.horizon = spec.horizons[c];
      if (!(ch.horizon > 0.0)) throw ArgumentError("make_local_stack: horizon must be positive");
      ch.kernel = make_siren(store, lp + ".c" + std::to_string(c), ks, rng);
      layer.channels.push_back(std::move(ch));
    }
    layer.Wo = &store.add(lp + ".wo", C * spec.d, spec.d);
    const double bound = 1.0 / std::sqrt(static_cast<double>(C * spec.d));
    for (double& x : layer.Wo->value.v) x = rng.uniform(-bound, bound);
    layer.ln_gain = &store.add(lp + ".ln_gain", 1, spec.d);
    layer.ln_gain->value.fill(1.0);
    layer.ln_bias = &store.add(lp + ".ln_bias", 1, spec.d);
    stack.layers.push_back(std::move(layer));
  }
  return stack;
}

// Embedding lookup, one row per event.
inline nn::Var embed_batch(nn::Graph& g, nn::Parameter& table, const SeqBatch& batch) {
  return g.gather_rows(g.param(table), batch.marks);
}

inline nn::Var embed_sequence(nn::Graph& g, nn::Parameter& table, std::span<const int> marks) {
  return g.gather_rows(g.param(table), std::vector<int>(marks.begin(), marks.end()));
}

// c_i = sum over strictly earlier events j with t_i - t_j <= horizon of
// psi(t_i - t_j) e_j. Row i of the output is the local context of event i.
inline nn::Var conv_channel(nn::Graph& g, nn::Var E, const SeqBatch& batch,
                            const LocalChannel& ch, bool depthwise) {
  std::vector<nn::ConvPair> pairs;
  std::vector<double> taus;
  for (int b = 0; b < batch.B; ++b) {
    for (int i = 1; i < batch.lens[b]; ++i) {
      const double ti = batch.times[batch.row(i, b)];
      for (int j = i - 1; j >= 0; --j) {
        const double tau = ti - batch.times[batch.row(j, b)];
        if (tau > ch.horizon) break;
        pairs.push_back({batch.row(i, b), batch.row(j, b), static_cast<int>(taus.size())});
        taus.push_back(tau);
      }
    }
  }
  if (pairs.empty()) {
    const int d = g.val(E).cols;
    return g.constant(nn::Array(batch.rows(), d));
  }
  nn::Var kout = siren_eval(g, ch.kernel, g.constant(nn::Array::col_vec(std::move(taus))));
  return g.conv_combine(kout, E, std::move(pairs), batch.rows(), depthwise);
}

inline nn::Var conv_channel(nn::Graph& g, nn::Var E, const EventSequence& seq,
                            const LocalChannel& ch, bool depthwise) {
  return conv_channel(g, E, make_batch(seq), ch, depthwise);
}

// Concatenated channel features -> W^O projection -> residual with the
// layer input -> layer normalization.
inline nn::Var local_layer(nn::Graph& g, nn::Var E, const SeqBatch& batch, const LocalLayer& layer,
                           bool depthwise, double ln_eps) {
  std::vector<nn::Var> feats;
  feats.reserve(layer.channels.size());
  for (const LocalChannel& ch : layer.channels)
    feats.push_back(conv_channel(g, E, batch, ch, depthwise));
  nn::Var cat = feats.size() == 1 ? feats[0] : g.concat_cols(feats);
  nn::Var proj = g.matmul(cat, g.param(*layer.Wo));
  nn::Var res = g.add(proj, E);
  return g.layer_norm_rows(res, g.param(*layer.ln_gain), g.param(*layer.ln_bias), ln_eps);
}

// Stacked local encoders; each layer consumes the previous output as its
// embedding input. An empty stack is the "without local encoder" ablation
// and returns E unchanged.
inline nn::Var local_encode(nn::Graph& g, nn::Var E, const SeqBatch& batch,
                            const LocalStack& stack) {
  nn::Var x = E;
  for (const LocalLayer& layer : stack.layers)
    x = local_layer(g, x, batch, layer, stack.depthwise, stack.ln_eps);
  return x;
}

// Recurrent global encoder over local features and raw intervals.
struct GlobalEncoder {
  nn::Parameter *Wz = nullptr, *bz = nullptr;
  nn::Parameter *Wr = nullptr, *br = nullptr;
  nn::Parameter *Wh = nullptr, *bh = nullptr;
  int d_h = 0;
  bool dt_log1p = false;  // feed log1p(dt) instead of raw dt
};

inline GlobalEncoder make_global_encoder(nn::ParamStore& store, int d_in, int d_h, bool dt_log1p,
                                         Rng& rng) {
  GlobalEncoder enc;
  enc.d_h = d_h;
  enc.dt_log1p = dt_log1p;
  const int rows = d_in + 1 + d_h;  // [local feature ; dt ; h_prev]
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  auto init = [&](const char* wn, const char* bn, nn::Parameter*& W, nn::Parameter*& b) {
    W = &store.add(std::string("gru.") + wn, rows, d_h);
    for (double& x : W->value.v) x = rng.uniform(-bound, bound);
    b = &store.add(std::string("gru.") + bn, 1, d_h);
  };
  init("wz", "bz", enc.Wz, enc.bz);
  init("wr", "br", enc.Wr, enc.br);
  init("wh", "bh", enc.Wh, enc.bh);
  return enc;
}

// h_i = GRU(h_{i-1}; c_i; t_i - t_{i-1}) with h_0 = 0 and the first
// interval measured from t = 0. Output row i*B+b is h_{i+1} of sequence b
// (the state after consuming event i).
inline nn::Var global_encode(nn::Graph& g, nn::Var Cfeat, const SeqBatch& batch,
                             const GlobalEncoder& enc) {
  nn::GruWeights w{g.param(*enc.Wz), g.param(*enc.bz), g.param(*enc.Wr),
                   g.param(*enc.br), g.param(*enc.Wh), g.param(*enc.bh)};
  nn::Var h = g.constant(nn::Array(batch.B, enc.d_h));
  std::vector<nn::Var> states;
  states.reserve(batch.Lmax);
  for (int i = 0; i < batch.Lmax; ++i) {
    nn::Var c = g.rows_range(Cfeat, i * batch.B, (i + 1) * batch.B);
    std::vector<double> dt(batch.B);
    for (int b = 0; b < batch.B; ++b) {
      const double raw = batch.dts[batch.row(i, b)];
      dt[b] = enc.dt_log1p ? std::log1p(raw) : raw;
    }
    nn::Var x = g.concat_cols({c, g.constant(nn::Array::col_vec(std::move(dt)))});
    h = nn::gru_step(g, h, x, w);
    states.push_back(h);
  }
  return states.size() == 1 ? states[0] : g.concat_rows(states);
}

}  // namespace ctpp

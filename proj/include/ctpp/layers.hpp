#pragma once

#include "ctpp/graph.hpp"

namespace ctpp::nn {

// y = x W (+ b broadcast over rows).
inline Var linear(Graph& g, Var x, Var W, Var b = {}) {
  Var y = g.matmul(x, W);
  if (b.valid()) y = g.add_rowvec(y, b);
  return y;
}

// Graph-bound GRU gate weights; each W is (d_in + d_h) x d_h, biases 1 x d_h.
struct GruWeights {
  Var Wz, bz, Wr, br, Wh, bh;
};

// z = sigm(W_z [x;h] + b_z), r = sigm(W_r [x;h] + b_r),
// hcand = tanh(W_h [x; r.h] + b_h), h = (1-z).h_prev + z.hcand.
// Batched: h_prev is B x d_h and x is B x d_in.
inline Var gru_step(Graph& g, Var h_prev, Var x, const GruWeights& w) {
  Var cat = g.concat_cols({x, h_prev});
  Var z = g.sigmoid(linear(g, cat, w.Wz, w.bz));
  Var r = g.sigmoid(linear(g, cat, w.Wr, w.br));
  Var cat2 = g.concat_cols({x, g.mul(r, h_prev)});
  Var hcand = g.tanh_op(linear(g, cat2, w.Wh, w.bh));
  Var keep = g.add_const(g.scale(z, -1.0), 1.0);
  return g.add(g.mul(keep, h_prev), g.mul(z, hcand));
}

}  // namespace ctpp::nn

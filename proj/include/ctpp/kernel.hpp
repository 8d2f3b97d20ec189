#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ctpp/graph.hpp"
#include "ctpp/layers.hpp"
#include "ctpp/params.hpp"
#include "ctpp/rng.hpp"

namespace ctpp {

// Continuous convolution kernel psi(tau): a sinusoidal MLP from a scalar
// time offset to out_dim weights (d*d in full mode, d in depthwise mode).
// Hidden layers compute sin(omega0 (W x + b)); the final layer is affine.
struct SirenSpec {
  int hidden_layers = 3;
  int width = 32;
  int out_dim = 1;
  double omega0 = 1.0;

  void validate() const {
    if (hidden_layers < 1) throw ArgumentError("SirenSpec: need at least one hidden layer");
    if (width < 1 || out_dim < 1) throw ArgumentError("SirenSpec: bad width/out_dim");
    if (!(omega0 > 0.0)) throw ArgumentError("SirenSpec: omega0 must be positive");
  }
};

struct SirenKernel {
  SirenSpec spec;
  std::vector<nn::Parameter*> W;  // hidden_layers + 1 linear maps
  std::vector<nn::Parameter*> b;
};

// First layer uniform(-1/fan_in, 1/fan_in); hidden layers
// uniform(-sqrt(6/fan_in)/omega0, ...); final layer uniform scaled by
// 1/fan_in so the kernel starts small. Biases start at zero.
inline SirenKernel make_siren(nn::ParamStore& store, const std::string& prefix,
                              const SirenSpec& spec, Rng& rng) {
  spec.validate();
  SirenKernel k;
  k.spec = spec;
  int fan_in = 1;
  for (int l = 0; l <= spec.hidden_layers; ++l) {
    const bool last = (l == spec.hidden_layers);
    const int fan_out = last ? spec.out_dim : spec.width;
    nn::Parameter& W = store.add(prefix + ".w" + std::to_string(l), fan_in, fan_out);
    nn::Parameter& b = store.add(prefix + ".b" + std::to_string(l), 1, fan_out);
    double bound;
    if (l == 0)
      bound = 1.0 / fan_in;
    else if (!last)
      bound = std::sqrt(6.0 / fan_in) / spec.omega0;
    else
      bound = 1.0 / fan_in;
    for (double& x : W.value.v) x = rng.uniform(-bound, bound);
    k.W.push_back(&W);
    k.b.push_back(&b);
    fan_in = fan_out;
  }
  return k;
}

// Evaluates the kernel on a column of offsets; returns P x out_dim.
inline nn::Var siren_eval(nn::Graph& g, const SirenKernel& k, nn::Var taus) {
  nn::Var x = taus;
  const int n = static_cast<int>(k.W.size());
  for (int l = 0; l < n; ++l) {
    nn::Var pre = nn::linear(g, x, g.param(*k.W[l]), g.param(*k.b[l]));
    x = (l + 1 < n) ? g.sin_op(g.scale(pre, k.spec.omega0)) : pre;
  }
  return x;
}

// Plain evaluation at a single offset; returns the out_dim weights.
inline std::vector<double> kernel_eval(const SirenKernel& k, double tau) {
  if (!std::isfinite(tau)) throw ArgumentError("kernel_eval: non-finite tau");
  nn::Graph g(/*grad_enabled=*/false);
  nn::Var out = siren_eval(g, k, g.constant(nn::Array::scalar(tau)));
  return g.val(out).v;
}

}  // namespace ctpp

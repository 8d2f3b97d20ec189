#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "ctpp/array.hpp"
#include "ctpp/errors.hpp"
#include "ctpp/params.hpp"

namespace ctpp::nn {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// One row of a causal convolution contraction: output row accumulates the
// kernel slice `tau_idx` applied to embedding row `emb_row`.
struct ConvPair {
  int out_row;
  int emb_row;
  int tau_idx;
};

// Define-by-run reverse-mode tape over Array-valued nodes. Build a fresh
// Graph per forward pass; backward() walks the tape once and flushes leaf
// gradients into their bound Parameters.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  const Array& val(Var x) const { return nodes_[x.id].val; }
  double scalar(Var x) const {
    const Array& a = val(x);
    if (a.rows != 1 || a.cols != 1) throw ShapeError("scalar: node is " + a.shape_str());
    return a.v[0];
  }
  const Array& grad(Var x) const { return nodes_[x.id].grad; }
  bool requires_grad(Var x) const { return nodes_[x.id].needs_grad; }
  size_t node_count() const { return nodes_.size(); }

  // ---- leaves ----

  Var constant(Array a) { return push(std::move(a), false, nullptr); }
  Var constant_scalar(double x) { return constant(Array::scalar(x)); }

  Var param(Parameter& p) {
    Var v = push(p.value, grad_enabled_, nullptr);
    if (grad_enabled_) bound_.push_back({v.id, &p});
    return v;
  }

  // ---- elementwise / affine ----

  Var add(Var a, Var b) {
    const Array &A = val(a), &B = val(b);
    if (!A.same_shape(B)) throw ShapeError("add: " + A.shape_str() + " vs " + B.shape_str());
    Array C = A;
    for (size_t i = 0; i < C.v.size(); ++i) C.v[i] += B.v[i];
    return unary_or_binary(std::move(C), a, b, [](Graph& g, int id, int ia, int ib) {
      const Array& dC = g.nodes_[id].grad;
      if (g.nodes_[ia].needs_grad) g.gbuf(ia).add(dC);
      if (g.nodes_[ib].needs_grad) g.gbuf(ib).add(dC);
    });
  }

  Var sub(Var a, Var b) {
    const Array &A = val(a), &B = val(b);
    if (!A.same_shape(B)) throw ShapeError("sub: " + A.shape_str() + " vs " + B.shape_str());
    Array C = A;
    for (size_t i = 0; i < C.v.size(); ++i) C.v[i] -= B.v[i];
    return unary_or_binary(std::move(C), a, b, [](Graph& g, int id, int ia, int ib) {
      const Array& dC = g.nodes_[id].grad;
      if (g.nodes_[ia].needs_grad) g.gbuf(ia).add(dC);
      if (g.nodes_[ib].needs_grad) {
        Array& dB = g.gbuf(ib);
        for (size_t i = 0; i < dB.v.size(); ++i) dB.v[i] -= dC.v[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    const Array &A = val(a), &B = val(b);
    if (!A.same_shape(B)) throw ShapeError("mul: " + A.shape_str() + " vs " + B.shape_str());
    Array C = A;
    for (size_t i = 0; i < C.v.size(); ++i) C.v[i] *= B.v[i];
    return unary_or_binary(std::move(C), a, b, [](Graph& g, int id, int ia, int ib) {
      const Array& dC = g.nodes_[id].grad;
      const Array &A2 = g.nodes_[ia].val, &B2 = g.nodes_[ib].val;
      if (g.nodes_[ia].needs_grad) {
        Array& dA = g.gbuf(ia);
        for (size_t i = 0; i < dA.v.size(); ++i) dA.v[i] += dC.v[i] * B2.v[i];
      }
      if (g.nodes_[ib].needs_grad) {
        Array& dB = g.gbuf(ib);
        for (size_t i = 0; i < dB.v.size(); ++i) dB.v[i] += dC.v[i] * A2.v[i];
      }
    });
  }

  Var scale(Var a, double c) {
    Array C = val(a);
    for (auto& x : C.v) x *= c;
    return unary(std::move(C), a, [c](Graph& g, int id, int ia) {
      const Array& dC = g.nodes_[id].grad;
      Array& dA = g.gbuf(ia);
      for (size_t i = 0; i < dA.v.size(); ++i) dA.v[i] += c * dC.v[i];
    });
  }

  Var add_const(Var a, double c) {
    Array C = val(a);
    for (auto& x : C.v) x += c;
    return unary(std::move(C), a, [](Graph& g, int id, int ia) {
      g.gbuf(ia).add(g.nodes_[id].grad);
    });
  }

  // a[m x n] + b[1 x n], broadcast over rows.
  Var add_rowvec(Var a, Var b) {
    const Array &A = val(a), &B = val(b);
    if (B.rows != 1 || B.cols != A.cols)
      throw ShapeError("add_rowvec: " + A.shape_str() + " vs " + B.shape_str());
    Array C = A;
    for (int r = 0; r < C.rows; ++r)
      for (int c = 0; c < C.cols; ++c) C.at(r, c) += B.at(0, c);
    return unary_or_binary(std::move(C), a, b, [](Graph& g, int id, int ia, int ib) {
      const Array& dC = g.nodes_[id].grad;
      if (g.nodes_[ia].needs_grad) g.gbuf(ia).add(dC);
      if (g.nodes_[ib].needs_grad) {
        Array& dB = g.gbuf(ib);
        for (int r = 0; r < dC.rows; ++r)
          for (int c = 0; c < dC.cols; ++c) dB.at(0, c) += dC.at(r, c);
      }
    });
  }

  // a[m x n] - b[m x 1], broadcast over columns.
  Var sub_colvec(Var a, Var b) {
    const Array &A = val(a), &B = val(b);
    if (B.cols != 1 || B.rows != A.rows)
      throw ShapeError("sub_colvec: " + A.shape_str() + " vs " + B.shape_str());
    Array C = A;
    for (int r = 0; r < C.rows; ++r)
      for (int c = 0; c < C.cols; ++c) C.at(r, c) -= B.at(r, 0);
    return unary_or_binary(std::move(C), a, b, [](Graph& g, int id, int ia, int ib) {
      const Array& dC = g.nodes_[id].grad;
      if (g.nodes_[ia].needs_grad) g.gbuf(ia).add(dC);
      if (g.nodes_[ib].needs_grad) {
        Array& dB = g.gbuf(ib);
        for (int r = 0; r < dC.rows; ++r)
          for (int c = 0; c < dC.cols; ++c) dB.at(r, 0) -= dC.at(r, c);
      }
    });
  }

  // ---- nonlinearities ----

  Var sin_op(Var a) {
    Array C = val(a);
    for (auto& x : C.v) x = std::sin(x);
    return unary(std::move(C), a, [](Graph& g, int id, int ia) {
      const Array& dC = g.nodes_[id].grad;
      const Array& X = g.nodes_[ia].val;
      Array& dA = g.gbuf(ia);
      for (size_t i = 0; i < dA.v.size(); ++i) dA.v[i] += dC.v[i] * std::cos(X.v[i]);
    });
  }

  Var tanh_op(Var a) {
    Array C = val(a);
    for (auto& x : C.v) x = std::tanh(x);
    return unary(std::move(C), a, [](Graph& g, int id, int ia) {
      const Array& dC = g.nodes_[id].grad;
      const Array& Y = g.nodes_[id].val;
      Array& dA = g.gbuf(ia);
      for (size_t i = 0; i < dA.v.size(); ++i) dA.v[i] += dC.v[i] * (1.0 - Y.v[i] * Y.v[i]);
    });
  }

  Var sigmoid(Var a) {
    Array C = val(a);
    for (auto& x : C.v) x = 1.0 / (1.0 + std::exp(-x));
    return unary(std::move(C), a, [](Graph& g, int id, int ia) {
      const Array& dC = g.nodes_[id].grad;
      const Array& Y = g.nodes_[id].val;
      Array& dA = g.gbuf(ia);
      for (size_t i = 0; i < dA.v.size(); ++i) dA.v[i] += dC.v[i] * Y.v[i] * (1.0 - Y.v[i]);
    });
  }

  Var exp_op(Var a) {
    Array C = val(a);
    for (auto& x : C.v) x = std::exp(x);
    return unary(std::move(C), a, [](Graph& g, int id, int ia) {
      const Array& dC = g.nodes_[id].grad;
      const Array& Y = g.nodes_[id].val;
      Array& dA = g.gbuf(ia);
      for (size_t i = 0; i < dA.v.size(); ++i) dA.v[i] += dC.v[i] * Y.v[i];
    });
  }

  Var log_op(Var a) {
    Array C = val(a);
    for (auto& x : C.v) x = std::log(x);
    return unary(std::move(C), a, [](Graph& g, int id, int ia) {
      const Array& dC = g.nodes_[id].grad;
      const Array& X = g.nodes_[ia].val;
      Array& dA = g.gbuf(ia);
      for (size_t i = 0; i < dA.v.size(); ++i) dA.v[i] += dC.v[i] / X.v[i];
    });
  }

  // Subgradient 1 inside (lo, hi), 0 outside.
  Var clamp(Var a, double lo, double hi) {
    Array C = val(a);
    for (auto& x : C.v) x = x < lo ? lo : (x > hi ? hi : x);
    return unary(std::move(C), a, [lo, hi](Graph& g, int id, int ia) {
      const Array& dC = g.nodes_[id].grad;
      const Array& X = g.nodes_[ia].val;
      Array& dA = g.gbuf(ia);
      for (size_t i = 0; i < dA.v.size(); ++i)
        if (X.v[i] > lo && X.v[i] < hi) dA.v[i] += dC.v[i];
    });
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    const Array &A = val(a), &B = val(b);
    if (A.cols != B.rows) throw ShapeError("matmul: " + A.shape_str() + " x " + B.shape_str());
    Array C(A.rows, B.cols);
    for (int i = 0; i < A.rows; ++i)
      for (int k = 0; k < A.cols; ++k) {
        const double aik = A.at(i, k);
        if (aik == 0.0) continue;
        const double* brow = &B.v[static_cast<size_t>(k) * B.cols];
        double* crow = &C.v[static_cast<size_t>(i) * C.cols];
        for (int j = 0; j < B.cols; ++j) crow[j] += aik * brow[j];
      }
    return unary_or_binary(std::move(C), a, b, [](Graph& g, int id, int ia, int ib) {
      const Array& dC = g.nodes_[id].grad;
      const Array &A2 = g.nodes_[ia].val, &B2 = g.nodes_[ib].val;
      if (g.nodes_[ia].needs_grad) {  // dA = dC * B^T
        Array& dA = g.gbuf(ia);
        for (int i = 0; i < A2.rows; ++i)
          for (int k = 0; k < A2.cols; ++k) {
            double s = 0.0;
            const double* dcrow = &dC.v[static_cast<size_t>(i) * dC.cols];
            const double* brow = &B2.v[static_cast<size_t>(k) * B2.cols];
            for (int j = 0; j < B2.cols; ++j) s += dcrow[j] * brow[j];
            dA.at(i, k) += s;
          }
      }
      if (g.nodes_[ib].needs_grad) {  // dB = A^T * dC
        Array& dB = g.gbuf(ib);
        for (int i = 0; i < A2.rows; ++i)
          for (int k = 0; k < A2.cols; ++k) {
            const double aik = A2.at(i, k);
            if (aik == 0.0) continue;
            const double* dcrow = &dC.v[static_cast<size_t>(i) * dC.cols];
            double* dbrow = &dB.v[static_cast<size_t>(k) * dB.cols];
            for (int j = 0; j < dC.cols; ++j) dbrow[j] += aik * dcrow[j];
          }
      }
    });
  }

  // ---- structure ----

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty");
    int rows = val(parts[0]).rows, cols = 0;
    for (Var p : parts) {
      if (val(p).rows != rows) throw ShapeError("concat_cols: row mismatch");
      cols += val(p).cols;
    }
    Array C(rows, cols);
    int off = 0;
    for (Var p : parts) {
      const Array& P = val(p);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < P.cols; ++c) C.at(r, off + c) = P.at(r, c);
      off += P.cols;
    }
    std::vector<int> ids(parts.size());
    bool req = false;
    for (size_t i = 0; i < parts.size(); ++i) {
      ids[i] = parts[i].id;
      req = req || requires_grad(parts[i]);
    }
    return push(std::move(C), req, [ids](Graph& g, int id) {
      const Array& dC = g.nodes_[id].grad;
      int off2 = 0;
      for (int pid : ids) {
        const Array& P = g.nodes_[pid].val;
        if (g.nodes_[pid].needs_grad) {
          Array& dP = g.gbuf(pid);
          for (int r = 0; r < dC.rows; ++r)
            for (int c = 0; c < P.cols; ++c) dP.at(r, c) += dC.at(r, off2 + c);
        }
        off2 += P.cols;
      }
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty");
    int cols = val(parts[0]).cols, rows = 0;
    for (Var p : parts) {
      if (val(p).cols != cols) throw ShapeError("concat_rows: col mismatch");
      rows += val(p).rows;
    }
    Array C(rows, cols);
    int off = 0;
    for (Var p : parts) {
      const Array& P = val(p);
      std::copy(P.v.begin(), P.v.end(), C.v.begin() + static_cast<size_t>(off) * cols);
      off += P.rows;
    }
    std::vector<int> ids(parts.size());
    bool req = false;
    for (size_t i = 0; i < parts.size(); ++i) {
      ids[i] = parts[i].id;
      req = req || requires_grad(parts[i]);
    }
    return push(std::move(C), req, [ids](Graph& g, int id) {
      const Array& dC = g.nodes_[id].grad;
      int off2 = 0;
      for (int pid : ids) {
        const Array& P = g.nodes_[pid].val;
        if (g.nodes_[pid].needs_grad) {
          Array& dP = g.gbuf(pid);
          for (size_t i = 0; i < P.v.size(); ++i)
            dP.v[i] += dC.v[static_cast<size_t>(off2) * dC.cols + i];
        }
        off2 += P.rows;
      }
    });
  }

  // Rows [r0, r1) as a new node.
  Var rows_range(Var a, int r0, int r1) {
    const Array& A = val(a);
    if (r0 < 0 || r1 > A.rows || r0 >= r1) throw ShapeError("rows_range: bad range");
    Array C(r1 - r0, A.cols);
    std::copy(A.v.begin() + static_cast<size_t>(r0) * A.cols,
              A.v.begin() + static_cast<size_t>(r1) * A.cols, C.v.begin());
    return unary(std::move(C), a, [r0](Graph& g, int id, int ia) {
      const Array& dC = g.nodes_[id].grad;
      Array& dA = g.gbuf(ia);
      for (size_t i = 0; i < dC.v.size(); ++i)
        dA.v[static_cast<size_t>(r0) * dA.cols + i] += dC.v[i];
    });
  }

  Var row(Var a, int r) { return rows_range(a, r, r + 1); }

  // out[r] = table[idx[r]]; scatter-add on the way back.
  Var gather_rows(Var table, std::vector<int> idx) {
    const Array& T = val(table);
    for (int i : idx)
      if (i < 0 || i >= T.rows) throw ShapeError("gather_rows: index out of range");
    Array C(static_cast<int>(idx.size()), T.cols);
    for (size_t r = 0; r < idx.size(); ++r)
      std::copy(T.v.begin() + static_cast<size_t>(idx[r]) * T.cols,
                T.v.begin() + static_cast<size_t>(idx[r] + 1) * T.cols,
                C.v.begin() + r * T.cols);
    return unary(std::move(C), table, [idx = std::move(idx)](Graph& g, int id, int ia) {
      const Array& dC = g.nodes_[id].grad;
      Array& dT = g.gbuf(ia);
      for (size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < dC.cols; ++c) dT.at(idx[r], c) += dC.at(static_cast<int>(r), c);
    });
  }

  // ---- reductions ----

  Var sum(Var a) {
    const Array& A = val(a);
    double s = 0.0;
    for (double x : A.v) s += x;
    return unary(Array::scalar(s), a, [](Graph& g, int id, int ia) {
      const double d = g.nodes_[id].grad.v[0];
      Array& dA = g.gbuf(ia);
      for (auto& x : dA.v) x += d;
    });
  }

  // ---- fused numerics ----

  // Row-wise log-softmax with max-shift.
  Var log_softmax_rows(Var a) {
    const Array& A = val(a);
    Array C(A.rows, A.cols);
    for (int r = 0; r < A.rows; ++r) {
      double m = A.at(r, 0);
      for (int c = 1; c < A.cols; ++c) m = std::max(m, A.at(r, c));
      double s = 0.0;
      for (int c = 0; c < A.cols; ++c) s += std::exp(A.at(r, c) - m);
      const double lse = m + std::log(s);
      for (int c = 0; c < A.cols; ++c) C.at(r, c) = A.at(r, c) - lse;
    }
    return unary(std::move(C), a, [](Graph& g, int id, int ia) {
      const Array& dC = g.nodes_[id].grad;
      const Array& Y = g.nodes_[id].val;
      Array& dA = g.gbuf(ia);
      for (int r = 0; r < dC.rows; ++r) {
        double tot = 0.0;
        for (int c = 0; c < dC.cols; ++c) tot += dC.at(r, c);
        for (int c = 0; c < dC.cols; ++c)
          dA.at(r, c) += dC.at(r, c) - std::exp(Y.at(r, c)) * tot;
      }
    });
  }

  // Row-wise logsumexp, m x n -> m x 1.
  Var logsumexp_cols(Var a) {
    const Array& A = val(a);
    Array C(A.rows, 1);
    for (int r = 0; r < A.rows; ++r) {
      double m = A.at(r, 0);
      for (int c = 1; c < A.cols; ++c) m = std::max(m, A.at(r, c));
      double s = 0.0;
      for (int c = 0; c < A.cols; ++c) s += std::exp(A.at(r, c) - m);
      C.at(r, 0) = m + std::log(s);
    }
    return unary(std::move(C), a, [](Graph& g, int id, int ia) {
      const Array& dC = g.nodes_[id].grad;
      const Array& Y = g.nodes_[id].val;
      const Array& X = g.nodes_[ia].val;
      Array& dA = g.gbuf(ia);
      for (int r = 0; r < X.rows; ++r)
        for (int c = 0; c < X.cols; ++c)
          dA.at(r, c) += dC.at(r, 0) * std::exp(X.at(r, c) - Y.at(r, 0));
    });
  }

  // Row-wise layer normalization followed by the affine (gain, bias).
  Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
    const Array& X = val(x);
    const Array &G = val(gain), &B = val(bias);
    if (G.rows != 1 || G.cols != X.cols || B.rows != 1 || B.cols != X.cols)
      throw ShapeError("layer_norm_rows: gain/bias must be 1x" + std::to_string(X.cols));
    const int n = X.cols;
    Array C(X.rows, n);
    for (int r = 0; r < X.rows; ++r) {
      double mu = 0.0;
      for (int c = 0; c < n; ++c) mu += X.at(r, c);
      mu /= n;
      double var = 0.0;
      for (int c = 0; c < n; ++c) {
        const double d = X.at(r, c) - mu;
        var += d * d;
      }
      var /= n;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int c = 0; c < n; ++c)
        C.at(r, c) = (X.at(r, c) - mu) * inv * G.at(0, c) + B.at(0, c);
    }
    std::vector<int> ids = {x.id, gain.id, bias.id};
    bool req = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
    return push(std::move(C), req, [ids, eps](Graph& g, int id) {
      const Array& dC = g.nodes_[id].grad;
      const Array& X2 = g.nodes_[ids[0]].val;
      const Array& G2 = g.nodes_[ids[1]].val;
      const int n2 = X2.cols;
      std::vector<double> xhat(n2), dxh(n2);
      for (int r = 0; r < X2.rows; ++r) {
        double mu = 0.0;
        for (int c = 0; c < n2; ++c) mu += X2.at(r, c);
        mu /= n2;
        double var = 0.0;
        for (int c = 0; c < n2; ++c) {
          const double d = X2.at(r, c) - mu;
          var += d * d;
        }
        var /= n2;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int c = 0; c < n2; ++c) xhat[c] = (X2.at(r, c) - mu) * inv;
        if (g.nodes_[ids[1]].needs_grad) {
          Array& dG = g.gbuf(ids[1]);
          for (int c = 0; c < n2; ++c) dG.at(0, c) += dC.at(r, c) * xhat[c];
        }
        if (g.nodes_[ids[2]].needs_grad) {
          Array& dB = g.gbuf(ids[2]);
          for (int c = 0; c < n2; ++c) dB.at(0, c) += dC.at(r, c);
        }
        if (g.nodes_[ids[0]].needs_grad) {
          double a1 = 0.0, a2 = 0.0;
          for (int c = 0; c < n2; ++c) {
            dxh[c] = dC.at(r, c) * G2.at(0, c);
            a1 += dxh[c];
            a2 += dxh[c] * xhat[c];
          }
          a1 /= n2;
          a2 /= n2;
          Array& dX = g.gbuf(ids[0]);
          for (int c = 0; c < n2; ++c) dX.at(r, c) += (dxh[c] - a1 - xhat[c] * a2) * inv;
        }
      }
    });
  }

  // Negative sum of logp[r, targets[r]].
  Var pick_nll(Var logp, std::vector<int> targets) {
    const Array& L = val(logp);
    if (static_cast<int>(targets.size()) != L.rows) throw ShapeError("pick_nll: target count");
    double s = 0.0;
    for (int r = 0; r < L.rows; ++r) {
      if (targets[r] < 0 || targets[r] >= L.cols) throw ShapeError("pick_nll: target out of range");
      s -= L.at(r, targets[r]);
    }
    return unary(Array::scalar(s), logp, [targets = std::move(targets)](Graph& g, int id, int ia) {
      const double d = g.nodes_[id].grad.v[0];
      Array& dL = g.gbuf(ia);
      for (size_t r = 0; r < targets.size(); ++r) dL.at(static_cast<int>(r), targets[r]) -= d;
    });
  }

  // Causal convolution contraction. kout holds one kernel evaluation per
  // distinct pair (rows: tau index); full mode rows are flattened d x d
  // matrices applied as out[i] += psi * e[j], depthwise rows are length-d
  // vectors applied elementwise.
  Var conv_combine(Var kout, Var emb, std::vector<ConvPair> pairs, int out_rows, bool depthwise) {
    const Array& K = val(kout);
    const Array& E = val(emb);
    const int d = E.cols;
    if (depthwise ? (K.cols != d) : (K.cols != d * d))
      throw ShapeError("conv_combine: kernel width " + std::to_string(K.cols) + " vs d=" +
                       std::to_string(d));
    Array C(out_rows, d);
    for (const ConvPair& p : pairs) {
      const double* e = &E.v[static_cast<size_t>(p.emb_row) * d];
      const double* k = &K.v[static_cast<size_t>(p.tau_idx) * K.cols];
      double* out = &C.v[static_cast<size_t>(p.out_row) * d];
      if (depthwise) {
        for (int c = 0; c < d; ++c) out[c] += k[c] * e[c];
      } else {
        for (int r = 0; r < d; ++r) {
          double s = 0.0;
          for (int c = 0; c < d; ++c) s += k[r * d + c] * e[c];
          out[r] += s;
        }
      }
    }
    std::vector<int> ids = {kout.id, emb.id};
    bool req = requires_grad(kout) || requires_grad(emb);
    return push(std::move(C), req,
                [ids, pairs = std::move(pairs), d, depthwise](Graph& g, int id) {
      const Array& dC = g.nodes_[id].grad;
      const Array& K2 = g.nodes_[ids[0]].val;
      const Array& E2 = g.nodes_[ids[1]].val;
      const bool want_k = g.nodes_[ids[0]].needs_grad;
      const bool want_e = g.nodes_[ids[1]].needs_grad;
      Array* dK = want_k ? &g.gbuf(ids[0]) : nullptr;
      Array* dE = want_e ? &g.gbuf(ids[1]) : nullptr;
      for (const ConvPair& p : pairs) {
        const double* dout = &dC.v[static_cast<size_t>(p.out_row) * d];
        const double* e = &E2.v[static_cast<size_t>(p.emb_row) * d];
        const double* k = &K2.v[static_cast<size_t>(p.tau_idx) * K2.cols];
        if (depthwise) {
          if (want_k) {
            double* dk = &dK->v[static_cast<size_t>(p.tau_idx) * K2.cols];
            for (int c = 0; c < d; ++c) dk[c] += dout[c] * e[c];
          }
          if (want_e) {
            double* de = &dE->v[static_cast<size_t>(p.emb_row) * d];
            for (int c = 0; c < d; ++c) de[c] += k[c] * dout[c];
          }
        } else {
          if (want_k) {
            double* dk = &dK->v[static_cast<size_t>(p.tau_idx) * K2.cols];
            for (int r = 0; r < d; ++r)
              for (int c = 0; c < d; ++c) dk[r * d + c] += dout[r] * e[c];
          }
          if (want_e) {
            double* de = &dE->v[static_cast<size_t>(p.emb_row) * d];
            for (int r = 0; r < d; ++r) {
              const double dr = dout[r];
              if (dr == 0.0) continue;
              for (int c = 0; c < d; ++c) de[c] += k[r * d + c] * dr;
            }
          }
        }
      }
    });
  }

  Var add_n(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("add_n: empty");
    Array C = val(parts[0]);
    for (size_t i = 1; i < parts.size(); ++i) {
      const Array& P = val(parts[i]);
      if (!P.same_shape(C)) throw ShapeError("add_n: shape mismatch");
      C.add(P);
    }
    std::vector<int> ids(parts.size());
    bool req = false;
    for (size_t i = 0; i < parts.size(); ++i) {
      ids[i] = parts[i].id;
      req = req || requires_grad(parts[i]);
    }
    return push(std::move(C), req, [ids](Graph& g, int id) {
      const Array& dC = g.nodes_[id].grad;
      for (int pid : ids)
        if (g.nodes_[pid].needs_grad) g.gbuf(pid).add(dC);
    });
  }

  // ---- backward ----

  // Seeds d(loss)/d(loss) = 1, walks the tape in reverse, then adds every
  // bound leaf gradient into its Parameter.
  void backward(Var loss) {
    if (!grad_enabled_) throw StateError("backward: gradients disabled on this graph");
    const Array& l = val(loss);
    if (l.rows != 1 || l.cols != 1) throw ShapeError("backward: loss must be scalar");
    gbuf(loss.id).v[0] += 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.back && !n.grad.empty()) n.back(*this, id);
    }
    flush_param_grads();
  }

  // Variant used by sharded training: accumulate leaf gradients into an
  // external buffer (indexed by Parameter::index) instead of the store.
  void backward_into(Var loss, std::vector<Array>& grad_buf) {
    const Array& l = val(loss);
    if (l.rows != 1 || l.cols != 1) throw ShapeError("backward: loss must be scalar");
    gbuf(loss.id).v[0] += 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.back && !n.grad.empty()) n.back(*this, id);
    }
    for (auto& [id, p] : bound_) {
      if (nodes_[id].grad.empty()) continue;
      if (grad_buf[p->index].empty()) grad_buf[p->index] = Array(p->value.rows, p->value.cols);
      grad_buf[p->index].add(nodes_[id].grad);
    }
  }

 private:
  struct Node {
    Array val;
    Array grad;
    std::function<void(Graph&, int)> back;
    bool needs_grad = false;
  };

  Var push(Array val, bool req, std::function<void(Graph&, int)> back) {
    Node n;
    n.val = std::move(val);
    n.needs_grad = req && grad_enabled_;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var unary(Array val, Var a, std::function<void(Graph&, int, int)> back) {
    bool req = requires_grad(a);
    int ia = a.id;
    return push(std::move(val), req, [ia, back = std::move(back)](Graph& g, int id) {
      if (g.nodes_[ia].needs_grad) back(g, id, ia);
    });
  }

  Var unary_or_binary(Array val, Var a, Var b, std::function<void(Graph&, int, int, int)> back) {
    bool req = requires_grad(a) || requires_grad(b);
    int ia = a.id, ib = b.id;
    return push(std::move(val), req,
                [ia, ib, back = std::move(back)](Graph& g, int id) { back(g, id, ia, ib); });
  }

  Array& gbuf(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Array(n.val.rows, n.val.cols);
    return n.grad;
  }

  void flush_param_grads() {
    for (auto& [id, p] : bound_) {
      if (nodes_[id].grad.empty()) continue;
      p->grad.add(nodes_[id].grad);
      p->owner->mark_grads_live();
    }
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<std::pair<int, Parameter*>> bound_;
};

}  // namespace ctpp::nn

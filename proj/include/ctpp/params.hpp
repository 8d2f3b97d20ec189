#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ctpp/array.hpp"
#include "ctpp/errors.hpp"

namespace ctpp::nn {

class ParamStore;

// A named trainable array with its gradient accumulator.
struct Parameter {
  std::string name;
  Array value;
  Array grad;
  ParamStore* owner = nullptr;
  int index = -1;  // registration order within the owner
};

// Registry of all trainable parameters of one model, in registration order.
// Order is load-bearing: initialization draws and optimizer traversal follow
// it, which keeps runs reproducible.
class ParamStore {
 public:
  Parameter& add(const std::string& name, int rows, int cols) {
    if (index_.count(name)) throw StateError("ParamStore: duplicate parameter '" + name + "'");
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->value = Array(rows, cols);
    p->grad = Array(rows, cols);
    p->owner = this;
    p->index = static_cast<int>(items_.size());
    index_[name] = p->index;
    items_.push_back(std::move(p));
    return *items_.back();
  }

  Parameter* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }
  const Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }
  Parameter& at(const std::string& name) {
    Parameter* p = find(name);
    if (!p) throw StateError("ParamStore: unknown parameter '" + name + "'");
    return *p;
  }

  size_t count() const { return items_.size(); }
  Parameter& item(size_t i) { return *items_[i]; }
  const Parameter& item(size_t i) const { return *items_[i]; }

  size_t num_scalars() const {
    size_t n = 0;
    for (const auto& p : items_) n += p->value.size();
    return n;
  }

  void zero_grads() {
    for (auto& p : items_) p->grad.fill(0.0);
    grads_live_ = false;
  }

  void mark_grads_live() { grads_live_ = true; }
  bool grads_live() const { return grads_live_; }

  std::vector<Array> snapshot_values() const {
    std::vector<Array> out;
    out.reserve(items_.size());
    for (const auto& p : items_) out.push_back(p->value);
    return out;
  }
  void restore_values(const std::vector<Array>& vals) {
    if (vals.size() != items_.size()) throw StateError("ParamStore: snapshot size mismatch");
    for (size_t i = 0; i < vals.size(); ++i) {
      if (!vals[i].same_shape(items_[i]->value))
        throw ShapeError("ParamStore: snapshot shape mismatch for " + items_[i]->name);
      items_[i]->value = vals[i];
    }
  }

  double grad_global_norm() const {
    double s = 0.0;
    for (const auto& p : items_)
      for (double g : p->grad.v) s += g * g;
    return std::sqrt(s);
  }

  // Rescales all gradients so their global L2 norm is at most max_norm.
  void clip_grad_norm(double max_norm) {
    double n = grad_global_norm();
    if (n > max_norm && n > 0.0) {
      double f = max_norm / n;
      for (auto& p : items_)
        for (double& g : p->grad.v) g *= f;
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter>> items_;
  std::map<std::string, int> index_;
  bool grads_live_ = false;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a ParamStore. Clears gradients after each step.
class Adam {
 public:
  explicit Adam(const ParamStore& store, AdamConfig cfg = {}) : cfg_(cfg) {
    m_.reserve(store.count());
    v_.reserve(store.count());
    for (size_t i = 0; i < store.count(); ++i) {
      const Array& val = store.item(i).value;
      m_.emplace_back(val.rows, val.cols);
      v_.emplace_back(val.rows, val.cols);
    }
  }

  void step(ParamStore& store, double lr) {
    if (store.count() != m_.size()) throw StateError("Adam: store/state size mismatch");
    if (!store.grads_live()) throw StateError("Adam: gradients not populated");
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < store.count(); ++i) {
      Parameter& p = store.item(i);
      Array& m = m_[i];
      Array& v = v_[i];
      for (size_t k = 0; k < p.value.size(); ++k) {
        const double g = p.grad.v[k];
        m.v[k] = cfg_.beta1 * m.v[k] + (1.0 - cfg_.beta1) * g;
        v.v[k] = cfg_.beta2 * v.v[k] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m.v[k] / c1;
        const double vhat = v.v[k] / c2;
        p.value.v[k] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
    store.zero_grads();
  }

  long step_count() const { return step_; }

 private:
  AdamConfig cfg_;
  std::vector<Array> m_, v_;
  long step_ = 0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_elem = -1;
  std::map<std::string, double> group_max;  // name prefix up to first '.'
};

// Compares the reverse-mode gradient against central finite differences for
// every scalar in the store. `loss(true)` must run forward+backward and
// accumulate gradients; `loss(false)` must evaluate forward only.
// Differences below abs_resolution are counted as exact: central
// differences of an O(1) loss at h=1e-5 carry ~5e-11 of rounding noise, so
// smaller discrepancies are unmeasurable rather than wrong.
inline GradCheckReport grad_check(const std::function<double(bool)>& loss, ParamStore& store,
                                  double h = 1e-5, double abs_resolution = 1e-10) {
  store.zero_grads();
  double base = loss(true);
  if (!std::isfinite(base)) throw EvalError("grad_check: non-finite loss");

  std::vector<Array> analytic;
  analytic.reserve(store.count());
  for (size_t i = 0; i < store.count(); ++i) analytic.push_back(store.item(i).grad);

  GradCheckReport rep;
  for (size_t i = 0; i < store.count(); ++i) {
    Parameter& p = store.item(i);
    std::string group = p.name.substr(0, p.name.find('.'));
    double& gmax = rep.group_max[group];
    for (size_t k = 0; k < p.value.size(); ++k) {
      const double orig = p.value.v[k];
      p.value.v[k] = orig + h;
      double f1 = loss(false);
      p.value.v[k] = orig - h;
      double f2 = loss(false);
      p.value.v[k] = orig;
      if (!std::isfinite(f1) || !std::isfinite(f2))
        throw EvalError("grad_check: non-finite loss during finite differences");
      const double fd = (f1 - f2) / (2.0 * h);
      const double an = analytic[i].v[k];
      const double diff = std::fabs(fd - an);
      if (diff <= abs_resolution) continue;
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
      const double rel = diff / denom;
      if (rel > gmax) gmax = rel;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = p.name;
        rep.worst_elem = static_cast<int>(k);
      }
    }
  }
  store.zero_grads();
  return rep;
}

}  // namespace ctpp::nn

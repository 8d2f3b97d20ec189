#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ctpp/errors.hpp"

namespace ctpp::nn {

// Dense row-major matrix of doubles. Row vectors are 1 x n, column vectors
// n x 1, scalars 1 x 1.
struct Array {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Array() = default;
  Array(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {
    if (r < 0 || c < 0) throw ShapeError("Array: negative dimension");
  }
  Array(int r, int c, std::vector<double> data) : rows(r), cols(c), v(std::move(data)) {
    if (v.size() != static_cast<size_t>(r) * static_cast<size_t>(c))
      throw ShapeError("Array: data size does not match shape");
  }

  static Array row_vec(std::vector<double> data) {
    int n = static_cast<int>(data.size());
    return Array(1, n, std::move(data));
  }
  static Array col_vec(std::vector<double> data) {
    int n = static_cast<int>(data.size());
    return Array(n, 1, std::move(data));
  }
  static Array scalar(double x) { return Array(1, 1, {x}); }
  static Array full(int r, int c, double x) {
    Array a(r, c);
    for (auto& e : a.v) e = x;
    return a;
  }

  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

  size_t size() const { return v.size(); }
  bool empty() const { return v.empty(); }
  bool same_shape(const Array& o) const { return rows == o.rows && cols == o.cols; }

  void fill(double x) {
    for (auto& e : v) e = x;
  }
  void add(const Array& o) {
    for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
  }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }
};

inline bool bitwise_equal(const Array& a, const Array& b) {
  if (!a.same_shape(b)) return false;
  for (size_t i = 0; i < a.v.size(); ++i)
    if (a.v[i] != b.v[i]) return false;
  return true;
}

}  // namespace ctpp::nn

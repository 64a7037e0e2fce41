#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "vlpseg/errors.hpp"

namespace vlpseg {

// Dense row-major tensor of doubles. Most of the math in this project runs on
// rank-2 tensors (token matrices), so the 2-D accessors are the workhorses.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::initializer_list<int> s, std::vector<double> d)
      : shape(s), data(std::move(d)) {
    if (numel_of(shape) != data.size()) throw ShapeError("Tensor: data size does not match shape");
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw ShapeError("Tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(numel_of(t.shape), 0.0);
    return t;
  }

  static Tensor full(std::vector<int> s, double v) {
    Tensor t = zeros(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }

  static Tensor identity(int n) {
    Tensor t = zeros({n, n});
    for (int i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i) * n + i] = 1.0;
    return t;
  }

  static Tensor row(std::vector<double> d) {
    Tensor t;
    t.shape = {1, static_cast<int>(d.size())};
    t.data = std::move(d);
    return t;
  }

  std::size_t numel() const { return data.size(); }
  bool empty() const { return data.empty(); }

  int rows() const {
    if (shape.size() != 2) throw ShapeError("Tensor::rows: not rank-2");
    return shape[0];
  }
  int cols() const {
    if (shape.size() != 2) throw ShapeError("Tensor::cols: not rank-2");
    return shape[1];
  }

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::fabs(v));
    return m;
  }

  Tensor& operator+=(const Tensor& o) {
    if (!same_shape(o)) throw ShapeError("Tensor += shape mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

}  // namespace vlpseg

#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pace/errors.hpp"

namespace pace {

/// Dense row-major tensor of doubles. Rank 1..4 in practice; the last axis
/// varies fastest. Images and feature maps use (H, W, C) order so per-pixel
/// channel vectors are contiguous.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}

  Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape)) throw ShapeError("tensor: data size does not match shape");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return s.empty() ? 0 : n;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // Checked rank-specific accessors (cold paths and tests; hot loops index
  // data directly with precomputed strides).
  double& at(std::size_t i) { return data.at(off1(i)); }
  double at(std::size_t i) const { return data.at(off1(i)); }
  double& at(std::size_t i, std::size_t j) { return data.at(off2(i, j)); }
  double at(std::size_t i, std::size_t j) const { return data.at(off2(i, j)); }
  double& at(std::size_t i, std::size_t j, std::size_t k) { return data.at(off3(i, j, k)); }
  double at(std::size_t i, std::size_t j, std::size_t k) const { return data.at(off3(i, j, k)); }

  void fill(double v) {
    for (double& x : data) x = v;
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
  }

 private:
  void bound(std::size_t i, std::size_t axis) const {
    if (i >= shape[axis])
      throw ShapeError("tensor: index " + std::to_string(i) + " out of range on axis " + std::to_string(axis) +
                       " of " + shape_str());
  }
  std::size_t off1(std::size_t i) const {
    if (rank() != 1) throw ShapeError("tensor: rank-1 access on " + shape_str());
    bound(i, 0);
    return i;
  }
  std::size_t off2(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw ShapeError("tensor: rank-2 access on " + shape_str());
    bound(i, 0);
    bound(j, 1);
    return i * shape[1] + j;
  }
  std::size_t off3(std::size_t i, std::size_t j, std::size_t k) const {
    if (rank() != 3) throw ShapeError("tensor: rank-3 access on " + shape_str());
    bound(i, 0);
    bound(j, 1);
    bound(k, 2);
    return (i * shape[1] + j) * shape[2] + k;
  }
};

inline bool all_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

/// Throw NumericError naming `where` if the tensor holds NaN/Inf.
inline void ensure_finite(const Tensor& t, const char* where) {
  if (!all_finite(t)) throw NumericError(std::string("non-finite values in ") + where);
}

inline void ensure_finite(double v, const char* where) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + where);
}

/// y += a * x (shapes must match).
inline void axpy(double a, const Tensor& x, Tensor& y) {
  if (!x.same_shape(y)) throw ShapeError("axpy: shape mismatch " + x.shape_str() + " vs " + y.shape_str());
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += a * x.data[i];
}

inline void scale(Tensor& t, double a) {
  for (double& v : t.data) v *= a;
}

inline double dot(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("dot: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

/// Index of the largest element; ties resolve to the lowest index.
inline std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::size_t argmax(const Tensor& t) { return argmax(t.data); }

}  // namespace pace

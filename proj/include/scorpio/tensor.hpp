#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace scorpio {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a forward value or gradient stops being finite. Non-finite
/// values are treated as an error state, never propagated silently.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense n-dimensional value array with an optional gradient slot.
template <typename Real>
struct Tensor {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until backward fills it
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    const std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<Real>(n, Real(0)));
  }

  static Tensor full(Shape s, Real v) {
    const std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<Real>(n, v));
  }

  static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }

  std::size_t size() const { return data.size(); }
  Real& operator[](std::size_t i) { return data[i]; }
  const Real& operator[](std::size_t i) const { return data[i]; }

  Real item() const {
    if (data.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape));
    return data[0];
  }

  void zero_grad() { grad.assign(data.size(), Real(0)); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<Other>(data[i]);
    out.requires_grad = requires_grad;
    return out;
  }
};

template <typename Real>
void ensure_finite(std::span<const Real> v, const char* what) {
  for (const Real x : v) {
    if (!std::isfinite(static_cast<double>(x)))
      throw NumericError(std::string("non-finite value in ") + what);
  }
}

template <typename Real>
void ensure_finite(const Tensor<Real>& t, const char* what) {
  ensure_finite(std::span<const Real>(t.data), what);
}

// Small elementwise helpers shared by attacks and training.

template <typename Real>
void axpy(Real a, const Tensor<Real>& x, Tensor<Real>& y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

template <typename Real>
double dot(std::span<const Real> a, std::span<const Real> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <typename Real>
void clamp01_inplace(Tensor<Real>& t) {
  for (Real& x : t.data) x = std::min(Real(1), std::max(Real(0), x));
}

/// Flat row view of example i of a [batch, d...] tensor.
template <typename Real>
std::span<Real> example_span(Tensor<Real>& t, std::size_t i) {
  const std::size_t row = t.size() / t.shape.at(0);
  return std::span<Real>(t.data.data() + i * row, row);
}

template <typename Real>
std::span<const Real> example_span(const Tensor<Real>& t, std::size_t i) {
  const std::size_t row = t.size() / t.shape.at(0);
  return std::span<const Real>(t.data.data() + i * row, row);
}

}  // namespace scorpio

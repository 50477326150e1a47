#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace aphq {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Dense row-major n-dimensional array. Immutable by convention once handed
/// to a Tape; the free functions below never mutate their arguments.
template <typename T>
struct TensorT {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;

  TensorT() = default;
  TensorT(Shape s, std::vector<T> d, bool rg = false)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    check(shape_numel(shape) == static_cast<int64_t>(data.size()),
          "tensor: shape " + shape_str(shape) + " does not match data size " +
              std::to_string(data.size()));
    for (int64_t d_ : shape) check(d_ > 0, "tensor: nonpositive dimension");
  }

  static TensorT zeros(Shape s) {
    int64_t n = shape_numel(s);
    return TensorT(std::move(s), std::vector<T>(static_cast<size_t>(n), T(0)));
  }
  static TensorT full(Shape s, T v) {
    int64_t n = shape_numel(s);
    return TensorT(std::move(s), std::vector<T>(static_cast<size_t>(n), v));
  }
  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  /// Construction from external input: rejects NaN/Inf.
  static TensorT external(Shape s, std::vector<T> d) {
    for (T v : d)
      check(std::isfinite(static_cast<double>(v)),
            "tensor: non-finite element in external input");
    return TensorT(std::move(s), std::move(d));
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(int i) const {
    if (i < 0) i += static_cast<int>(shape.size());
    return shape[static_cast<size_t>(i)];
  }
  int rank() const { return static_cast<int>(shape.size()); }

  T& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& at(int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> d(data.size());
    for (size_t i = 0; i < data.size(); ++i) d[i] = static_cast<U>(data[i]);
    TensorT<U> out;
    out.shape = shape;
    out.data = std::move(d);
    out.requires_grad = requires_grad;
    return out;
  }

  TensorT with_grad() const {
    TensorT t = *this;
    t.requires_grad = true;
    return t;
  }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename T>
double max_abs(const TensorT<T>& t) {
  double m = 0;
  for (T v : t.data) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
double sum_f64(const TensorT<T>& t) {
  double s = 0;
  for (T v : t.data) s += static_cast<double>(v);
  return s;
}

/// Linear-interpolation quantile of an unsorted sample, q in [0,1].
inline double quantile(std::vector<double> v, double q) {
  check(!v.empty(), "quantile: empty sample");
  check(q >= 0.0 && q <= 1.0, "quantile: q out of [0,1]");
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  double pos = q * static_cast<double>(v.size() - 1);
  auto lo = static_cast<size_t>(pos);
  if (lo >= v.size() - 1) return v.back();
  double frac = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

}  // namespace aphq

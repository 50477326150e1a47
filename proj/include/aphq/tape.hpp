#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "aphq/tensor.hpp"

namespace aphq {

/// Handle to a tensor recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Values are stored in the tape's scalar type T;
/// gradients are always accumulated in 64-bit floats. A tape is confined
/// to one thread and rebuilt per forward pass.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&)>;

  Var leaf(TensorT<T> value) {
    bool rg = value.requires_grad;
    return emplace(std::move(value), rg, nullptr);
  }
  Var constant(TensorT<T> value) {
    value.requires_grad = false;
    return emplace(std::move(value), false, nullptr);
  }

  /// Records a new node. `needs_grad` marks whether gradients flow into or
  /// through this node; `fn` propagates the node's gradient to its inputs.
  Var emplace(TensorT<T> value, bool needs_grad, BackFn fn) {
    nodes_.push_back(Node{std::move(value), needs_grad, std::move(fn)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void set_fn(Var v, BackFn fn) { nodes_[check_id(v)].fn = std::move(fn); }

  const TensorT<T>& val(Var v) const { return nodes_[check_id(v)].value; }
  bool needs_grad(Var v) const { return nodes_[check_id(v)].needs_grad; }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Gradient of a node after backward(); nullptr when the node is
  /// unreachable from the loss or does not need gradients.
  const TensorD* grad(Var v) const { return grads_[check_id(v)].get(); }

  /// Gradient accumulator, created zero-filled on first access.
  TensorD& grad_acc(Var v) {
    size_t i = check_id(v);
    if (!grads_[i])
      grads_[i] = std::make_unique<TensorD>(TensorD::zeros(nodes_[i].value.shape));
    return *grads_[i];
  }

  /// Reverse sweep from a scalar loss node. Gradients from a previous
  /// sweep are discarded.
  void backward(Var loss) {
    check(loss.valid() && loss.id < size(), "backward: invalid loss id");
    check(nodes_[static_cast<size_t>(loss.id)].value.numel() == 1,
          "backward: loss must be scalar");
    grads_.clear();
    grads_.resize(nodes_.size());
    grad_acc(loss).data[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (grads_[static_cast<size_t>(i)] && n.fn) n.fn(*this);
    }
  }

 private:
  struct Node {
    TensorT<T> value;
    bool needs_grad;
    BackFn fn;
  };
  size_t check_id(Var v) const {
    check(v.valid() && v.id < size(), "tape: invalid var");
    return static_cast<size_t>(v.id);
  }
  std::vector<Node> nodes_;
  std::vector<std::unique_ptr<TensorD>> grads_;
};

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename TA, typename TB, typename TC>
void mm_acc(const TA* a, const TB* b, TC* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    TC* crow = c + i * n;
    const TA* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      TC av = static_cast<TC>(arow[p]);
      const TB* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * static_cast<TC>(brow[j]);
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename TA, typename TB, typename TC>
void mm_nt_acc(const TA* a, const TB* b, TC* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const TA* arow = a + i * k;
    TC* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const TB* brow = b + j * k;
      TC acc = 0;
      for (int64_t p = 0; p < k; ++p)
        acc += static_cast<TC>(arow[p]) * static_cast<TC>(brow[p]);
      crow[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename TA, typename TB, typename TC>
void mm_tn_acc(const TA* a, const TB* b, TC* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const TA* arow = a + i * k;
    const TB* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      TC av = static_cast<TC>(arow[p]);
      TC* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * static_cast<TC>(brow[j]);
    }
  }
}

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
inline double std_normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Var add(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  check(av.same_shape(bv), "add: shape mismatch");
  TensorT<T> out = av;
  out.requires_grad = false;
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += bv.at(i);
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, b, o](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    for (Var in : {a, b}) {
      if (!t.needs_grad(in)) continue;
      TensorD& gi = t.grad_acc(in);
      for (int64_t i = 0; i < g.numel(); ++i) gi.at(i) += g.at(i);
    }
  });
  return o;
}

template <typename T>
Var sub(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  check(av.same_shape(bv), "sub: shape mismatch");
  TensorT<T> out = av;
  out.requires_grad = false;
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) -= bv.at(i);
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, b, o](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    if (t.needs_grad(a)) {
      TensorD& ga = t.grad_acc(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga.at(i) += g.at(i);
    }
    if (t.needs_grad(b)) {
      TensorD& gb = t.grad_acc(b);
      for (int64_t i = 0; i < g.numel(); ++i) gb.at(i) -= g.at(i);
    }
  });
  return o;
}

template <typename T>
Var mul(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  check(av.same_shape(bv), "mul: shape mismatch");
  TensorT<T> out = av;
  out.requires_grad = false;
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= bv.at(i);
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, b, o](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    const auto& av2 = t.val(a);
    const auto& bv2 = t.val(b);
    if (t.needs_grad(a)) {
      TensorD& ga = t.grad_acc(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        ga.at(i) += g.at(i) * static_cast<double>(bv2.at(i));
    }
    if (t.needs_grad(b)) {
      TensorD& gb = t.grad_acc(b);
      for (int64_t i = 0; i < g.numel(); ++i)
        gb.at(i) += g.at(i) * static_cast<double>(av2.at(i));
    }
  });
  return o;
}

template <typename T>
Var scalar_mul(Tape<T>& tp, Var a, double c) {
  const auto& av = tp.val(a);
  TensorT<T> out = av;
  out.requires_grad = false;
  for (auto& v : out.data) v = static_cast<T>(static_cast<double>(v) * c);
  bool ng = tp.needs_grad(a);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, o, c](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    TensorD& ga = t.grad_acc(a);
    for (int64_t i = 0; i < g.numel(); ++i) ga.at(i) += g.at(i) * c;
  });
  return o;
}

/// x + p where p covers the trailing dimensions of x (bias, positional
/// embeddings); p is tiled over the leading dimensions.
template <typename T>
Var add_bcast(Tape<T>& tp, Var x, Var p) {
  const auto& xv = tp.val(x);
  const auto& pv = tp.val(p);
  check(xv.numel() % pv.numel() == 0, "add_bcast: trailing shape mismatch");
  TensorT<T> out = xv;
  out.requires_grad = false;
  int64_t pn = pv.numel();
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += pv.at(i % pn);
  bool ng = tp.needs_grad(x) || tp.needs_grad(p);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [x, p, o, pn](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    if (t.needs_grad(x)) {
      TensorD& gx = t.grad_acc(x);
      for (int64_t i = 0; i < g.numel(); ++i) gx.at(i) += g.at(i);
    }
    if (t.needs_grad(p)) {
      TensorD& gp = t.grad_acc(p);
      for (int64_t i = 0; i < g.numel(); ++i) gp.at(i % pn) += g.at(i);
    }
  });
  return o;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Var reshape(Tape<T>& tp, Var a, Shape s) {
  const auto& av = tp.val(a);
  check(shape_numel(s) == av.numel(), "reshape: numel mismatch");
  TensorT<T> out(std::move(s), av.data);
  bool ng = tp.needs_grad(a);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, o](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    TensorD& ga = t.grad_acc(a);
    for (int64_t i = 0; i < g.numel(); ++i) ga.at(i) += g.at(i);
  });
  return o;
}

namespace detail {
inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

// For each output flat index, the corresponding input flat index.
inline std::vector<int64_t> permute_map(const Shape& in_shape, const std::vector<int>& axes) {
  Shape out_shape(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = in_shape[static_cast<size_t>(axes[i])];
  auto in_st = strides_of(in_shape);
  auto out_st = strides_of(out_shape);
  int64_t n = shape_numel(in_shape);
  std::vector<int64_t> map(static_cast<size_t>(n));
  for (int64_t oi = 0; oi < n; ++oi) {
    int64_t rem = oi, ii = 0;
    for (size_t d = 0; d < axes.size(); ++d) {
      int64_t idx = rem / out_st[d];
      rem %= out_st[d];
      ii += idx * in_st[static_cast<size_t>(axes[d])];
    }
    map[static_cast<size_t>(oi)] = ii;
  }
  return map;
}
}  // namespace detail

template <typename T>
Var permute(Tape<T>& tp, Var a, std::vector<int> axes) {
  const auto& av = tp.val(a);
  check(axes.size() == av.shape.size(), "permute: axes rank mismatch");
  Shape out_shape(axes.size());
  for (size_t i = 0; i < axes.size(); ++i)
    out_shape[i] = av.shape[static_cast<size_t>(axes[i])];
  auto map = detail::permute_map(av.shape, axes);
  TensorT<T> out = TensorT<T>::zeros(out_shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = av.at(map[static_cast<size_t>(i)]);
  bool ng = tp.needs_grad(a);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, o, map = std::move(map)](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    TensorD& ga = t.grad_acc(a);
    for (int64_t i = 0; i < g.numel(); ++i) ga.at(map[static_cast<size_t>(i)]) += g.at(i);
  });
  return o;
}

/// Prepends a learned token to every sequence: [B,t,e] + [e] -> [B,t+1,e].
template <typename T>
Var prepend_token(Tape<T>& tp, Var x, Var tok) {
  const auto& xv = tp.val(x);
  const auto& tv = tp.val(tok);
  check(xv.rank() == 3 && tv.rank() == 1 && tv.numel() == xv.dim(2),
        "prepend_token: expected [B,t,e] and [e]");
  int64_t B = xv.dim(0), t = xv.dim(1), e = xv.dim(2);
  TensorT<T> out = TensorT<T>::zeros({B, t + 1, e});
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < e; ++c) out.at((b * (t + 1)) * e + c) = tv.at(c);
    for (int64_t r = 0; r < t; ++r)
      for (int64_t c = 0; c < e; ++c)
        out.at((b * (t + 1) + r + 1) * e + c) = xv.at((b * t + r) * e + c);
  }
  bool ng = tp.needs_grad(x) || tp.needs_grad(tok);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [x, tok, o, B, t, e](Tape<T>& tpp) {
    const TensorD& g = *tpp.grad(o);
    if (tpp.needs_grad(tok)) {
      TensorD& gt = tpp.grad_acc(tok);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < e; ++c) gt.at(c) += g.at((b * (t + 1)) * e + c);
    }
    if (tpp.needs_grad(x)) {
      TensorD& gx = tpp.grad_acc(x);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t r = 0; r < t; ++r)
          for (int64_t c = 0; c < e; ++c)
            gx.at((b * t + r) * e + c) += g.at((b * (t + 1) + r + 1) * e + c);
    }
  });
  return o;
}

/// Selects one token from every sequence: [B,t,e] -> [B,e].
template <typename T>
Var select_token(Tape<T>& tp, Var x, int64_t idx) {
  const auto& xv = tp.val(x);
  check(xv.rank() == 3 && idx >= 0 && idx < xv.dim(1), "select_token: bad index");
  int64_t B = xv.dim(0), t = xv.dim(1), e = xv.dim(2);
  TensorT<T> out = TensorT<T>::zeros({B, e});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < e; ++c) out.at(b * e + c) = xv.at((b * t + idx) * e + c);
  bool ng = tp.needs_grad(x);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [x, o, idx, B, t, e](Tape<T>& tpp) {
    const TensorD& g = *tpp.grad(o);
    TensorD& gx = tpp.grad_acc(x);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < e; ++c) gx.at((b * t + idx) * e + c) += g.at(b * e + c);
  });
  return o;
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

/// Batched matmul. a is [*,m,k]; b is either [k,n] (shared weight) or has
/// the same leading dims as a. With transpose_b, b is [n,k] / [*,n,k].
template <typename T>
Var matmul(Tape<T>& tp, Var a, Var b, bool transpose_b = false) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  check(av.rank() >= 2 && bv.rank() >= 2, "matmul: rank < 2");
  int64_t m = av.dim(-2), k = av.dim(-1);
  int64_t bk = transpose_b ? bv.dim(-1) : bv.dim(-2);
  int64_t n = transpose_b ? bv.dim(-2) : bv.dim(-1);
  check(k == bk, "matmul: inner dimension mismatch " + shape_str(av.shape) +
                     (transpose_b ? " x T" : " x ") + shape_str(bv.shape));
  int64_t batch = av.numel() / (m * k);
  bool shared_b = bv.rank() == 2;
  if (!shared_b)
    check(bv.numel() / (bk * n) == batch, "matmul: batch dims mismatch");
  Shape out_shape(av.shape.begin(), av.shape.end() - 1);
  out_shape.push_back(n);
  TensorT<T> out = TensorT<T>::zeros(out_shape);
  for (int64_t s = 0; s < batch; ++s) {
    const T* ap = av.data.data() + s * m * k;
    const T* bp = bv.data.data() + (shared_b ? 0 : s * k * n);
    T* cp = out.data.data() + s * m * n;
    if (transpose_b)
      detail::mm_nt_acc(ap, bp, cp, m, k, n);
    else
      detail::mm_acc(ap, bp, cp, m, k, n);
  }
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, b, o, m, k, n, batch, shared_b, transpose_b](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    const auto& av2 = t.val(a);
    const auto& bv2 = t.val(b);
    if (t.needs_grad(a)) {
      TensorD& ga = t.grad_acc(a);
      for (int64_t s = 0; s < batch; ++s) {
        const double* gp = g.data.data() + s * m * n;
        const T* bp = bv2.data.data() + (shared_b ? 0 : s * k * n);
        double* gap = ga.data.data() + s * m * k;
        if (transpose_b)
          detail::mm_acc(gp, bp, gap, m, n, k);  // g[m,n] * b[n,k]
        else
          detail::mm_nt_acc(gp, bp, gap, m, n, k);  // g[m,n] * b[k,n]^T
      }
    }
    if (t.needs_grad(b)) {
      TensorD& gb = t.grad_acc(b);
      for (int64_t s = 0; s < batch; ++s) {
        const T* ap = av2.data.data() + s * m * k;
        const double* gp = g.data.data() + s * m * n;
        double* gbp = gb.data.data() + (shared_b ? 0 : s * k * n);
        if (transpose_b)
          detail::mm_tn_acc(gp, ap, gbp, m, n, k);  // g[m,n]^T * a[m,k] -> [n,k]
        else
          detail::mm_tn_acc(ap, gp, gbp, m, k, n);  // a[m,k]^T * g[m,n] -> [k,n]
      }
    }
  });
  return o;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

/// Exact erf-based GELU: x * Phi(x).
template <typename T>
Var gelu(Tape<T>& tp, Var a) {
  const auto& av = tp.val(a);
  TensorT<T> out = av;
  out.requires_grad = false;
  for (auto& v : out.data) {
    double x = static_cast<double>(v);
    v = static_cast<T>(x * detail::std_normal_cdf(x));
  }
  bool ng = tp.needs_grad(a);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, o](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    const auto& av2 = t.val(a);
    TensorD& ga = t.grad_acc(a);
    for (int64_t i = 0; i < g.numel(); ++i) {
      double x = static_cast<double>(av2.at(i));
      ga.at(i) += g.at(i) * (detail::std_normal_cdf(x) + x * detail::std_normal_pdf(x));
    }
  });
  return o;
}

/// max(0, x); derivative at exactly 0 is 0.
template <typename T>
Var relu(Tape<T>& tp, Var a) {
  const auto& av = tp.val(a);
  TensorT<T> out = av;
  out.requires_grad = false;
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  bool ng = tp.needs_grad(a);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, o](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    const auto& av2 = t.val(a);
    TensorD& ga = t.grad_acc(a);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (av2.at(i) > T(0)) ga.at(i) += g.at(i);
  });
  return o;
}

/// min(x, cap); gradient is blocked where x > cap.
template <typename T>
Var clamp_max(Tape<T>& tp, Var a, double cap) {
  const auto& av = tp.val(a);
  TensorT<T> out = av;
  out.requires_grad = false;
  T c = static_cast<T>(cap);
  for (auto& v : out.data) v = v < c ? v : c;
  bool ng = tp.needs_grad(a);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, o, c](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    const auto& av2 = t.val(a);
    TensorD& ga = t.grad_acc(a);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (av2.at(i) <= c) ga.at(i) += g.at(i);
  });
  return o;
}

/// Shift-stabilized softmax over the last axis.
template <typename T>
Var softmax_lastdim(Tape<T>& tp, Var a) {
  const auto& av = tp.val(a);
  check(av.rank() >= 1, "softmax: rank 0");
  int64_t C = av.dim(-1);
  int64_t rows = av.numel() / C;
  TensorT<T> out = av;
  out.requires_grad = false;
  for (int64_t r = 0; r < rows; ++r) {
    T* p = out.data.data() + r * C;
    double mx = -1e300;
    for (int64_t j = 0; j < C; ++j) mx = std::max(mx, static_cast<double>(p[j]));
    double sum = 0;
    for (int64_t j = 0; j < C; ++j) sum += std::exp(static_cast<double>(p[j]) - mx);
    for (int64_t j = 0; j < C; ++j)
      p[j] = static_cast<T>(std::exp(static_cast<double>(p[j]) - mx) / sum);
  }
  bool ng = tp.needs_grad(a);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, o, rows, C](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    const auto& y = t.val(o);
    TensorD& ga = t.grad_acc(a);
    for (int64_t r = 0; r < rows; ++r) {
      double dot = 0;
      for (int64_t j = 0; j < C; ++j)
        dot += g.at(r * C + j) * static_cast<double>(y.at(r * C + j));
      for (int64_t j = 0; j < C; ++j)
        ga.at(r * C + j) +=
            static_cast<double>(y.at(r * C + j)) * (g.at(r * C + j) - dot);
    }
  });
  return o;
}

/// Layer normalization over the last axis, followed by affine gamma/beta.
template <typename T>
Var layernorm(Tape<T>& tp, Var x, Var gamma, Var beta, double eps = 1e-6) {
  const auto& xv = tp.val(x);
  const auto& gv = tp.val(gamma);
  const auto& bv = tp.val(beta);
  int64_t C = xv.dim(-1);
  check(gv.numel() == C && bv.numel() == C, "layernorm: gamma/beta size mismatch");
  int64_t rows = xv.numel() / C;
  TensorT<T> out = TensorT<T>::zeros(xv.shape);
  std::vector<double> mu(static_cast<size_t>(rows)), inv_sd(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = xv.data.data() + r * C;
    double m = 0;
    for (int64_t j = 0; j < C; ++j) m += static_cast<double>(p[j]);
    m /= static_cast<double>(C);
    double var = 0;
    for (int64_t j = 0; j < C; ++j) {
      double d = static_cast<double>(p[j]) - m;
      var += d * d;
    }
    var /= static_cast<double>(C);
    double is = 1.0 / std::sqrt(var + eps);
    mu[static_cast<size_t>(r)] = m;
    inv_sd[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < C; ++j)
      out.at(r * C + j) = static_cast<T>((static_cast<double>(p[j]) - m) * is *
                                             static_cast<double>(gv.at(j)) +
                                         static_cast<double>(bv.at(j)));
  }
  bool ng = tp.needs_grad(x) || tp.needs_grad(gamma) || tp.needs_grad(beta);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [x, gamma, beta, o, rows, C, mu = std::move(mu),
                inv_sd = std::move(inv_sd)](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    const auto& xv2 = t.val(x);
    const auto& gv2 = t.val(gamma);
    for (int64_t r = 0; r < rows; ++r) {
      double m = mu[static_cast<size_t>(r)], is = inv_sd[static_cast<size_t>(r)];
      const T* p = xv2.data.data() + r * C;
      const double* gr = g.data.data() + r * C;
      if (t.needs_grad(gamma)) {
        TensorD& gg = t.grad_acc(gamma);
        for (int64_t j = 0; j < C; ++j)
          gg.at(j) += gr[j] * (static_cast<double>(p[j]) - m) * is;
      }
      if (t.needs_grad(beta)) {
        TensorD& gb = t.grad_acc(beta);
        for (int64_t j = 0; j < C; ++j) gb.at(j) += gr[j];
      }
      if (t.needs_grad(x)) {
        TensorD& gx = t.grad_acc(x);
        double mean_gd = 0, mean_gdx = 0;
        for (int64_t j = 0; j < C; ++j) {
          double gd = gr[j] * static_cast<double>(gv2.at(j));
          double xh = (static_cast<double>(p[j]) - m) * is;
          mean_gd += gd;
          mean_gdx += gd * xh;
        }
        mean_gd /= static_cast<double>(C);
        mean_gdx /= static_cast<double>(C);
        for (int64_t j = 0; j < C; ++j) {
          double gd = gr[j] * static_cast<double>(gv2.at(j));
          double xh = (static_cast<double>(p[j]) - m) * is;
          gx.at(r * C + j) += (gd - mean_gd - xh * mean_gdx) * is;
        }
      }
    }
  });
  return o;
}

// ---------------------------------------------------------------------------
// Reductions and losses (accumulated in 64-bit)
// ---------------------------------------------------------------------------

template <typename T>
Var sum_all(Tape<T>& tp, Var a) {
  const auto& av = tp.val(a);
  double s = 0;
  for (T v : av.data) s += static_cast<double>(v);
  bool ng = tp.needs_grad(a);
  Var o = tp.emplace(TensorT<T>::scalar(static_cast<T>(s)), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, o](Tape<T>& t) {
    double g = t.grad(o)->at(0);
    TensorD& ga = t.grad_acc(a);
    for (int64_t i = 0; i < ga.numel(); ++i) ga.at(i) += g;
  });
  return o;
}

/// Sum_i w_i (pred_i - target_i)^2; the weight tensor covers the trailing
/// dimensions of pred and is tiled over the batch. Weights take no gradient.
template <typename T>
Var weighted_sse(Tape<T>& tp, Var pred, Var target, Var w) {
  const auto& pv = tp.val(pred);
  const auto& tv = tp.val(target);
  const auto& wv = tp.val(w);
  check(pv.same_shape(tv), "weighted_sse: shape mismatch");
  check(pv.numel() % wv.numel() == 0, "weighted_sse: weight shape mismatch");
  int64_t wn = wv.numel();
  double s = 0;
  for (int64_t i = 0; i < pv.numel(); ++i) {
    double d = static_cast<double>(pv.at(i)) - static_cast<double>(tv.at(i));
    s += static_cast<double>(wv.at(i % wn)) * d * d;
  }
  bool ng = tp.needs_grad(pred) || tp.needs_grad(target);
  Var o = tp.emplace(TensorT<T>::scalar(static_cast<T>(s)), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [pred, target, w, o, wn](Tape<T>& t) {
    double g = t.grad(o)->at(0);
    const auto& pv2 = t.val(pred);
    const auto& tv2 = t.val(target);
    const auto& wv2 = t.val(w);
    for (int64_t i = 0; i < pv2.numel(); ++i) {
      double d = static_cast<double>(pv2.at(i)) - static_cast<double>(tv2.at(i));
      double gi = 2.0 * static_cast<double>(wv2.at(i % wn)) * d * g;
      if (t.needs_grad(pred)) t.grad_acc(pred).at(i) += gi;
      if (t.needs_grad(target)) t.grad_acc(target).at(i) -= gi;
    }
  });
  return o;
}

/// Mean over rows of KL(softmax(teacher) || softmax(student)). The last axis
/// is the class axis. The teacher branch receives no gradient.
template <typename T>
Var kl_divergence_logits(Tape<T>& tp, Var student, Var teacher) {
  const auto& sv = tp.val(student);
  const auto& tv = tp.val(teacher);
  check(sv.same_shape(tv), "kl_divergence_logits: shape mismatch");
  check(!tp.needs_grad(teacher), "kl_divergence_logits: teacher must be detached");
  int64_t C = sv.dim(-1);
  int64_t rows = sv.numel() / C;
  auto log_probs = [C](const T* p, std::vector<double>& out_lp) {
    double mx = -1e300;
    for (int64_t j = 0; j < C; ++j) mx = std::max(mx, static_cast<double>(p[j]));
    double sum = 0;
    for (int64_t j = 0; j < C; ++j) sum += std::exp(static_cast<double>(p[j]) - mx);
    double lse = mx + std::log(sum);
    for (int64_t j = 0; j < C; ++j) out_lp[static_cast<size_t>(j)] = static_cast<double>(p[j]) - lse;
  };
  std::vector<double> lp_s(static_cast<size_t>(C)), lp_t(static_cast<size_t>(C));
  double total = 0;
  for (int64_t r = 0; r < rows; ++r) {
    log_probs(sv.data.data() + r * C, lp_s);
    log_probs(tv.data.data() + r * C, lp_t);
    for (int64_t j = 0; j < C; ++j) {
      double pt = std::exp(lp_t[static_cast<size_t>(j)]);
      total += pt * (lp_t[static_cast<size_t>(j)] - lp_s[static_cast<size_t>(j)]);
    }
  }
  total /= static_cast<double>(rows);
  bool ng = tp.needs_grad(student);
  Var o = tp.emplace(TensorT<T>::scalar(static_cast<T>(total)), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [student, teacher, o, rows, C, log_probs](Tape<T>& t) {
    double g = t.grad(o)->at(0);
    const auto& sv2 = t.val(student);
    const auto& tv2 = t.val(teacher);
    TensorD& gs = t.grad_acc(student);
    std::vector<double> lp_s(static_cast<size_t>(C)), lp_t(static_cast<size_t>(C));
    for (int64_t r = 0; r < rows; ++r) {
      log_probs(sv2.data.data() + r * C, lp_s);
      log_probs(tv2.data.data() + r * C, lp_t);
      for (int64_t j = 0; j < C; ++j) {
        double ps = std::exp(lp_s[static_cast<size_t>(j)]);
        double pt = std::exp(lp_t[static_cast<size_t>(j)]);
        gs.at(r * C + j) += g * (ps - pt) / static_cast<double>(rows);
      }
    }
  });
  return o;
}

/// Smooth L1 with threshold 1.0, averaged over elements.
template <typename T>
Var smooth_l1(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.val(a);
  const auto& bv = tp.val(b);
  check(av.same_shape(bv), "smooth_l1: shape mismatch");
  int64_t n = av.numel();
  double s = 0;
  for (int64_t i = 0; i < n; ++i) {
    double d = static_cast<double>(av.at(i)) - static_cast<double>(bv.at(i));
    double ad = std::abs(d);
    s += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
  }
  s /= static_cast<double>(n);
  bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  Var o = tp.emplace(TensorT<T>::scalar(static_cast<T>(s)), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [a, b, o, n](Tape<T>& t) {
    double g = t.grad(o)->at(0);
    const auto& av2 = t.val(a);
    const auto& bv2 = t.val(b);
    for (int64_t i = 0; i < n; ++i) {
      double d = static_cast<double>(av2.at(i)) - static_cast<double>(bv2.at(i));
      double gd = (std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0)) * g / static_cast<double>(n);
      if (t.needs_grad(a)) t.grad_acc(a).at(i) += gd;
      if (t.needs_grad(b)) t.grad_acc(b).at(i) -= gd;
    }
  });
  return o;
}

/// Mean cross-entropy of logits [R,C] against integer labels.
template <typename T>
Var softmax_cross_entropy(Tape<T>& tp, Var logits, std::vector<int> labels) {
  const auto& lv = tp.val(logits);
  int64_t C = lv.dim(-1);
  int64_t rows = lv.numel() / C;
  check(static_cast<int64_t>(labels.size()) == rows, "cross_entropy: label count mismatch");
  double total = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = lv.data.data() + r * C;
    double mx = -1e300;
    for (int64_t j = 0; j < C; ++j) mx = std::max(mx, static_cast<double>(p[j]));
    double sum = 0;
    for (int64_t j = 0; j < C; ++j) sum += std::exp(static_cast<double>(p[j]) - mx);
    total -= static_cast<double>(p[labels[static_cast<size_t>(r)]]) - mx - std::log(sum);
  }
  total /= static_cast<double>(rows);
  bool ng = tp.needs_grad(logits);
  Var o = tp.emplace(TensorT<T>::scalar(static_cast<T>(total)), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [logits, o, rows, C, labels = std::move(labels)](Tape<T>& t) {
    double g = t.grad(o)->at(0);
    const auto& lv2 = t.val(logits);
    TensorD& gl = t.grad_acc(logits);
    for (int64_t r = 0; r < rows; ++r) {
      const T* p = lv2.data.data() + r * C;
      double mx = -1e300;
      for (int64_t j = 0; j < C; ++j) mx = std::max(mx, static_cast<double>(p[j]));
      double sum = 0;
      for (int64_t j = 0; j < C; ++j) sum += std::exp(static_cast<double>(p[j]) - mx);
      for (int64_t j = 0; j < C; ++j) {
        double pr = std::exp(static_cast<double>(p[j]) - mx) / sum;
        double onehot = j == labels[static_cast<size_t>(r)] ? 1.0 : 0.0;
        gl.at(r * C + j) += g * (pr - onehot) / static_cast<double>(rows);
      }
    }
  });
  return o;
}

}  // namespace aphq

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "aphq/tape.hpp"
#include "aphq/tensor.hpp"

namespace aphq {

enum class Granularity { kPerTensor, kPerChannel };

/// Uniform affine quantizer parameters. For per-channel granularity the
/// channel axis is the last axis of the tensor (output channels of a
/// [in,out] weight matrix).
struct QuantParams {
  int bits = 8;
  bool is_signed = false;
  Granularity granularity = Granularity::kPerTensor;
  std::vector<double> scale;     // one entry, or one per channel
  std::vector<int> zero_point;   // aligned with scale

  int64_t qmin() const { return is_signed ? -(int64_t(1) << (bits - 1)) : 0; }
  int64_t qmax() const {
    return is_signed ? (int64_t(1) << (bits - 1)) - 1 : (int64_t(1) << bits) - 1;
  }
  bool valid() const {
    if (bits < 2 || bits > 8 || scale.empty() || scale.size() != zero_point.size())
      return false;
    for (size_t i = 0; i < scale.size(); ++i) {
      if (!(scale[i] > 0)) return false;
      if (zero_point[i] < qmin() || zero_point[i] > qmax()) return false;
    }
    return true;
  }
};

constexpr double kScaleFloor = 1e-8;

// Round half away from zero, fixed everywhere as the tie-break.
inline double qround(double x) { return std::round(x); }

namespace detail {
inline void fit_affine(double lo, double hi, int64_t qmin, int64_t qmax,
                       double& scale, int& zp) {
  if (hi == lo) {
    // All-equal group: floor the scale, center the zero point.
    scale = kScaleFloor;
    zp = static_cast<int>(qround(static_cast<double>(qmin + qmax) / 2.0));
    return;
  }
  // Extend the clipped range to include zero so that zero is representable.
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  scale = (hi - lo) / static_cast<double>(qmax - qmin);
  if (!(scale > kScaleFloor)) scale = kScaleFloor;
  double z = static_cast<double>(qmin) - lo / scale;
  z = std::min(std::max(z, static_cast<double>(qmin)), static_cast<double>(qmax));
  zp = static_cast<int>(qround(z));
}
}  // namespace detail

/// Fits scale/zero-point to the [1-q, q] quantile range of x. Weights use
/// clip_quantile=1 (exact min/max); activations use a clipped range.
inline QuantParams calibrate_quant_params(const Tensor& x, int bits,
                                          Granularity granularity,
                                          double clip_quantile, bool is_signed) {
  check(x.numel() > 0, "calibrate_quant_params: empty tensor");
  check(clip_quantile > 0.5 && clip_quantile <= 1.0,
        "calibrate_quant_params: clip_quantile out of (0.5, 1]");
  QuantParams qp;
  qp.bits = bits;
  qp.is_signed = is_signed;
  qp.granularity = granularity;
  auto fit_group = [&](const std::vector<double>& vals) {
    double lo, hi;
    if (clip_quantile >= 1.0) {
      lo = *std::min_element(vals.begin(), vals.end());
      hi = *std::max_element(vals.begin(), vals.end());
    } else {
      lo = quantile(vals, 1.0 - clip_quantile);
      hi = quantile(vals, clip_quantile);
    }
    double s;
    int z;
    detail::fit_affine(lo, hi, qp.qmin(), qp.qmax(), s, z);
    qp.scale.push_back(s);
    qp.zero_point.push_back(z);
  };
  if (granularity == Granularity::kPerTensor) {
    std::vector<double> vals(x.data.begin(), x.data.end());
    fit_group(vals);
  } else {
    int64_t C = x.dim(-1);
    int64_t rows = x.numel() / C;
    for (int64_t c = 0; c < C; ++c) {
      std::vector<double> vals(static_cast<size_t>(rows));
      for (int64_t r = 0; r < rows; ++r)
        vals[static_cast<size_t>(r)] = static_cast<double>(x.at(r * C + c));
      fit_group(vals);
    }
  }
  return qp;
}

namespace detail {
template <typename T>
inline size_t chan_of(const TensorT<T>& x, const QuantParams& qp, int64_t i) {
  if (qp.granularity == Granularity::kPerTensor) return 0;
  return static_cast<size_t>(i % x.dim(-1));
}
}  // namespace detail

/// Quantize-then-dequantize simulation. Idempotent.
template <typename T>
TensorT<T> fake_quantize(const TensorT<T>& x, const QuantParams& qp) {
  check(qp.valid(), "fake_quantize: invalid QuantParams");
  if (qp.granularity == Granularity::kPerChannel)
    check(x.numel() % x.dim(-1) == 0 &&
              static_cast<int64_t>(qp.scale.size()) == x.dim(-1),
          "fake_quantize: channel count mismatch");
  TensorT<T> out = x;
  out.requires_grad = false;
  double qmin = static_cast<double>(qp.qmin()), qmax = static_cast<double>(qp.qmax());
  for (int64_t i = 0; i < x.numel(); ++i) {
    size_t c = detail::chan_of(x, qp, i);
    double s = qp.scale[c];
    double z = qp.zero_point[c];
    double q = qround(static_cast<double>(x.at(i)) / s) + z;
    q = std::min(std::max(q, qmin), qmax);
    out.at(i) = static_cast<T>(s * (q - z));
  }
  return out;
}

// ---------------------------------------------------------------------------
// AdaRound
// ---------------------------------------------------------------------------

/// Learnable rounding state for one weight tensor. h(V) is the rectified
/// sigmoid; at initialization h(V) equals frac(W/scale).
struct AdaRoundState {
  Tensor v;                 // continuous rounding variables, shape = weight shape
  double zeta = 1.1;
  double gamma = -0.1;
  double lambda = 0.01;     // rounding-regularizer weight
  double beta_start = 18.0; // annealed down to beta_end after warmup
  double beta_end = 2.0;
  double warmup = 0.2;      // fraction of iterations with no rounding loss

  double h(double vi) const {
    double s = 1.0 / (1.0 + std::exp(-vi));
    return std::min(std::max(s * (zeta - gamma) + gamma, 0.0), 1.0);
  }
  double dh(double vi) const {
    double s = 1.0 / (1.0 + std::exp(-vi));
    double raw = s * (zeta - gamma) + gamma;
    if (raw <= 0.0 || raw >= 1.0) return 0.0;
    return s * (1.0 - s) * (zeta - gamma);
  }
  double beta_at(int iter, int max_iter) const {
    double t = max_iter > 0 ? static_cast<double>(iter) / max_iter : 1.0;
    if (t < warmup) return beta_start;
    double rel = (t - warmup) / (1.0 - warmup);
    return beta_start + (beta_end - beta_start) * rel;
  }
};

inline AdaRoundState init_adaround(const Tensor& w, const QuantParams& qp) {
  AdaRoundState st;
  st.v = Tensor::zeros(w.shape);
  for (int64_t i = 0; i < w.numel(); ++i) {
    size_t c = detail::chan_of(w, qp, i);
    double u = static_cast<double>(w.at(i)) / qp.scale[c];
    double frac = u - std::floor(u);
    double p = (frac - st.gamma) / (st.zeta - st.gamma);
    p = std::min(std::max(p, 1e-6), 1.0 - 1e-6);
    st.v.at(i) = static_cast<float>(std::log(p / (1.0 - p)));
  }
  return st;
}

/// De-quantized weight with soft (continuous h(V)) or hard (h(V) >= 0.5)
/// rounding decisions.
inline Tensor adaround_weight(const Tensor& w, const QuantParams& qp,
                              const AdaRoundState& st, bool hard) {
  check(w.same_shape(st.v), "adaround_weight: V shape mismatch");
  Tensor out = Tensor::zeros(w.shape);
  double qmin = static_cast<double>(qp.qmin()), qmax = static_cast<double>(qp.qmax());
  for (int64_t i = 0; i < w.numel(); ++i) {
    size_t c = detail::chan_of(w, qp, i);
    double s = qp.scale[c];
    double z = qp.zero_point[c];
    double h = st.h(static_cast<double>(st.v.at(i)));
    double up = hard ? (h >= 0.5 ? 1.0 : 0.0) : h;
    double code = std::floor(static_cast<double>(w.at(i)) / s) + z + up;
    code = std::min(std::max(code, qmin), qmax);
    out.at(i) = static_cast<float>(s * (code - z));
  }
  return out;
}

// ---------------------------------------------------------------------------
// QDrop
// ---------------------------------------------------------------------------

struct DropConfig {
  double drop_probability = 0.5;
  DropConfig() = default;
  explicit DropConfig(double p) : drop_probability(p) {
    check(p >= 0.0 && p <= 1.0, "DropConfig: probability out of [0,1]");
  }
};

/// Elementwise choice of the full-precision activation with probability
/// drop_probability, else the quantized one.
template <typename T>
TensorT<T> qdrop_activation(const TensorT<T>& x_fp, const TensorT<T>& x_q,
                            const DropConfig& cfg, std::mt19937_64& rng) {
  check(x_fp.same_shape(x_q), "qdrop_activation: shape mismatch");
  TensorT<T> out = x_q;
  out.requires_grad = false;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int64_t i = 0; i < out.numel(); ++i)
    if (u(rng) < cfg.drop_probability) out.at(i) = x_fp.at(i);
  return out;
}

inline std::vector<uint8_t> qdrop_mask(int64_t n, const DropConfig& cfg,
                                       std::mt19937_64& rng) {
  std::vector<uint8_t> mask(static_cast<size_t>(n));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& m : mask) m = u(rng) < cfg.drop_probability ? 1 : 0;
  return mask;
}

// ---------------------------------------------------------------------------
// Tape ops for reconstruction training
// ---------------------------------------------------------------------------

/// Soft-AdaRound de-quantized weight as a tape node; W and QuantParams are
/// constants, gradients flow into the rounding variables V. An optional
/// scalar scale multiplier theta participates with an LSQ-style gradient
/// (used by the gradient-variance probe).
template <typename T>
Var adaround_weight_op(Tape<T>& tp, Var v, const Tensor& w, const QuantParams& qp,
                       const AdaRoundState& st, Var theta = Var{}) {
  const auto& vv = tp.val(v);
  check(vv.shape == w.shape, "adaround_weight_op: V shape mismatch");
  double theta_val = theta.valid() ? static_cast<double>(tp.val(theta).at(0)) : 1.0;
  double qmin = static_cast<double>(qp.qmin()), qmax = static_cast<double>(qp.qmax());
  TensorT<T> out = TensorT<T>::zeros(w.shape);
  for (int64_t i = 0; i < w.numel(); ++i) {
    size_t c = detail::chan_of(w, qp, i);
    double s = qp.scale[c] * theta_val;
    double z = qp.zero_point[c];
    double h = st.h(static_cast<double>(vv.at(i)));
    double code = std::floor(static_cast<double>(w.at(i)) / s) + z + h;
    code = std::min(std::max(code, qmin), qmax);
    out.at(i) = static_cast<T>(s * (code - z));
  }
  bool ng = tp.needs_grad(v) || (theta.valid() && tp.needs_grad(theta));
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  // copies of w/qp/st keep the closure self-contained
  tp.set_fn(o, [v, theta, o, w, qp, st, qmin, qmax](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    const auto& vv2 = t.val(v);
    double th = theta.valid() ? static_cast<double>(t.val(theta).at(0)) : 1.0;
    TensorD* gv = t.needs_grad(v) ? &t.grad_acc(v) : nullptr;
    double gtheta = 0;
    bool want_theta = theta.valid() && t.needs_grad(theta);
    for (int64_t i = 0; i < w.numel(); ++i) {
      size_t c = detail::chan_of(w, qp, i);
      double s = qp.scale[c] * th;
      double z = qp.zero_point[c];
      double h = st.h(static_cast<double>(vv2.at(i)));
      double raw_code = std::floor(static_cast<double>(w.at(i)) / s) + z + h;
      bool in_range = raw_code > qmin && raw_code < qmax;
      if (gv && in_range) gv->at(i) += g.at(i) * s * st.dh(static_cast<double>(vv2.at(i)));
      if (want_theta) {
        double code = std::min(std::max(raw_code, qmin), qmax);
        // d(s*(code - z))/d s with straight-through floor, times ds/dtheta
        double dds = in_range ? (code - z) - static_cast<double>(w.at(i)) / s
                              : (code - z);
        gtheta += g.at(i) * dds * qp.scale[c];
      }
    }
    if (want_theta) t.grad_acc(theta).at(0) += gtheta;
  });
  return o;
}

/// Per-tensor activation fake-quantization with a learnable log-scale.
/// Straight-through estimator towards x; LSQ-style gradient for the scale.
template <typename T>
Var fake_quant_act_op(Tape<T>& tp, Var x, Var log_scale, const QuantParams& qp) {
  const auto& xv = tp.val(x);
  check(qp.granularity == Granularity::kPerTensor,
        "fake_quant_act_op: per-tensor only");
  double s = std::exp(static_cast<double>(tp.val(log_scale).at(0)));
  double z = qp.zero_point[0];
  double qmin = static_cast<double>(qp.qmin()), qmax = static_cast<double>(qp.qmax());
  TensorT<T> out = TensorT<T>::zeros(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) {
    double q = qround(static_cast<double>(xv.at(i)) / s) + z;
    q = std::min(std::max(q, qmin), qmax);
    out.at(i) = static_cast<T>(s * (q - z));
  }
  bool ng = tp.needs_grad(x) || tp.needs_grad(log_scale);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [x, log_scale, o, z, qmin, qmax](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    const auto& xv2 = t.val(x);
    double s2 = std::exp(static_cast<double>(t.val(log_scale).at(0)));
    TensorD* gx = t.needs_grad(x) ? &t.grad_acc(x) : nullptr;
    double gs = 0;
    bool want_s = t.needs_grad(log_scale);
    for (int64_t i = 0; i < xv2.numel(); ++i) {
      double u = static_cast<double>(xv2.at(i)) / s2;
      double q = qround(u) + z;
      bool in_range = q >= qmin && q <= qmax;
      if (gx && in_range) gx->at(i) += g.at(i);
      if (want_s) {
        double qc = std::min(std::max(q, qmin), qmax);
        double dds = in_range ? (qc - z) - u : (qc - z);
        gs += g.at(i) * dds * s2;  // chain through s = exp(log_scale)
      }
    }
    if (want_s) t.grad_acc(log_scale).at(0) += gs;
  });
  return o;
}

/// mask ? x_fp : x_q, with gradients routed along the chosen branch.
template <typename T>
Var qdrop_mix_op(Tape<T>& tp, Var x_fp, Var x_q, std::vector<uint8_t> mask) {
  const auto& fv = tp.val(x_fp);
  const auto& qv = tp.val(x_q);
  check(fv.same_shape(qv), "qdrop_mix_op: shape mismatch");
  check(static_cast<int64_t>(mask.size()) == fv.numel(), "qdrop_mix_op: mask size");
  TensorT<T> out = qv;
  out.requires_grad = false;
  for (int64_t i = 0; i < out.numel(); ++i)
    if (mask[static_cast<size_t>(i)]) out.at(i) = fv.at(i);
  bool ng = tp.needs_grad(x_fp) || tp.needs_grad(x_q);
  Var o = tp.emplace(std::move(out), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [x_fp, x_q, o, mask = std::move(mask)](Tape<T>& t) {
    const TensorD& g = *t.grad(o);
    TensorD* gf = t.needs_grad(x_fp) ? &t.grad_acc(x_fp) : nullptr;
    TensorD* gq = t.needs_grad(x_q) ? &t.grad_acc(x_q) : nullptr;
    for (int64_t i = 0; i < g.numel(); ++i) {
      if (mask[static_cast<size_t>(i)]) {
        if (gf) gf->at(i) += g.at(i);
      } else {
        if (gq) gq->at(i) += g.at(i);
      }
    }
  });
  return o;
}

/// AdaRound rounding regularizer lambda * sum(1 - |2h(V)-1|^beta) as a tape
/// node over the V leaf.
template <typename T>
Var adaround_reg_op(Tape<T>& tp, Var v, const AdaRoundState& st, double beta) {
  const auto& vv = tp.val(v);
  double s = 0;
  for (int64_t i = 0; i < vv.numel(); ++i) {
    double h = st.h(static_cast<double>(vv.at(i)));
    s += 1.0 - std::pow(std::abs(2.0 * h - 1.0), beta);
  }
  s *= st.lambda;
  bool ng = tp.needs_grad(v);
  Var o = tp.emplace(TensorT<T>::scalar(static_cast<T>(s)), ng, nullptr);
  if (!ng) return o;
  tp.set_fn(o, [v, o, st, beta](Tape<T>& t) {
    double g = t.grad(o)->at(0);
    const auto& vv2 = t.val(v);
    TensorD& gv = t.grad_acc(v);
    for (int64_t i = 0; i < vv2.numel(); ++i) {
      double vi = static_cast<double>(vv2.at(i));
      double h = st.h(vi);
      double u = 2.0 * h - 1.0;
      if (std::abs(u) < 1e-12) continue;
      double d = -beta * std::pow(std::abs(u), beta - 1.0) * (u > 0 ? 1.0 : -1.0) * 2.0;
      gv.at(i) += g * st.lambda * d * st.dh(vi);
    }
  });
  return o;
}

}  // namespace aphq

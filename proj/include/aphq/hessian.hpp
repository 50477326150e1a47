#pragma once

#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "aphq/tape.hpp"
#include "aphq/tensor.hpp"
#include "aphq/vit.hpp"

namespace aphq {

enum class DistillLossKind { kKlClassification, kKlPlusSmoothL1 };

/// How block outputs are perturbed when estimating Hessian diagonals.
/// kUniform follows the +/- delta * 1 recipe; kSignProbe uses random
/// Rademacher directions averaged over `probes` draws, which stays outside
/// the shift-invariant null space of pre-LN transformer tails.
enum class PerturbDirection { kUniform, kSignProbe };

struct PerturbationConfig {
  double delta = 1e-6;
  DistillLossKind loss_kind = DistillLossKind::kKlClassification;
  PerturbDirection direction = PerturbDirection::kSignProbe;
  int probes = 4;  // sign-probe draws averaged per sample

  void validate() const {
    check(delta > 0, "PerturbationConfig: delta must be positive");
    check(probes >= 1, "PerturbationConfig: probes must be >= 1");
  }
};

/// Jacobians of the distillation loss at the two perturbed outputs.
struct JacobianPair {
  TensorD j_plus;
  TensorD j_minus;
};

/// Per-element averaged second-derivative weights for one block output.
struct HessianDiagonal {
  Tensor values;  // [tokens, embed]
  int64_t sample_count = 0;
};

/// O -> (O + delta*1, O - delta*1).
template <typename T>
std::pair<TensorT<T>, TensorT<T>> perturb_outputs(const TensorT<T>& o, double delta) {
  check(delta > 0, "perturb_outputs: delta must be positive");
  TensorT<T> plus = o, minus = o;
  plus.requires_grad = false;
  minus.requires_grad = false;
  for (int64_t i = 0; i < o.numel(); ++i) {
    plus.at(i) = static_cast<T>(static_cast<double>(o.at(i)) + delta);
    minus.at(i) = static_cast<T>(static_cast<double>(o.at(i)) - delta);
  }
  return {std::move(plus), std::move(minus)};
}

/// O +/- delta * r for a direction tensor r.
inline std::pair<TensorD, TensorD> perturb_along(const TensorD& o, double delta,
                                                 const TensorD& r) {
  check(o.same_shape(r), "perturb_along: direction shape mismatch");
  TensorD plus = o, minus = o;
  for (int64_t i = 0; i < o.numel(); ++i) {
    plus.at(i) = o.at(i) + delta * r.at(i);
    minus.at(i) = o.at(i) - delta * r.at(i);
  }
  return {std::move(plus), std::move(minus)};
}

/// Distillation loss between student and (detached) teacher logits.
template <typename T>
Var distill_loss(Tape<T>& tp, Var student, Var teacher, DistillLossKind kind) {
  Var kl = kl_divergence_logits(tp, student, teacher);
  if (kind == DistillLossKind::kKlClassification) return kl;
  return add(tp, kl, smooth_l1(tp, student, teacher));
}

/// Gradient of the distillation loss L(f(O_eval), f(O_ref)) with respect to
/// O_eval, where f is the model tail after `block_index`. With
/// sum_over_samples the per-row mean is rescaled so each sample's gradient
/// is independent of the batch size.
inline TensorD tail_jacobian(const VitModel<double>& m, int block_index,
                             const TensorD& o_ref, const TensorD& o_eval,
                             const PerturbationConfig& cfg,
                             bool sum_over_samples = false) {
  check(o_ref.same_shape(o_eval), "tail_jacobian: shape mismatch");
  Tape<double> tp;
  Var ref = tp.constant(o_ref);
  Var teacher = run_tail(tp, m, block_index + 1, ref);
  TensorD eval_leaf = o_eval;
  eval_leaf.requires_grad = true;
  Var ev = tp.leaf(std::move(eval_leaf));
  Var student = run_tail(tp, m, block_index + 1, ev);
  Var loss = distill_loss(tp, student, teacher, cfg.loss_kind);
  if (sum_over_samples) {
    int64_t rows = tp.val(student).numel() / tp.val(student).dim(-1);
    loss = scalar_mul(tp, loss, static_cast<double>(rows));
  }
  double lv = static_cast<double>(tp.val(loss).at(0));
  check(std::isfinite(lv), "tail_jacobian: non-finite loss");
  tp.backward(loss);
  const TensorD* g = tp.grad(ev);
  check(g != nullptr, "tail_jacobian: no gradient produced");
  return *g;
}

/// (J+ - J-) / (2*delta), the mean-value-theorem estimate.
inline TensorD per_sample_hessian_diag(const JacobianPair& j, double delta) {
  check(delta > 0, "per_sample_hessian_diag: delta must be positive");
  check(j.j_plus.same_shape(j.j_minus), "per_sample_hessian_diag: shape mismatch");
  TensorD out = TensorD::zeros(j.j_plus.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.at(i) = (j.j_plus.at(i) - j.j_minus.at(i)) / (2.0 * delta);
  return out;
}

/// Arithmetic mean over per-sample Hessian diagonals, in sample order.
inline HessianDiagonal average_hessian(const std::vector<TensorD>& per_sample) {
  check(!per_sample.empty(), "average_hessian: empty input");
  TensorD acc = TensorD::zeros(per_sample.front().shape);
  for (const auto& h : per_sample) {
    check(h.same_shape(acc), "average_hessian: shape mismatch");
    for (int64_t i = 0; i < acc.numel(); ++i) acc.at(i) += h.at(i);
  }
  double inv = 1.0 / static_cast<double>(per_sample.size());
  HessianDiagonal out;
  out.sample_count = static_cast<int64_t>(per_sample.size());
  out.values = Tensor::zeros(acc.shape);
  for (int64_t i = 0; i < acc.numel(); ++i)
    out.values.at(i) = static_cast<float>(acc.at(i) * inv);
  return out;
}

/// Negative entries are clamped to 0 before use as loss weights.
inline Tensor clamp_nonneg(const Tensor& h) {
  Tensor out = h;
  for (auto& v : out.data) v = v > 0.0f ? v : 0.0f;
  return out;
}

namespace detail {
/// Sum over token x channel, averaged over the batch; weights are provided
/// per (sample, element) so PH and APH share the exact arithmetic order.
template <typename T, typename WeightFn>
double weighted_recon_loss(const TensorT<T>& o_hat, const TensorT<T>& o,
                           int64_t batch, WeightFn w) {
  check(o_hat.same_shape(o), "recon loss: shape mismatch");
  check(batch > 0 && o.numel() % batch == 0, "recon loss: bad batch size");
  int64_t per = o.numel() / batch;
  double acc = 0;
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t i = 0; i < per; ++i) {
      int64_t f = n * per + i;
      double d = static_cast<double>(o_hat.at(f)) - static_cast<double>(o.at(f));
      acc += w(n, i) * d * d;
    }
  return acc / static_cast<double>(batch);
}
}  // namespace detail

/// Averaged-Hessian loss: squared output error weighted by the averaged
/// Hessian diagonal (clamped at zero), summed per sample, batch-averaged.
template <typename T>
double aph_loss(const TensorT<T>& o_hat, const TensorT<T>& o, const HessianDiagonal& h) {
  int64_t per = h.values.numel();
  check(o.numel() % per == 0, "aph_loss: Hessian shape mismatch");
  Tensor w = clamp_nonneg(h.values);
  return detail::weighted_recon_loss(o_hat, o, o.numel() / per,
                                     [&](int64_t, int64_t i) {
                                       return static_cast<double>(w.at(i));
                                     });
}

/// Per-sample-Hessian loss; per_sample_h is [N, tokens, embed] aligned with
/// the sample batch.
template <typename T>
double ph_loss(const TensorT<T>& o_hat, const TensorT<T>& o, const Tensor& per_sample_h) {
  check(per_sample_h.numel() == o.numel(), "ph_loss: per-sample Hessian mismatch");
  int64_t batch = o.dim(0);
  int64_t per = o.numel() / batch;
  Tensor w = clamp_nonneg(per_sample_h);
  return detail::weighted_recon_loss(o_hat, o, batch,
                                     [&](int64_t n, int64_t i) {
                                       return static_cast<double>(w.at(n * per + i));
                                     });
}

/// Squared-gradient (Fisher approximation) loss; grad_o is dL/dO per sample.
template <typename T>
double bh_loss(const TensorT<T>& o_hat, const TensorT<T>& o, const Tensor& grad_o) {
  check(grad_o.numel() == o.numel(), "bh_loss: gradient batch mismatch");
  int64_t batch = o.dim(0);
  int64_t per = o.numel() / batch;
  return detail::weighted_recon_loss(o_hat, o, batch, [&](int64_t n, int64_t i) {
    double g = static_cast<double>(grad_o.at(n * per + i));
    return g * g;
  });
}

/// Sum-squared error per sample, batch-averaged (the same reduction
/// convention as the Hessian losses).
template <typename T>
double mse_loss(const TensorT<T>& o_hat, const TensorT<T>& o) {
  int64_t batch = o.rank() >= 1 ? o.dim(0) : 1;
  return detail::weighted_recon_loss(o_hat, o, batch, [](int64_t, int64_t) { return 1.0; });
}

/// Coordinate-wise second-difference probe
/// H_ii ~ [L(O+d e_i) - 2 L(O) + L(O-d e_i)] / d^2 on selected flat
/// coordinates. Diagnostic companion to the simultaneous-perturbation
/// estimate; exact-diagonal reference when loss cross-terms vanish.
inline std::vector<double> coordinate_hessian_probe(
    const std::function<double(const TensorD&)>& loss, const TensorD& o,
    double delta, const std::vector<int64_t>& coords) {
  double l0 = loss(o);
  std::vector<double> out;
  out.reserve(coords.size());
  for (int64_t c : coords) {
    TensorD p = o, m = o;
    p.at(c) += delta;
    m.at(c) -= delta;
    out.push_back((loss(p) - 2.0 * l0 + loss(m)) / (delta * delta));
  }
  return out;
}

}  // namespace aphq

#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "aphq/optim.hpp"
#include "aphq/tape.hpp"
#include "aphq/tensor.hpp"
#include "aphq/vit.hpp"

namespace aphq {

struct MlpReconConfig {
  double alpha = 2.0;           // clamp-loss weight
  double clamp_quantile = 0.99; // of strictly positive hidden activations
  double lr = 1e-3;
  int iters = 500;
  int batch_size = 32;
  uint64_t seed = 1;
  // With per_batch_threshold the clamp level tracks the current student
  // batch; otherwise it is frozen from the teacher's hidden activations.
  bool per_batch_threshold = true;

  void validate() const {
    check(alpha >= 0, "MlpReconConfig: alpha must be >= 0");
    check(clamp_quantile > 0 && clamp_quantile <= 1, "MlpReconConfig: bad quantile");
    check(lr > 0 && iters >= 0 && batch_size > 0, "MlpReconConfig: bad training params");
  }
};

struct ActivationRange {
  double lo = 0, hi = 0;
  double span() const { return hi - lo; }
};

struct MlpReconResult {
  int block_index = -1;
  double initial_loss = 0;  // direct loss before training (ReLU, old weights)
  double final_loss = 0;    // direct loss after training
  double clamp_threshold = 0;
  bool clamp_active = false;  // false when no positive activations existed
  ActivationRange pre_range;   // hidden post-activation range, original block
  ActivationRange post_range;  // hidden post-activation range after retrain
  int iters_run = 0;
};

/// Quantile of the strictly positive entries; {0, false} when none exist.
inline std::pair<double, bool> positive_quantile(const Tensor& x, double q) {
  std::vector<double> pos;
  pos.reserve(x.data.size());
  for (float v : x.data)
    if (v > 0.0f) pos.push_back(static_cast<double>(v));
  if (pos.empty()) return {0.0, false};
  return {quantile(std::move(pos), q), true};
}

/// Matching-term of the distillation objective: per-sample sum of squared
/// output error, averaged over the batch.
inline double mlp_direct_loss(const Tensor& o_hat, const Tensor& o) {
  check(o_hat.same_shape(o), "mlp_direct_loss: shape mismatch");
  int64_t batch = o.dim(0);
  double acc = 0;
  for (int64_t i = 0; i < o.numel(); ++i) {
    double d = static_cast<double>(o_hat.at(i)) - static_cast<double>(o.at(i));
    acc += d * d;
  }
  return acc / static_cast<double>(batch);
}

/// Range-term: per-sample sum of squared excess of the hidden activation
/// above the clamp threshold, averaged over the batch.
inline double mlp_clamp_loss(const Tensor& hidden, double threshold) {
  int64_t batch = hidden.dim(0);
  double acc = 0;
  for (float v : hidden.data) {
    double ex = static_cast<double>(v) - threshold;
    if (ex > 0) acc += ex * ex;
  }
  return acc / static_cast<double>(batch);
}

namespace detail {
/// MLP branch forward given explicit FC vars; returns (hidden, out).
template <typename T>
std::pair<Var, Var> mlp_branch(Tape<T>& tp, Var a, Var w1, Var b1, Var w2, Var b2,
                               Activation act) {
  Var pre = add_bcast(tp, matmul(tp, a, w1), b1);
  Var hidden = act == Activation::kGelu ? gelu(tp, pre) : relu(tp, pre);
  Var out = add_bcast(tp, matmul(tp, hidden, w2), b2);
  return {hidden, out};
}

inline ActivationRange range_of(const Tensor& x) {
  ActivationRange r;
  r.lo = r.hi = x.numel() ? static_cast<double>(x.at(0)) : 0.0;
  for (float v : x.data) {
    r.lo = std::min(r.lo, static_cast<double>(v));
    r.hi = std::max(r.hi, static_cast<double>(v));
  }
  return r;
}
}  // namespace detail

/// Replaces the block's activation with ReLU and retrains FC1/FC2 (weights
/// and biases only) to reproduce the original MLP branch output on the
/// captured inputs, with a clamp penalty discouraging large hidden
/// activations. `mlp_inputs` holds the normalized MLP inputs [N, tokens,
/// embed] under the current pipeline state; the teacher targets are computed
/// from the block's existing (pre-swap) weights and activation.
inline MlpReconResult reconstruct_mlp(VitModel<float>& m, int block_index,
                                      const Tensor& mlp_inputs,
                                      const MlpReconConfig& cfg) {
  cfg.validate();
  check(block_index >= 0 && block_index < m.cfg.depth, "reconstruct_mlp: bad block index");
  BlockParams<float>& blk = m.blocks[static_cast<size_t>(block_index)];
  check(blk.act == Activation::kGelu,
        "reconstruct_mlp: block activation has already been replaced");
  int64_t N = mlp_inputs.dim(0);
  check(mlp_inputs.rank() == 3 && mlp_inputs.dim(1) == m.cfg.tokens() &&
            mlp_inputs.dim(2) == m.cfg.embed_dim,
        "reconstruct_mlp: input shape mismatch");

  MlpReconResult res;
  res.block_index = block_index;

  // Teacher pass: original weights + original activation.
  Tensor teacher_out, teacher_hidden;
  {
    Tape<float> tp;
    Var a = tp.constant(mlp_inputs);
    auto [hid, out] = detail::mlp_branch(tp, a, tp.constant(blk.w1), tp.constant(blk.b1),
                                         tp.constant(blk.w2), tp.constant(blk.b2), blk.act);
    teacher_hidden = tp.val(hid);
    teacher_out = tp.val(out);
  }
  res.pre_range = detail::range_of(teacher_hidden);
  auto [teacher_thr, teacher_has_pos] = positive_quantile(teacher_hidden, cfg.clamp_quantile);

  Tensor w1 = blk.w1, b1 = blk.b1, w2 = blk.w2, b2 = blk.b2;
  Adam opt;
  opt.add_param(&w1, cfg.lr);
  opt.add_param(&b1, cfg.lr);
  opt.add_param(&w2, cfg.lr);
  opt.add_param(&b2, cfg.lr);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int64_t> pick(0, N - 1);
  int64_t te = static_cast<int64_t>(m.cfg.tokens()) * m.cfg.embed_dim;

  for (int it = 0; it < cfg.iters; ++it) {
    int64_t B = std::min<int64_t>(cfg.batch_size, N);
    Tensor xb = Tensor::zeros({B, m.cfg.tokens(), m.cfg.embed_dim});
    Tensor yb = Tensor::zeros({B, m.cfg.tokens(), m.cfg.embed_dim});
    for (int64_t i = 0; i < B; ++i) {
      int64_t s = pick(rng);
      std::copy_n(mlp_inputs.data.begin() + s * te, te, xb.data.begin() + i * te);
      std::copy_n(teacher_out.data.begin() + s * te, te, yb.data.begin() + i * te);
    }

    Tape<float> tp;
    Var a = tp.constant(std::move(xb));
    Var vw1 = tp.leaf(w1.with_grad()), vb1 = tp.leaf(b1.with_grad());
    Var vw2 = tp.leaf(w2.with_grad()), vb2 = tp.leaf(b2.with_grad());
    auto [hidden, out] = detail::mlp_branch(tp, a, vw1, vb1, vw2, vb2, Activation::kRelu);

    Var ones = tp.constant(Tensor::scalar(1.0f));
    Var direct = scalar_mul(tp, weighted_sse(tp, out, tp.constant(std::move(yb)), ones),
                            1.0 / static_cast<double>(B));
    Var loss = direct;
    double thr = teacher_thr;
    bool has_thr = teacher_has_pos;
    if (cfg.per_batch_threshold) {
      auto [bt, bh] = positive_quantile(tp.val(hidden), cfg.clamp_quantile);
      thr = bt;
      has_thr = bh;
    }
    if (cfg.alpha > 0 && has_thr) {
      Var excess = sub(tp, hidden, clamp_max(tp, hidden, thr));
      Var zero = tp.constant(Tensor::zeros(tp.val(hidden).shape));
      Var clamp_l = scalar_mul(tp, weighted_sse(tp, excess, zero, ones),
                               cfg.alpha / static_cast<double>(B));
      loss = add(tp, loss, clamp_l);
    }
    res.clamp_threshold = thr;
    res.clamp_active = has_thr;

    double lv = static_cast<double>(tp.val(loss).at(0));
    check(std::isfinite(lv), "reconstruct_mlp: non-finite training loss");
    if (it == 0) res.initial_loss = static_cast<double>(tp.val(direct).at(0));
    tp.backward(loss);
    opt.step({tp.grad(vw1), tp.grad(vb1), tp.grad(vw2), tp.grad(vb2)});
    ++res.iters_run;
  }

  blk.w1 = w1;
  blk.b1 = b1;
  blk.w2 = w2;
  blk.b2 = b2;
  blk.act = Activation::kRelu;

  // Student pass over the full capture set for range + final loss.
  {
    Tape<float> tp;
    Var a = tp.constant(mlp_inputs);
    auto [hid, out] = detail::mlp_branch(tp, a, tp.constant(blk.w1), tp.constant(blk.b1),
                                         tp.constant(blk.w2), tp.constant(blk.b2),
                                         Activation::kRelu);
    res.post_range = detail::range_of(tp.val(hid));
    res.final_loss = mlp_direct_loss(tp.val(out), teacher_out);
  }
  return res;
}

}  // namespace aphq

#pragma once

#include <array>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "aphq/hessian.hpp"
#include "aphq/mlp_recon.hpp"
#include "aphq/optim.hpp"
#include "aphq/quant.hpp"
#include "aphq/tape.hpp"
#include "aphq/tensor.hpp"
#include "aphq/vit.hpp"

namespace aphq {

enum class ReconLossKind { kMse, kBh, kPh, kAph };

inline const char* to_string(ReconLossKind k) {
  switch (k) {
    case ReconLossKind::kMse: return "mse";
    case ReconLossKind::kBh: return "bh";
    case ReconLossKind::kPh: return "ph";
    default: return "aph";
  }
}

inline ReconLossKind recon_loss_from_string(const std::string& s) {
  if (s == "mse") return ReconLossKind::kMse;
  if (s == "bh") return ReconLossKind::kBh;
  if (s == "ph") return ReconLossKind::kPh;
  if (s == "aph") return ReconLossKind::kAph;
  throw std::invalid_argument("unknown reconstruction loss: " + s);
}

struct ReconstructionConfig {
  int weight_bits = 8;
  int act_bits = 8;
  int batch_size = 32;
  double lr_weight = 1e-3;  // learnable-rounding variables
  double lr_act = 4e-5;     // activation log-scales
  int iters = 2000;
  ReconLossKind loss_kind = ReconLossKind::kAph;
  int calib_samples = 1024;
  double act_clip_quantile = 0.999;
  bool enable_mlp_recon = true;
  bool enable_qdrop = true;
  double drop_probability = 0.5;
  PerturbationConfig perturb;
  MlpReconConfig mlp;
  uint64_t seed = 1;

  void validate() const {
    check(weight_bits >= 2 && weight_bits <= 8, "ReconstructionConfig: weight_bits out of [2,8]");
    check(act_bits >= 2 && act_bits <= 8, "ReconstructionConfig: act_bits out of [2,8]");
    check(batch_size > 0 && iters >= 0 && calib_samples > 0,
          "ReconstructionConfig: bad training sizes");
    check(lr_weight > 0 && lr_act > 0, "ReconstructionConfig: learning rates must be positive");
    check(act_clip_quantile > 0.5 && act_clip_quantile <= 1.0,
          "ReconstructionConfig: act_clip_quantile out of (0.5, 1]");
    check(drop_probability >= 0 && drop_probability <= 1,
          "ReconstructionConfig: drop_probability out of [0,1]");
    perturb.validate();
    mlp.validate();
  }
};

/// Frozen quantization state of one transformer block.
struct BlockQuant {
  std::array<QuantParams, kNumWeightSlots> weight_qp;
  std::array<Tensor, kNumWeightSlots> hardened;  // de-quantized integer weights
  std::array<QuantParams, kNumActPoints> act_qp;
  bool diverged = false;
};

/// A fully quantized model: the (possibly activation-swapped and retrained)
/// float parameters plus frozen quantizers for every block, the patch
/// embedding, and the classification head.
struct QuantizedModel {
  VitModel<float> model;
  std::vector<BlockQuant> blocks;
  QuantParams patch_qp, head_qp;
  Tensor patch_w_q, head_w_q;
  ReconstructionConfig cfg;
};

struct BlockReconResult {
  int block_index = -1;
  double initial_loss = 0;
  double final_loss = 0;
  bool diverged = false;
  int iters_run = 0;
  std::vector<double> loss_curve;  // reconstruction term per iteration
};

struct PipelineReport {
  std::vector<MlpReconResult> mlp;
  std::vector<BlockReconResult> recon;
  double fp_calib_accuracy = -1;
};

// ---------------------------------------------------------------------------
// Hessian estimation over a calibration set
// ---------------------------------------------------------------------------

/// Per-sample second-derivative diagonal estimates at the pristine
/// full-precision block outputs. In kUniform mode a single +/- delta*1 pair
/// is used; in kSignProbe mode `probes` random sign directions r are
/// averaged, each contributing r ⊙ (J+ - J-) / (2 delta).
inline std::vector<TensorD> per_sample_hessians(const VitModel<double>& md,
                                                int block_index,
                                                const Tensor& outputs,
                                                const PerturbationConfig& cfg,
                                                int batch, uint64_t seed) {
  cfg.validate();
  int64_t N = outputs.dim(0);
  int64_t t = outputs.dim(1), e = outputs.dim(2);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<TensorD> per_sample;
  per_sample.reserve(static_cast<size_t>(N));
  int probes = cfg.direction == PerturbDirection::kUniform ? 1 : cfg.probes;
  for (int64_t off = 0; off < N; off += batch) {
    int64_t B = std::min<int64_t>(batch, N - off);
    TensorD ob = TensorD::zeros({B, t, e});
    std::copy_n(outputs.data.begin() + off * t * e, B * t * e, ob.data.begin());
    TensorD acc = TensorD::zeros({B, t, e});
    for (int p = 0; p < probes; ++p) {
      TensorD r = TensorD::full({B, t, e}, 1.0);
      if (cfg.direction == PerturbDirection::kSignProbe)
        for (auto& v : r.data) v = coin(rng) ? 1.0 : -1.0;
      auto [op, om] = perturb_along(ob, cfg.delta, r);
      JacobianPair jp{tail_jacobian(md, block_index, ob, op, cfg, true),
                      tail_jacobian(md, block_index, ob, om, cfg, true)};
      TensorD h = per_sample_hessian_diag(jp, cfg.delta);
      for (int64_t i = 0; i < acc.numel(); ++i) acc.at(i) += h.at(i) * r.at(i);
    }
    for (int64_t i = 0; i < acc.numel(); ++i) acc.at(i) /= probes;
    for (int64_t n = 0; n < B; ++n) {
      TensorD hn = TensorD::zeros({t, e});
      std::copy_n(acc.data.begin() + n * t * e, t * e, hn.data.begin());
      per_sample.push_back(std::move(hn));
    }
  }
  return per_sample;
}

/// Averaged Hessian diagonal for one block over the calibration set.
inline HessianDiagonal compute_block_aph(const VitModel<double>& md, int block_index,
                                         const Tensor& outputs,
                                         const PerturbationConfig& cfg, int batch,
                                         uint64_t seed) {
  return average_hessian(per_sample_hessians(md, block_index, outputs, cfg, batch, seed));
}

/// Per-sample gradients of a cross-entropy surrogate at the block outputs,
/// taken against the model's own tail predictions (the distillation loss
/// itself has zero gradient at the expansion point). Used for the
/// squared-gradient loss weights.
inline Tensor bh_sample_gradients(const VitModel<double>& md, int block_index,
                                  const Tensor& outputs, int batch) {
  int64_t N = outputs.dim(0), t = outputs.dim(1), e = outputs.dim(2);
  Tensor grads = Tensor::zeros({N, t, e});
  for (int64_t off = 0; off < N; off += batch) {
    int64_t B = std::min<int64_t>(batch, N - off);
    TensorD ob = TensorD::zeros({B, t, e});
    std::copy_n(outputs.data.begin() + off * t * e, B * t * e, ob.data.begin());
    ob.requires_grad = true;
    Tape<double> tp;
    Var o = tp.leaf(std::move(ob));
    Var logits = run_tail(tp, md, block_index + 1, o);
    // argmax labels from the tail's own predictions
    const TensorD& lv = tp.val(logits);
    int64_t C = lv.dim(-1);
    std::vector<int> labels(static_cast<size_t>(B));
    for (int64_t n = 0; n < B; ++n) {
      int best = 0;
      for (int64_t j = 1; j < C; ++j)
        if (lv.at(n * C + j) > lv.at(n * C + best)) best = static_cast<int>(j);
      labels[static_cast<size_t>(n)] = best;
    }
    Var loss = scalar_mul(tp, softmax_cross_entropy(tp, logits, std::move(labels)),
                          static_cast<double>(B));
    tp.backward(loss);
    const TensorD* g = tp.grad(o);
    check(g != nullptr, "bh_sample_gradients: no gradient");
    for (int64_t i = 0; i < B * t * e; ++i)
      grads.at(off * t * e + i) = static_cast<float>(g->at(i));
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Block reconstruction
// ---------------------------------------------------------------------------

namespace detail {
/// Runs one block with frozen quantizers (hardened weights + fixed
/// activation scales), no gradients.
inline Tensor run_block_quantized(const VitModel<float>& m, const BlockQuant& bq,
                                  int block_index, const Tensor& x) {
  Tape<float> tp;
  BlockRunCtx<float> ctx;
  ctx.w_tensors = &bq.hardened;
  ctx.act_qp = &bq.act_qp;
  return tp.val(run_block(tp, m, block_index, tp.constant(x), ctx));
}

inline Tensor slice_rows(const Tensor& x, const std::vector<int64_t>& rows) {
  int64_t per = x.numel() / x.dim(0);
  Shape s = x.shape;
  s[0] = static_cast<int64_t>(rows.size());
  Tensor out = Tensor::zeros(s);
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data.begin() + rows[i] * per, per,
                out.data.begin() + static_cast<int64_t>(i) * per);
  return out;
}
}  // namespace detail

/// Reconstructs one block: calibrates weight and activation quantizers, then
/// jointly trains the rounding variables and activation log-scales against
/// the weighted output-reconstruction objective.
///
/// `loss_weights` is empty (plain SSE), [tokens, embed] (shared weights), or
/// [N, tokens, embed] (per-sample weights aligned with `inputs`).
inline BlockReconResult reconstruct_block(const VitModel<float>& m, int block_index,
                                          const Tensor& inputs, const Tensor& targets,
                                          const Tensor& loss_weights,
                                          const ReconstructionConfig& cfg,
                                          BlockQuant& out, std::mt19937_64& rng) {
  cfg.validate();
  check(inputs.same_shape(targets), "reconstruct_block: input/target mismatch");
  const BlockParams<float>& blk = m.blocks[static_cast<size_t>(block_index)];
  int64_t N = inputs.dim(0), t = inputs.dim(1), e = inputs.dim(2);
  int64_t te = t * e;
  bool per_sample_w = loss_weights.numel() == inputs.numel() && N > 1;
  if (loss_weights.numel())
    check(per_sample_w || loss_weights.numel() == te,
          "reconstruct_block: loss weight shape mismatch");

  BlockReconResult res;
  res.block_index = block_index;

  // Weight quantizers: per-channel, exact min/max range.
  const std::array<const Tensor*, kNumWeightSlots> ws = {&blk.wq, &blk.wk, &blk.wv,
                                                         &blk.wo, &blk.w1, &blk.w2};
  std::array<AdaRoundState, kNumWeightSlots> ada;
  for (int s = 0; s < kNumWeightSlots; ++s) {
    out.weight_qp[static_cast<size_t>(s)] = calibrate_quant_params(
        *ws[static_cast<size_t>(s)], cfg.weight_bits, Granularity::kPerChannel, 1.0, true);
    ada[static_cast<size_t>(s)] =
        init_adaround(*ws[static_cast<size_t>(s)], out.weight_qp[static_cast<size_t>(s)]);
  }

  // Activation quantizers: per-tensor, clipped range; the attention map is
  // unsigned, everything else signed.
  {
    std::array<std::vector<float>, kNumActPoints> captured;
    for (int64_t off = 0; off < N; off += cfg.batch_size) {
      int64_t B = std::min<int64_t>(cfg.batch_size, N - off);
      Tensor xb = Tensor::zeros({B, t, e});
      std::copy_n(inputs.data.begin() + off * te, B * te, xb.data.begin());
      Tape<float> tp;
      BlockRunCtx<float> ctx;
      ctx.act_capture = &captured;
      run_block(tp, m, block_index, tp.constant(std::move(xb)), ctx);
    }
    for (int p = 0; p < kNumActPoints; ++p) {
      int64_t n = static_cast<int64_t>(captured[static_cast<size_t>(p)].size());
      Tensor flat({n}, std::move(captured[static_cast<size_t>(p)]));
      out.act_qp[static_cast<size_t>(p)] =
          calibrate_quant_params(flat, cfg.act_bits, Granularity::kPerTensor,
                                 cfg.act_clip_quantile, p != kActProbs);
    }
  }

  // Trainable state: rounding variables + activation log-scales.
  std::array<Tensor, kNumActPoints> log_scales;
  Adam opt;
  for (int s = 0; s < kNumWeightSlots; ++s)
    opt.add_param(&ada[static_cast<size_t>(s)].v, cfg.lr_weight);
  for (int p = 0; p < kNumActPoints; ++p) {
    log_scales[static_cast<size_t>(p)] =
        Tensor::scalar(static_cast<float>(std::log(out.act_qp[static_cast<size_t>(p)].scale[0])));
    opt.add_param(&log_scales[static_cast<size_t>(p)], cfg.lr_act);
  }

  std::uniform_int_distribution<int64_t> pick(0, N - 1);
  int warmup_end = static_cast<int>(ada[0].warmup * cfg.iters);
  for (int it = 0; it < cfg.iters; ++it) {
    int64_t B = std::min<int64_t>(cfg.batch_size, N);
    std::vector<int64_t> rows(static_cast<size_t>(B));
    for (auto& r : rows) r = pick(rng);
    Tensor xb = detail::slice_rows(inputs, rows);
    Tensor yb = detail::slice_rows(targets, rows);

    Tape<float> tp;
    BlockRunCtx<float> ctx;
    std::array<Var, kNumWeightSlots> vvars;
    for (int s = 0; s < kNumWeightSlots; ++s) {
      vvars[static_cast<size_t>(s)] = tp.leaf(ada[static_cast<size_t>(s)].v.with_grad());
      ctx.w_vars[static_cast<size_t>(s)] = adaround_weight_op(
          tp, vvars[static_cast<size_t>(s)], *ws[static_cast<size_t>(s)],
          out.weight_qp[static_cast<size_t>(s)], ada[static_cast<size_t>(s)]);
    }
    std::array<Var, kNumActPoints> svars;
    for (int p = 0; p < kNumActPoints; ++p) {
      svars[static_cast<size_t>(p)] = tp.leaf(log_scales[static_cast<size_t>(p)].with_grad());
      ctx.act_scale_vars[static_cast<size_t>(p)] = svars[static_cast<size_t>(p)];
    }
    ctx.act_qp = &out.act_qp;
    ctx.qdrop_enabled = cfg.enable_qdrop;
    ctx.drop = DropConfig(cfg.drop_probability);
    ctx.rng = &rng;

    Var o = run_block(tp, m, block_index, tp.constant(std::move(xb)), ctx);
    Var wvar;
    if (!loss_weights.numel()) {
      wvar = tp.constant(Tensor::scalar(1.0f));
    } else if (per_sample_w) {
      wvar = tp.constant(detail::slice_rows(loss_weights, rows));
    } else {
      wvar = tp.constant(loss_weights);
    }
    Var recon = scalar_mul(tp, weighted_sse(tp, o, tp.constant(std::move(yb)), wvar),
                           1.0 / static_cast<double>(B));
    Var loss = recon;
    if (it >= warmup_end) {
      for (int s = 0; s < kNumWeightSlots; ++s) {
        const AdaRoundState& st = ada[static_cast<size_t>(s)];
        loss = add(tp, loss,
                   adaround_reg_op(tp, vvars[static_cast<size_t>(s)], st,
                                   st.beta_at(it, cfg.iters)));
      }
    }
    double rv = static_cast<double>(tp.val(recon).at(0));
    check(std::isfinite(rv), "reconstruct_block: non-finite loss");
    if (it == 0) res.initial_loss = rv;
    res.final_loss = rv;
    res.loss_curve.push_back(rv);
    if (it > 0 && rv > 10.0 * std::max(res.initial_loss, 1e-12)) {
      res.diverged = true;
      break;
    }
    tp.backward(loss);
    std::vector<const TensorD*> grads;
    for (int s = 0; s < kNumWeightSlots; ++s) grads.push_back(tp.grad(vvars[static_cast<size_t>(s)]));
    for (int p = 0; p < kNumActPoints; ++p) grads.push_back(tp.grad(svars[static_cast<size_t>(p)]));
    opt.step(grads);
    ++res.iters_run;
  }

  // Freeze: hard rounding for weights, learned scales for activations.
  for (int s = 0; s < kNumWeightSlots; ++s)
    out.hardened[static_cast<size_t>(s)] = adaround_weight(
        *ws[static_cast<size_t>(s)], out.weight_qp[static_cast<size_t>(s)],
        ada[static_cast<size_t>(s)], true);
  for (int p = 0; p < kNumActPoints; ++p) {
    double s = std::exp(static_cast<double>(log_scales[static_cast<size_t>(p)].at(0)));
    out.act_qp[static_cast<size_t>(p)].scale[0] = std::max(s, kScaleFloor);
  }
  out.diverged = res.diverged;
  return res;
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

namespace detail {
inline Tensor embed_all(const VitModel<float>& m, const Tensor& images,
                        const Tensor* patch_w_override, int batch) {
  int64_t N = images.dim(0);
  int64_t chw = images.numel() / N;
  int64_t t = m.cfg.tokens(), e = m.cfg.embed_dim;
  Tensor out = Tensor::zeros({N, t, e});
  for (int64_t off = 0; off < N; off += batch) {
    int64_t B = std::min<int64_t>(static_cast<int64_t>(batch), N - off);
    Tensor xb = Tensor::zeros({B, chw});
    std::copy_n(images.data.begin() + off * chw, B * chw, xb.data.begin());
    Tape<float> tp;
    Var v = embed_images(tp, m, xb, patch_w_override);
    std::copy(tp.val(v).data.begin(), tp.val(v).data.end(),
              out.data.begin() + off * t * e);
  }
  return out;
}

inline Tensor capture_mlp_inputs(const VitModel<float>& m, int block_index,
                                 const Tensor& block_inputs, int batch) {
  int64_t N = block_inputs.dim(0), t = block_inputs.dim(1), e = block_inputs.dim(2);
  Tensor out = Tensor::zeros({N, t, e});
  for (int64_t off = 0; off < N; off += batch) {
    int64_t B = std::min<int64_t>(static_cast<int64_t>(batch), N - off);
    Tensor xb = Tensor::zeros({B, t, e});
    std::copy_n(block_inputs.data.begin() + off * t * e, B * t * e, xb.data.begin());
    Tape<float> tp;
    BlockRunCtx<float> ctx;
    ctx.capture = true;
    run_block(tp, m, block_index, tp.constant(std::move(xb)), ctx);
    const Tensor& a = tp.val(ctx.mlp_in);
    std::copy(a.data.begin(), a.data.end(), out.data.begin() + off * t * e);
  }
  return out;
}
}  // namespace detail

/// Per-block loss weights for the configured reconstruction objective.
/// Empty tensor for plain SSE; [t,e] for the averaged-Hessian loss;
/// [N,t,e] for per-sample Hessian or squared-gradient weights.
inline Tensor block_loss_weights(const VitModel<double>& md, int block_index,
                                 const Tensor& fp_outputs,
                                 const ReconstructionConfig& cfg, uint64_t seed) {
  switch (cfg.loss_kind) {
    case ReconLossKind::kMse:
      return Tensor();
    case ReconLossKind::kBh: {
      Tensor g = bh_sample_gradients(md, block_index, fp_outputs, cfg.batch_size);
      for (auto& v : g.data) v *= v;
      return g;
    }
    case ReconLossKind::kPh: {
      auto hs = per_sample_hessians(md, block_index, fp_outputs, cfg.perturb,
                                    cfg.batch_size, seed);
      int64_t N = static_cast<int64_t>(hs.size());
      int64_t per = hs.front().numel();
      Tensor w = Tensor::zeros({N, fp_outputs.dim(1), fp_outputs.dim(2)});
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < per; ++i)
          w.at(n * per + i) = static_cast<float>(hs[static_cast<size_t>(n)].at(i));
      return clamp_nonneg(w);
    }
    default: {
      HessianDiagonal h = compute_block_aph(md, block_index, fp_outputs, cfg.perturb,
                                            cfg.batch_size, seed);
      return clamp_nonneg(h.values);
    }
  }
}

/// End-to-end post-training quantization: per block in ascending order,
/// estimate the loss weights at the pristine full-precision outputs, apply
/// activation replacement + MLP retraining, then reconstruct the block's
/// quantizers. Block inputs are propagated through the already-quantized
/// prefix; targets stay pinned to the pristine full-precision outputs.
inline QuantizedModel quantize_model(const VitModel<float>& fp, const Tensor& calib_images,
                                     const ReconstructionConfig& cfg,
                                     PipelineReport* report = nullptr) {
  cfg.validate();
  int64_t N = std::min<int64_t>(calib_images.dim(0), cfg.calib_samples);
  int64_t chw = calib_images.numel() / calib_images.dim(0);
  Tensor calib = Tensor::zeros({N, chw});
  std::copy_n(calib_images.data.begin(), N * chw, calib.data.begin());

  // Pristine full-precision captures (targets + Hessian expansion points).
  std::vector<Tensor> batches;
  for (int64_t off = 0; off < N; off += cfg.batch_size) {
    int64_t B = std::min<int64_t>(cfg.batch_size, N - off);
    Tensor xb = Tensor::zeros({B, chw});
    std::copy_n(calib.data.begin() + off * chw, B * chw, xb.data.begin());
    batches.push_back(std::move(xb));
  }
  std::vector<BlockRecord> records = capture_block_records(fp, batches);
  VitModel<double> md = fp.cast<double>();

  QuantizedModel qm;
  qm.model = fp;
  qm.cfg = cfg;
  qm.blocks.resize(static_cast<size_t>(fp.cfg.depth));

  // Patch embedding: weight-only calibration quantization, applied before
  // propagating calibration inputs.
  qm.patch_qp = calibrate_quant_params(fp.patch_w, cfg.weight_bits,
                                       Granularity::kPerChannel, 1.0, true);
  qm.patch_w_q = fake_quantize(fp.patch_w, qm.patch_qp);

  Tensor x = detail::embed_all(qm.model, calib, &qm.patch_w_q, cfg.batch_size);

  std::mt19937_64 rng_train(cfg.seed * 0x9e3779b97f4a7c15ULL + 1);
  for (int b = 0; b < fp.cfg.depth; ++b) {
    const Tensor& targets = records[static_cast<size_t>(b)].outputs;
    Tensor weights =
        block_loss_weights(md, b, targets, cfg, cfg.seed + 101 * static_cast<uint64_t>(b));

    if (cfg.enable_mlp_recon) {
      Tensor mlp_in = detail::capture_mlp_inputs(qm.model, b, x, cfg.batch_size);
      MlpReconConfig mc = cfg.mlp;
      mc.seed = cfg.seed + 977 * static_cast<uint64_t>(b);
      MlpReconResult mr = reconstruct_mlp(qm.model, b, mlp_in, mc);
      if (report) report->mlp.push_back(mr);
    }

    BlockReconResult rr = reconstruct_block(qm.model, b, x, targets, weights, cfg,
                                            qm.blocks[static_cast<size_t>(b)], rng_train);
    if (report) report->recon.push_back(rr);

    x = detail::run_block_quantized(qm.model, qm.blocks[static_cast<size_t>(b)], b, x);
  }

  qm.head_qp = calibrate_quant_params(qm.model.head_w, cfg.weight_bits,
                                      Granularity::kPerChannel, 1.0, true);
  qm.head_w_q = fake_quantize(qm.model.head_w, qm.head_qp);
  return qm;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline Tensor quantized_logits(const QuantizedModel& qm, const Tensor& images) {
  Tape<float> tp;
  Var x = embed_images(tp, qm.model, images, &qm.patch_w_q);
  for (int b = 0; b < qm.model.cfg.depth; ++b) {
    BlockRunCtx<float> ctx;
    ctx.w_tensors = &qm.blocks[static_cast<size_t>(b)].hardened;
    ctx.act_qp = &qm.blocks[static_cast<size_t>(b)].act_qp;
    x = run_block(tp, qm.model, b, x, ctx);
  }
  Var lnf = layernorm(tp, x, tp.constant(qm.model.lnf_g), tp.constant(qm.model.lnf_b));
  Var cls = select_token(tp, lnf, 0);
  Var logits = add_bcast(tp, matmul(tp, cls, tp.constant(qm.head_w_q)),
                         tp.constant(qm.model.head_b));
  return tp.val(logits);
}

/// Top-1 accuracy of a logits function over [N, C*H*W] images.
inline double top1_accuracy(const std::function<Tensor(const Tensor&)>& logits_fn,
                            const Tensor& images, const std::vector<int>& labels,
                            int batch = 64) {
  int64_t N = images.dim(0);
  check(static_cast<int64_t>(labels.size()) == N, "top1_accuracy: label count mismatch");
  int64_t chw = images.numel() / N;
  int64_t correct = 0;
  for (int64_t off = 0; off < N; off += batch) {
    int64_t B = std::min<int64_t>(static_cast<int64_t>(batch), N - off);
    Tensor xb = Tensor::zeros({B, chw});
    std::copy_n(images.data.begin() + off * chw, B * chw, xb.data.begin());
    Tensor lg = logits_fn(xb);
    int64_t C = lg.dim(-1);
    for (int64_t n = 0; n < B; ++n) {
      int best = 0;
      for (int64_t j = 1; j < C; ++j)
        if (lg.at(n * C + j) > lg.at(n * C + best)) best = static_cast<int>(j);
      if (best == labels[static_cast<size_t>(off + n)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(N);
}

inline double evaluate_fp(const VitModel<float>& m, const Tensor& images,
                          const std::vector<int>& labels, int batch = 64) {
  return top1_accuracy([&](const Tensor& xb) { return forward_logits(m, xb); }, images,
                       labels, batch);
}

inline double evaluate_quantized(const QuantizedModel& qm, const Tensor& images,
                                 const std::vector<int>& labels, int batch = 64) {
  return top1_accuracy([&](const Tensor& xb) { return quantized_logits(qm, xb); },
                       images, labels, batch);
}

// ---------------------------------------------------------------------------
// Gradient-variance probe
// ---------------------------------------------------------------------------

/// Compares the per-sample-Hessian and averaged-Hessian objectives through a
/// single scalar parameter: a learnable multiplier on the FC2 quantization
/// scale. Reports the gradient of each objective on disjoint mini-batches
/// (for variance comparison) and short training loss curves driven by
/// identical batch schedules.
struct VarianceProbe {
  std::vector<double> ph_grad, aph_grad;  // d loss / d theta per mini-batch
  double ph_variance = 0, aph_variance = 0;
  std::vector<double> ph_curve, aph_curve;  // training loss per iteration
};

inline VarianceProbe gradient_variance_probe(const VitModel<float>& m, int block_index,
                                             const Tensor& inputs, const Tensor& targets,
                                             const ReconstructionConfig& cfg,
                                             int num_batches, int curve_iters,
                                             uint64_t seed) {
  cfg.validate();
  check(inputs.same_shape(targets), "gradient_variance_probe: shape mismatch");
  VitModel<double> md = m.cast<double>();
  int64_t N = inputs.dim(0), t = inputs.dim(1), e = inputs.dim(2);
  int64_t te = t * e;

  auto hs = per_sample_hessians(md, block_index, targets, cfg.perturb, cfg.batch_size, seed);
  Tensor per_w = Tensor::zeros({N, t, e});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < te; ++i)
      per_w.at(n * te + i) = static_cast<float>(hs[static_cast<size_t>(n)].at(i));
  per_w = clamp_nonneg(per_w);
  Tensor avg_w = clamp_nonneg(average_hessian(hs).values);

  const BlockParams<float>& blk = m.blocks[static_cast<size_t>(block_index)];
  QuantParams qp = calibrate_quant_params(blk.w2, cfg.weight_bits,
                                          Granularity::kPerChannel, 1.0, true);
  AdaRoundState st = init_adaround(blk.w2, qp);

  // One objective evaluation: returns loss value and d loss / d theta.
  auto eval = [&](const Tensor& xb, const Tensor& yb, const Tensor* wb_per_sample,
                  const Tensor* wb_shared, float theta_val,
                  double* grad_out) -> double {
    int64_t B = xb.dim(0);
    Tape<float> tp;
    Var theta = tp.leaf(Tensor::scalar(theta_val).with_grad());
    Var v = tp.constant(st.v);
    BlockRunCtx<float> ctx;
    ctx.w_vars[kWfc2] = adaround_weight_op(tp, v, blk.w2, qp, st, theta);
    Var o = run_block(tp, m, block_index, tp.constant(xb), ctx);
    Var wvar = wb_per_sample ? tp.constant(*wb_per_sample) : tp.constant(*wb_shared);
    Var loss = scalar_mul(tp, weighted_sse(tp, o, tp.constant(yb), wvar),
                          1.0 / static_cast<double>(B));
    double lv = static_cast<double>(tp.val(loss).at(0));
    if (grad_out) {
      tp.backward(loss);
      const TensorD* g = tp.grad(theta);
      *grad_out = g ? g->at(0) : 0.0;
    }
    return lv;
  };

  VarianceProbe out;
  int64_t B = std::min<int64_t>(cfg.batch_size, N);
  for (int k = 0; k < num_batches; ++k) {
    std::vector<int64_t> rows(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) rows[static_cast<size_t>(i)] = (k * B + i) % N;
    Tensor xb = detail::slice_rows(inputs, rows);
    Tensor yb = detail::slice_rows(targets, rows);
    Tensor wb = detail::slice_rows(per_w, rows);
    double g = 0;
    eval(xb, yb, &wb, nullptr, 1.0f, &g);
    out.ph_grad.push_back(g);
    eval(xb, yb, nullptr, &avg_w, 1.0f, &g);
    out.aph_grad.push_back(g);
  }
  auto variance = [](const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double s = 0;
    for (double x : v) s += (x - mean) * (x - mean);
    return s / static_cast<double>(v.size());
  };
  out.ph_variance = variance(out.ph_grad);
  out.aph_variance = variance(out.aph_grad);

  // Loss curves under identical batch schedules.
  for (int mode = 0; mode < 2; ++mode) {
    std::mt19937_64 rng(seed + 7);
    std::uniform_int_distribution<int64_t> pick(0, N - 1);
    Tensor theta = Tensor::scalar(1.0f);
    Adam opt;
    opt.add_param(&theta, 1e-3);
    std::vector<double>& curve = mode == 0 ? out.ph_curve : out.aph_curve;
    for (int it = 0; it < curve_iters; ++it) {
      std::vector<int64_t> rows(static_cast<size_t>(B));
      for (auto& r : rows) r = pick(rng);
      Tensor xb = detail::slice_rows(inputs, rows);
      Tensor yb = detail::slice_rows(targets, rows);
      Tensor wb;
      if (mode == 0) wb = detail::slice_rows(per_w, rows);
      double g = 0;
      double lv = eval(xb, yb, mode == 0 ? &wb : nullptr,
                       mode == 0 ? nullptr : &avg_w, theta.at(0), &g);
      curve.push_back(lv);
      TensorD gt = TensorD::scalar(g);
      opt.step({&gt});
    }
  }
  return out;
}

}  // namespace aphq

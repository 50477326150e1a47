#pragma once

#include <array>
#include <optional>
#include <random>
#include <vector>

#include "aphq/quant.hpp"
#include "aphq/tape.hpp"
#include "aphq/tensor.hpp"

namespace aphq {

enum class Activation { kGelu, kRelu };

struct ViTConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int embed_dim = 64;
  int depth = 4;
  int heads = 4;
  double mlp_ratio = 4.0;
  int num_classes = 10;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int tokens() const { return num_patches() + 1; }  // class token first
  int patch_dim() const { return channels * patch_size * patch_size; }
  int head_dim() const { return embed_dim / heads; }
  int hidden_dim() const { return static_cast<int>(embed_dim * mlp_ratio); }

  void validate() const {
    check(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
          "ViTConfig: image_size must be divisible by patch_size");
    check(embed_dim > 0 && heads > 0 && embed_dim % heads == 0,
          "ViTConfig: embed_dim must be divisible by heads");
    check(mlp_ratio > 0 && embed_dim * mlp_ratio == std::floor(embed_dim * mlp_ratio),
          "ViTConfig: hidden dim must be a positive integer");
    check(depth > 0 && num_classes > 0 && channels > 0, "ViTConfig: bad sizes");
  }
  bool operator==(const ViTConfig&) const = default;
};

/// One transformer block: pre-LN attention and MLP, both with residuals.
/// Weight matrices are stored [in, out].
template <typename T>
struct BlockParams {
  TensorT<T> ln1_g, ln1_b;
  TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;
  TensorT<T> ln2_g, ln2_b;
  TensorT<T> w1, b1, w2, b2;
  Activation act = Activation::kGelu;
};

template <typename T>
struct VitModel {
  ViTConfig cfg;
  TensorT<T> patch_w, patch_b;  // [patch_dim, embed], [embed]
  TensorT<T> cls_token;         // [embed]
  TensorT<T> pos_emb;           // [tokens, embed]
  std::vector<BlockParams<T>> blocks;
  TensorT<T> lnf_g, lnf_b;
  TensorT<T> head_w, head_b;    // [embed, classes], [classes]

  template <typename U>
  VitModel<U> cast() const {
    VitModel<U> m;
    m.cfg = cfg;
    m.patch_w = patch_w.template cast<U>();
    m.patch_b = patch_b.template cast<U>();
    m.cls_token = cls_token.template cast<U>();
    m.pos_emb = pos_emb.template cast<U>();
    m.lnf_g = lnf_g.template cast<U>();
    m.lnf_b = lnf_b.template cast<U>();
    m.head_w = head_w.template cast<U>();
    m.head_b = head_b.template cast<U>();
    for (const auto& b : blocks) {
      BlockParams<U> nb;
      nb.ln1_g = b.ln1_g.template cast<U>();
      nb.ln1_b = b.ln1_b.template cast<U>();
      nb.wq = b.wq.template cast<U>();
      nb.bq = b.bq.template cast<U>();
      nb.wk = b.wk.template cast<U>();
      nb.bk = b.bk.template cast<U>();
      nb.wv = b.wv.template cast<U>();
      nb.bv = b.bv.template cast<U>();
      nb.wo = b.wo.template cast<U>();
      nb.bo = b.bo.template cast<U>();
      nb.ln2_g = b.ln2_g.template cast<U>();
      nb.ln2_b = b.ln2_b.template cast<U>();
      nb.w1 = b.w1.template cast<U>();
      nb.b1 = b.b1.template cast<U>();
      nb.w2 = b.w2.template cast<U>();
      nb.b2 = b.b2.template cast<U>();
      nb.act = b.act;
      m.blocks.push_back(std::move(nb));
    }
    return m;
  }
};

inline VitModel<float> init_vit(const ViTConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.02);
  auto randn = [&](Shape s) {
    Tensor t = Tensor::zeros(std::move(s));
    for (auto& v : t.data) v = static_cast<float>(nd(rng));
    return t;
  };
  VitModel<float> m;
  m.cfg = cfg;
  int e = cfg.embed_dim, h = cfg.hidden_dim();
  m.patch_w = randn({cfg.patch_dim(), e});
  m.patch_b = Tensor::zeros({e});
  m.cls_token = randn({e});
  m.pos_emb = randn({cfg.tokens(), e});
  m.lnf_g = Tensor::full({e}, 1.0f);
  m.lnf_b = Tensor::zeros({e});
  m.head_w = randn({e, cfg.num_classes});
  m.head_b = Tensor::zeros({cfg.num_classes});
  for (int b = 0; b < cfg.depth; ++b) {
    BlockParams<float> blk;
    blk.ln1_g = Tensor::full({e}, 1.0f);
    blk.ln1_b = Tensor::zeros({e});
    blk.wq = randn({e, e});
    blk.bq = Tensor::zeros({e});
    blk.wk = randn({e, e});
    blk.bk = Tensor::zeros({e});
    blk.wv = randn({e, e});
    blk.bv = Tensor::zeros({e});
    blk.wo = randn({e, e});
    blk.bo = Tensor::zeros({e});
    blk.ln2_g = Tensor::full({e}, 1.0f);
    blk.ln2_b = Tensor::zeros({e});
    blk.w1 = randn({e, h});
    blk.b1 = Tensor::zeros({h});
    blk.w2 = randn({h, e});
    blk.b2 = Tensor::zeros({e});
    m.blocks.push_back(std::move(blk));
  }
  return m;
}

/// Rearranges flat images [B, C*H*W] into patch rows [B, P, patch_dim].
template <typename T>
TensorT<T> patchify(const ViTConfig& cfg, const TensorT<T>& images) {
  int64_t B = images.dim(0);
  check(images.numel() == B * cfg.channels * cfg.image_size * cfg.image_size,
        "patchify: image shape mismatch");
  int ps = cfg.patch_size, g = cfg.grid(), C = cfg.channels, H = cfg.image_size;
  TensorT<T> out = TensorT<T>::zeros({B, cfg.num_patches(), cfg.patch_dim()});
  int64_t pd = cfg.patch_dim();
  for (int64_t b = 0; b < B; ++b)
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        int64_t p = gy * g + gx;
        for (int c = 0; c < C; ++c)
          for (int py = 0; py < ps; ++py)
            for (int px = 0; px < ps; ++px) {
              int64_t src = ((b * C + c) * H + gy * ps + py) * H + gx * ps + px;
              int64_t dst = (b * cfg.num_patches() + p) * pd +
                            (static_cast<int64_t>(c) * ps + py) * ps + px;
              out.at(dst) = images.at(src);
            }
      }
  return out;
}

// Activation-quantization points inside a block, in forward order.
enum ActPoint {
  kActLn1 = 0,     // input to Q/K/V projections
  kActProbs = 1,   // post-softmax attention map (unsigned)
  kActProjIn = 2,  // input to the attention output projection
  kActLn2 = 3,     // input to FC1
  kActHidden = 4,  // post-activation input to FC2
  kNumActPoints = 5
};

// Quantizable linear weights inside a block, in forward order.
enum WeightSlot {
  kWq = 0, kWk = 1, kWv = 2, kWo = 3, kWfc1 = 4, kWfc2 = 5, kNumWeightSlots = 6
};

/// Controls how run_block resolves weights and activations. Default state
/// runs the block in full precision from the model parameters.
template <typename T>
struct BlockRunCtx {
  std::optional<Activation> act_override;

  // Soft-quantized weight vars (reconstruction training); invalid slots fall
  // back to w_tensors, then to the model parameters.
  std::array<Var, kNumWeightSlots> w_vars{};
  const std::array<TensorT<T>, kNumWeightSlots>* w_tensors = nullptr;

  // Trainable MLP parameter leaves (MLP reconstruction).
  Var fc1_w, fc1_b, fc2_w, fc2_b;

  // When set, raw (pre-quantization) activations at each point are appended
  // here; used for calibration sweeps.
  std::array<std::vector<T>, kNumActPoints>* act_capture = nullptr;

  // Activation quantization: calibrated params plus optional learnable
  // per-point log-scales. qdrop masks are drawn from *rng when enabled.
  const std::array<QuantParams, kNumActPoints>* act_qp = nullptr;
  std::array<Var, kNumActPoints> act_scale_vars{};
  bool qdrop_enabled = false;
  DropConfig drop;
  std::mt19937_64* rng = nullptr;

  // Filled by run_block when capture is requested.
  bool capture = false;
  Var mlp_in, hidden_preact, hidden_postact, mlp_out;
};

namespace detail {
template <typename T>
Var quant_point(Tape<T>& tp, Var x, BlockRunCtx<T>& ctx, int point) {
  if (ctx.act_capture) {
    const auto& xv = tp.val(x);
    auto& dst = (*ctx.act_capture)[static_cast<size_t>(point)];
    dst.insert(dst.end(), xv.data.begin(), xv.data.end());
  }
  if (!ctx.act_qp) return x;
  const QuantParams& qp = (*ctx.act_qp)[static_cast<size_t>(point)];
  Var xq;
  if (ctx.act_scale_vars[static_cast<size_t>(point)].valid()) {
    xq = fake_quant_act_op(tp, x, ctx.act_scale_vars[static_cast<size_t>(point)], qp);
  } else {
    xq = tp.constant(fake_quantize(tp.val(x), qp));
    if (tp.needs_grad(x)) {
      // straight-through for fixed-scale quantization
      Var src = x;
      Var o = tp.emplace(tp.val(xq), true, nullptr);
      tp.set_fn(o, [src, o](Tape<T>& t) {
        const TensorD& g = *t.grad(o);
        TensorD& gx = t.grad_acc(src);
        for (int64_t i = 0; i < g.numel(); ++i) gx.at(i) += g.at(i);
      });
      xq = o;
    }
  }
  if (ctx.qdrop_enabled) {
    check(ctx.rng != nullptr, "quant_point: qdrop without rng");
    auto mask = qdrop_mask(tp.val(x).numel(), ctx.drop, *ctx.rng);
    xq = qdrop_mix_op(tp, x, xq, std::move(mask));
  }
  return xq;
}

template <typename T>
Var weight_var(Tape<T>& tp, BlockRunCtx<T>& ctx, const BlockParams<T>& blk, int slot) {
  if (ctx.w_vars[static_cast<size_t>(slot)].valid()) return ctx.w_vars[static_cast<size_t>(slot)];
  if (ctx.w_tensors) return tp.constant((*ctx.w_tensors)[static_cast<size_t>(slot)]);
  switch (slot) {
    case kWq: return tp.constant(blk.wq);
    case kWk: return tp.constant(blk.wk);
    case kWv: return tp.constant(blk.wv);
    case kWo: return tp.constant(blk.wo);
    case kWfc1: return tp.constant(blk.w1);
    default: return tp.constant(blk.w2);
  }
}
}  // namespace detail

/// Runs one transformer block on tokens x [B,t,e] and returns the block
/// output var.
template <typename T>
Var run_block(Tape<T>& tp, const VitModel<T>& m, int block_index, Var x,
              BlockRunCtx<T>& ctx) {
  const BlockParams<T>& blk = m.blocks[static_cast<size_t>(block_index)];
  const ViTConfig& cfg = m.cfg;
  int64_t B = tp.val(x).dim(0), t = cfg.tokens(), e = cfg.embed_dim;
  int64_t nh = cfg.heads, dh = cfg.head_dim();
  check(tp.val(x).shape == Shape({B, t, e}), "run_block: token shape mismatch");

  // attention
  Var ln1 = layernorm(tp, x, tp.constant(blk.ln1_g), tp.constant(blk.ln1_b));
  Var aq_in = detail::quant_point(tp, ln1, ctx, kActLn1);
  auto proj = [&](int slot, const TensorT<T>& bias) {
    Var w = detail::weight_var(tp, ctx, blk, slot);
    return add_bcast(tp, matmul(tp, aq_in, w), tp.constant(bias));
  };
  Var q = proj(kWq, blk.bq), k = proj(kWk, blk.bk), v = proj(kWv, blk.bv);
  auto heads_of = [&](Var z) {
    return permute(tp, reshape(tp, z, {B, t, nh, dh}), {0, 2, 1, 3});
  };
  Var qh = heads_of(q), kh = heads_of(k), vh = heads_of(v);
  Var scores = scalar_mul(tp, matmul(tp, qh, kh, /*transpose_b=*/true),
                          1.0 / std::sqrt(static_cast<double>(dh)));
  Var probs = softmax_lastdim(tp, scores);
  probs = detail::quant_point(tp, probs, ctx, kActProbs);
  Var attn = matmul(tp, probs, vh);  // [B,h,t,dh]
  Var merged = reshape(tp, permute(tp, attn, {0, 2, 1, 3}), {B, t, e});
  merged = detail::quant_point(tp, merged, ctx, kActProjIn);
  Var wo = detail::weight_var(tp, ctx, blk, kWo);
  Var attn_out = add_bcast(tp, matmul(tp, merged, wo), tp.constant(blk.bo));
  Var h1 = add(tp, x, attn_out);

  // mlp
  Var ln2 = layernorm(tp, h1, tp.constant(blk.ln2_g), tp.constant(blk.ln2_b));
  if (ctx.capture) ctx.mlp_in = ln2;
  Var mq_in = detail::quant_point(tp, ln2, ctx, kActLn2);
  Var w1 = ctx.fc1_w.valid() ? ctx.fc1_w : detail::weight_var(tp, ctx, blk, kWfc1);
  Var b1 = ctx.fc1_b.valid() ? ctx.fc1_b : tp.constant(blk.b1);
  Var pre = add_bcast(tp, matmul(tp, mq_in, w1), b1);
  if (ctx.capture) ctx.hidden_preact = pre;
  Activation act = ctx.act_override.value_or(blk.act);
  Var hidden = act == Activation::kGelu ? gelu(tp, pre) : relu(tp, pre);
  if (ctx.capture) ctx.hidden_postact = hidden;
  Var hq = detail::quant_point(tp, hidden, ctx, kActHidden);
  Var w2 = ctx.fc2_w.valid() ? ctx.fc2_w : detail::weight_var(tp, ctx, blk, kWfc2);
  Var b2 = ctx.fc2_b.valid() ? ctx.fc2_b : tp.constant(blk.b2);
  Var mlp_out = add_bcast(tp, matmul(tp, hq, w2), b2);
  if (ctx.capture) ctx.mlp_out = mlp_out;
  return add(tp, h1, mlp_out);
}

/// Patch embedding + class token + positional embeddings.
/// `patch_w_override` substitutes a (e.g. fake-quantized) embedding weight.
template <typename T>
Var embed_images(Tape<T>& tp, const VitModel<T>& m, const TensorT<T>& images,
                 const TensorT<T>* patch_w_override = nullptr) {
  TensorT<T> patches = patchify(m.cfg, images);
  Var p = tp.constant(std::move(patches));
  Var w = tp.constant(patch_w_override ? *patch_w_override : m.patch_w);
  Var tok = add_bcast(tp, matmul(tp, p, w), tp.constant(m.patch_b));
  Var with_cls = prepend_token(tp, tok, tp.constant(m.cls_token));
  return add_bcast(tp, with_cls, tp.constant(m.pos_emb));
}

/// Runs blocks [from_block, depth) then the classification head.
template <typename T>
Var run_tail(Tape<T>& tp, const VitModel<T>& m, int from_block, Var x) {
  check(from_block >= 0 && from_block <= m.cfg.depth, "run_tail: invalid block index");
  for (int b = from_block; b < m.cfg.depth; ++b) {
    BlockRunCtx<T> ctx;
    x = run_block(tp, m, b, x, ctx);
  }
  Var lnf = layernorm(tp, x, tp.constant(m.lnf_g), tp.constant(m.lnf_b));
  Var cls = select_token(tp, lnf, 0);
  return add_bcast(tp, matmul(tp, cls, tp.constant(m.head_w)), tp.constant(m.head_b));
}

struct ForwardResult {
  Var logits;
  std::vector<Var> block_inputs;   // block_inputs[b] feeds block b
  std::vector<Var> block_outputs;  // block_outputs[b] is block b's output
};

/// Full-precision forward pass with per-block capture points.
template <typename T>
ForwardResult vit_forward(Tape<T>& tp, const VitModel<T>& m, const TensorT<T>& images) {
  ForwardResult r;
  Var x = embed_images(tp, m, images);
  for (int b = 0; b < m.cfg.depth; ++b) {
    r.block_inputs.push_back(x);
    BlockRunCtx<T> ctx;
    x = run_block(tp, m, b, x, ctx);
    r.block_outputs.push_back(x);
  }
  r.logits = run_tail(tp, m, m.cfg.depth, x);
  return r;
}

/// Convenience: logits as a plain tensor (no gradients recorded).
template <typename T>
TensorT<T> forward_logits(const VitModel<T>& m, const TensorT<T>& images) {
  Tape<T> tp;
  return tp.val(vit_forward(tp, m, images).logits);
}

/// Logits from a block output onward (Algorithm-style tail evaluation).
template <typename T>
TensorT<T> forward_tail(const VitModel<T>& m, int block_index,
                        const TensorT<T>& block_output) {
  check(block_index >= 0 && block_index < m.cfg.depth, "forward_tail: invalid block index");
  Tape<T> tp;
  Var x = tp.constant(block_output);
  return tp.val(run_tail(tp, m, block_index + 1, x));
}

/// A transformer block plus its captured full-precision input/output
/// activations over the calibration set.
struct BlockRecord {
  int block_index = -1;
  Tensor inputs;   // [N, tokens, embed]
  Tensor outputs;  // [N, tokens, embed]
};

/// Runs the full-precision model over calibration batches and captures one
/// BlockRecord per block.
inline std::vector<BlockRecord> capture_block_records(
    const VitModel<float>& m, const std::vector<Tensor>& calibration_batches) {
  check(!calibration_batches.empty(), "capture_block_records: empty calibration set");
  int64_t t = m.cfg.tokens(), e = m.cfg.embed_dim;
  int64_t total = 0;
  for (const auto& b : calibration_batches) total += b.dim(0);
  std::vector<BlockRecord> recs(static_cast<size_t>(m.cfg.depth));
  for (int b = 0; b < m.cfg.depth; ++b) {
    recs[static_cast<size_t>(b)].block_index = b;
    recs[static_cast<size_t>(b)].inputs = Tensor::zeros({total, t, e});
    recs[static_cast<size_t>(b)].outputs = Tensor::zeros({total, t, e});
  }
  int64_t off = 0;
  for (const auto& batch : calibration_batches) {
    Tape<float> tp;
    ForwardResult r = vit_forward(tp, m, batch);
    int64_t B = batch.dim(0);
    for (int b = 0; b < m.cfg.depth; ++b) {
      const Tensor& in = tp.val(r.block_inputs[static_cast<size_t>(b)]);
      const Tensor& out = tp.val(r.block_outputs[static_cast<size_t>(b)]);
      std::copy(in.data.begin(), in.data.end(),
                recs[static_cast<size_t>(b)].inputs.data.begin() + off * t * e);
      std::copy(out.data.begin(), out.data.end(),
                recs[static_cast<size_t>(b)].outputs.data.begin() + off * t * e);
    }
    off += B;
  }
  return recs;
}

}  // namespace aphq

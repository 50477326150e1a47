// Trains the toy ViT on the synthetic dataset and writes the fixture
// checkpoint, golden logits, and a metadata file consumed by the tests.

#include <CLI11.hpp>

#include <array>
#include <chrono>
#include <cstdio>
#include <random>

#include "aphq/checkpoint.hpp"
#include "aphq/data.hpp"
#include "aphq/optim.hpp"
#include "aphq/pipeline.hpp"
#include "aphq/report.hpp"

using namespace aphq;

namespace {

// run_block mirror with every parameter as a tape leaf (the library forward
// treats parameters as constants; training needs gradients into them).
struct ParamRefs {
  std::vector<Tensor*> tensors;
  std::vector<Var> vars;

  Var reg(Tape<float>& tp, Tensor* t) {
    tensors.push_back(t);
    Var v = tp.leaf(t->with_grad());
    vars.push_back(v);
    return v;
  }
};

Var train_forward(Tape<float>& tp, VitModel<float>& m, const Tensor& images,
                  ParamRefs& pr) {
  const ViTConfig& cfg = m.cfg;
  int64_t B = images.dim(0), t = cfg.tokens(), e = cfg.embed_dim;
  int64_t nh = cfg.heads, dh = cfg.head_dim();
  Tensor patches = patchify(cfg, images);
  Var x = add_bcast(tp, matmul(tp, tp.constant(std::move(patches)), pr.reg(tp, &m.patch_w)),
                    pr.reg(tp, &m.patch_b));
  x = prepend_token(tp, x, pr.reg(tp, &m.cls_token));
  x = add_bcast(tp, x, pr.reg(tp, &m.pos_emb));
  for (auto& blk : m.blocks) {
    Var ln1 = layernorm(tp, x, pr.reg(tp, &blk.ln1_g), pr.reg(tp, &blk.ln1_b));
    auto proj = [&](Tensor* w, Tensor* b) {
      return add_bcast(tp, matmul(tp, ln1, pr.reg(tp, w)), pr.reg(tp, b));
    };
    Var q = proj(&blk.wq, &blk.bq), k = proj(&blk.wk, &blk.bk), v = proj(&blk.wv, &blk.bv);
    auto heads_of = [&](Var z) {
      return permute(tp, reshape(tp, z, {B, t, nh, dh}), {0, 2, 1, 3});
    };
    Var scores = scalar_mul(tp, matmul(tp, heads_of(q), heads_of(k), true),
                            1.0 / std::sqrt(static_cast<double>(dh)));
    Var attn = matmul(tp, softmax_lastdim(tp, scores), heads_of(v));
    Var merged = reshape(tp, permute(tp, attn, {0, 2, 1, 3}), {B, t, e});
    Var attn_out = add_bcast(tp, matmul(tp, merged, pr.reg(tp, &blk.wo)),
                             pr.reg(tp, &blk.bo));
    Var h1 = add(tp, x, attn_out);
    Var ln2 = layernorm(tp, h1, pr.reg(tp, &blk.ln2_g), pr.reg(tp, &blk.ln2_b));
    Var hid = gelu(tp, add_bcast(tp, matmul(tp, ln2, pr.reg(tp, &blk.w1)),
                                 pr.reg(tp, &blk.b1)));
    Var mlp = add_bcast(tp, matmul(tp, hid, pr.reg(tp, &blk.w2)), pr.reg(tp, &blk.b2));
    x = add(tp, h1, mlp);
  }
  Var lnf = layernorm(tp, x, pr.reg(tp, &m.lnf_g), pr.reg(tp, &m.lnf_b));
  Var cls = select_token(tp, lnf, 0);
  return add_bcast(tp, matmul(tp, cls, pr.reg(tp, &m.head_w)), pr.reg(tp, &m.head_b));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"train the toy ViT fixture"};
  std::string out_dir = "fixtures";
  uint64_t model_seed = 42, data_seed = 1234;
  int64_t train_n = 2048, eval_n = 512;
  int iters = 3000, batch = 32;
  double lr = 1e-3, noise = 2.0;
  app.add_option("--out", out_dir);
  app.add_option("--model-seed", model_seed);
  app.add_option("--data-seed", data_seed);
  app.add_option("--train-n", train_n);
  app.add_option("--eval-n", eval_n);
  app.add_option("--iters", iters);
  app.add_option("--batch", batch);
  app.add_option("--lr", lr);
  app.add_option("--noise", noise);
  CLI11_PARSE(app, argc, argv);

  ViTConfig cfg;
  Dataset all = make_synthetic_dataset(cfg, train_n + eval_n, data_seed, noise);
  int64_t chw = all.images.numel() / all.size();
  auto split = [&](int64_t from, int64_t n) {
    Dataset d;
    d.images = Tensor::zeros({n, chw});
    std::copy_n(all.images.data.begin() + from * chw, n * chw, d.images.data.begin());
    d.labels.assign(all.labels.begin() + from, all.labels.begin() + from + n);
    return d;
  };
  Dataset train = split(0, train_n), eval = split(train_n, eval_n);

  VitModel<float> m = init_vit(cfg, model_seed);
  Adam opt;
  bool registered = false;
  std::mt19937_64 rng(model_seed + 1);
  std::uniform_int_distribution<int64_t> pick(0, train_n - 1);
  auto t0 = std::chrono::steady_clock::now();
  for (int it = 0; it < iters; ++it) {
    Tensor xb = Tensor::zeros({batch, chw});
    std::vector<int> yb(static_cast<size_t>(batch));
    for (int i = 0; i < batch; ++i) {
      int64_t s = pick(rng);
      std::copy_n(train.images.data.begin() + s * chw, chw, xb.data.begin() + i * chw);
      yb[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(s)];
    }
    Tape<float> tp;
    ParamRefs pr;
    Var logits = train_forward(tp, m, xb, pr);
    Var loss = softmax_cross_entropy(tp, logits, yb);
    tp.backward(loss);
    if (!registered) {
      for (Tensor* t : pr.tensors) opt.add_param(t, lr);
      registered = true;
    }
    std::vector<const TensorD*> grads;
    for (Var v : pr.vars) grads.push_back(tp.grad(v));
    opt.step(grads);
    if (it % 200 == 0)
      std::printf("iter %5d  loss %.4f\n", it, static_cast<double>(tp.val(loss).at(0)));
  }
  auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  double train_acc = evaluate_fp(m, train.images, train.labels);
  double eval_acc = evaluate_fp(m, eval.images, eval.labels);
  std::printf("trained in %.1fs  train acc %.4f  eval acc %.4f\n", secs, train_acc, eval_acc);

  std::filesystem::create_directories(out_dir);
  save_checkpoint(out_dir + "/fixture.ckpt", m, model_seed);

  // Golden logits on the first 8 eval images.
  int64_t gn = std::min<int64_t>(8, eval_n);
  Tensor gx = Tensor::zeros({gn, chw});
  std::copy_n(eval.images.data.begin(), gn * chw, gx.data.begin());
  Tensor gl = forward_logits(m, gx);
  detail::write_file_atomic(out_dir + "/golden_logits.bin",
                            reinterpret_cast<const char*>(gl.data.data()),
                            gl.data.size() * sizeof(float));

  nlohmann::json meta = {{"vit_config", cfg},
                         {"model_seed", model_seed},
                         {"data_seed", data_seed},
                         {"noise_sigma", noise},
                         {"train_n", train_n},
                         {"eval_n", eval_n},
                         {"golden_n", gn},
                         {"train_accuracy", train_acc},
                         {"eval_accuracy", eval_acc}};
  write_text(out_dir + "/fixture_meta.json", meta.dump(2));
  return 0;
}

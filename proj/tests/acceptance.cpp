// Acceptance gate: one criterion per test, each printing a single
// "CRITERION n: PASS|FAIL" line with the measured numbers.

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>

#include "aphq/checkpoint.hpp"
#include "aphq/report.hpp"
#include "fixture.h"

using namespace aphq;

namespace {

void verdict(int n, bool pass, const std::string& detail) {
  std::printf("CRITERION %d: %s - %s\n", n, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  EXPECT_TRUE(pass) << detail;
}

std::string fmt(double v) { return fmt_double(v); }

struct Calib {
  VitModel<float> m;
  fixture::Splits ds;
  Tensor train_images(int64_t n) const {
    int64_t chw = ds.train.images.numel() / ds.train.size();
    Tensor x = Tensor::zeros({n, chw});
    std::copy_n(ds.train.images.data.begin(), n * chw, x.data.begin());
    return x;
  }
  Calib() : m(fixture::model()), ds(fixture::dataset()) {}
};

// ---------------------------------------------------------------------------
// 1. Finite-difference Hessian diagonals match closed forms.
// ---------------------------------------------------------------------------
TEST(Acceptance, C1_HessianOracleEquivalence) {
  const double delta = 1e-6;
  // (a) quadratic loss with an identity tail: L(x) = sum (x - a)^2, H = 2 I.
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  TensorD a = TensorD::zeros({32}), x = TensorD::zeros({32});
  for (int i = 0; i < 32; ++i) {
    a.at(i) = nd(rng);
    x.at(i) = nd(rng);
  }
  auto quad_grad = [&](const TensorD& z) {
    Tape<double> tp;
    TensorD leaf = z;
    leaf.requires_grad = true;
    Var v = tp.leaf(std::move(leaf));
    Var loss = weighted_sse(tp, v, tp.constant(a), tp.constant(TensorD::scalar(1.0)));
    tp.backward(loss);
    return *tp.grad(v);
  };
  auto [xp, xm] = perturb_outputs(x, delta);
  TensorD h = per_sample_hessian_diag({quad_grad(xp), quad_grad(xm)}, delta);
  double quad_err = 0;
  for (int i = 0; i < 32; ++i) quad_err = std::max(quad_err, std::abs(h.at(i) - 2.0));

  // (b) KL against uniform logits: H_ii = p(1-p), p = 1/C.
  const int C = 10;
  TensorD logits = TensorD::zeros({1, C});
  auto kl_grad = [&](const TensorD& z) {
    Tape<double> tp;
    Var t = tp.constant(logits);
    TensorD leaf = z;
    leaf.requires_grad = true;
    Var s = tp.leaf(std::move(leaf));
    tp.backward(kl_divergence_logits(tp, s, t));
    return *tp.grad(s);
  };
  double p = 1.0 / C, expect = p * (1 - p);
  double kl_rel = 0;
  for (int i = 0; i < C; ++i) {
    TensorD e = TensorD::zeros({1, C});
    e.at(i) = 1.0;
    auto [zp, zm] = perturb_along(logits, delta, e);
    TensorD col = per_sample_hessian_diag({kl_grad(zp), kl_grad(zm)}, delta);
    kl_rel = std::max(kl_rel, std::abs(col.at(i) - expect) / expect);
  }
  bool pass = quad_err <= 1e-4 && kl_rel <= 0.01;
  verdict(1, pass,
          "quadratic identity-tail max|H-2| = " + fmt(quad_err) +
              " (<=1e-4), uniform-logits KL diag rel err = " + fmt(kl_rel) + " (<=1%)");
}

// ---------------------------------------------------------------------------
// 2. Distillation Jacobian vanishes at the expansion point.
// ---------------------------------------------------------------------------
TEST(Acceptance, C2_JacobianAtEquality) {
  Calib c;
  VitModel<double> md = c.m.cast<double>();
  Tensor imgs = c.train_images(4);
  Tape<float> tp;
  ForwardResult r = vit_forward(tp, c.m, imgs);
  PerturbationConfig pc;
  double worst = 0;
  for (int b = 0; b < c.m.cfg.depth; ++b) {
    TensorD o = tp.val(r.block_outputs[static_cast<size_t>(b)]).cast<double>();
    worst = std::max(worst, max_abs(tail_jacobian(md, b, o, o, pc)));
  }
  verdict(2, worst <= 1e-7,
          "max |dL/dO| at O_eval = O_ref over all blocks = " + fmt(worst) + " (<=1e-7)");
}

// ---------------------------------------------------------------------------
// 3. Expectation consistency of per-sample vs averaged Hessian losses.
// ---------------------------------------------------------------------------
TEST(Acceptance, C3_ExpectationConsistency) {
  Calib c;
  const int block = 1;
  const int64_t N = 32;
  Tensor imgs = c.train_images(N);
  std::vector<BlockRecord> recs = capture_block_records(c.m, {imgs});
  const Tensor& O = recs[block].outputs;
  int64_t te = O.dim(1) * O.dim(2);

  VitModel<double> md = c.m.cast<double>();
  PerturbationConfig pc;
  auto hs = per_sample_hessians(md, block, O, pc, 16, 11);
  HessianDiagonal avg = average_hessian(hs);
  Tensor avg_w = clamp_nonneg(avg.values);

  // Pool of fake-quantization error patterns at assorted widths/clips.
  std::vector<Tensor> errors;
  for (int bits : {3, 4, 5})
    for (double clip : {0.995, 1.0}) {
      QuantParams qp = calibrate_quant_params(O, bits, Granularity::kPerTensor, clip, true);
      Tensor q = fake_quantize(O, qp);
      for (int64_t i = 0; i < q.numel(); ++i) q.at(i) -= O.at(i);
      errors.push_back(std::move(q));  // [N, t, e] of per-sample error rows
    }

  // Each draw pairs an independently chosen weight sample n and error row
  // (v, m); E over n of the per-sample weights is the averaged weight, so the
  // two loss means must agree.
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int64_t> pick_n(0, N - 1);
  std::uniform_int_distribution<size_t> pick_v(0, errors.size() - 1);
  const int draws = 300;
  std::vector<double> lph, laph;
  for (int d = 0; d < draws; ++d) {
    int64_t n = pick_n(rng), m = pick_n(rng);
    const Tensor& err = errors[pick_v(rng)];
    Tensor hn = clamp_nonneg(hs[static_cast<size_t>(n)].cast<float>());
    double x = 0, y = 0;
    for (int64_t i = 0; i < te; ++i) {
      double e2 = static_cast<double>(err.at(m * te + i));
      e2 *= e2;
      x += static_cast<double>(hn.at(i)) * e2;
      y += static_cast<double>(avg_w.at(i)) * e2;
    }
    lph.push_back(x);
    laph.push_back(y);
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  auto sem = [&](const std::vector<double>& v) {
    double mu = mean(v), s = 0;
    for (double x : v) s += (x - mu) * (x - mu);
    return std::sqrt(s / static_cast<double>(v.size() - 1) /
                     static_cast<double>(v.size()));
  };
  double diff = std::abs(mean(lph) - mean(laph));
  double pooled = std::sqrt(sem(lph) * sem(lph) + sem(laph) * sem(laph));
  bool pass = diff <= 3.0 * pooled;
  verdict(3, pass,
          "|mean per-sample loss - mean averaged loss| = " + fmt(diff) +
              " over " + std::to_string(draws) + " draws, 3x pooled SE = " +
              fmt(3.0 * pooled));
}

// ---------------------------------------------------------------------------
// 4. Variance reduction of the averaged-weight gradient.
// ---------------------------------------------------------------------------
TEST(Acceptance, C4_VarianceReduction) {
  Calib c;
  const int block = 2;
  const int64_t N = 32;
  Tensor imgs = c.train_images(N);
  std::vector<BlockRecord> recs = capture_block_records(c.m, {imgs});
  const BlockRecord& rec = recs[block];
  int64_t te = rec.inputs.dim(1) * rec.inputs.dim(2);

  ReconstructionConfig cfg;
  cfg.batch_size = 8;
  int wins = 0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    // shuffle the sample order so each trial sees different mini-batches
    std::vector<int64_t> order(static_cast<size_t>(N));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(100 + static_cast<uint64_t>(t));
    std::shuffle(order.begin(), order.end(), rng);
    Tensor in = Tensor::zeros(rec.inputs.shape), out = Tensor::zeros(rec.outputs.shape);
    for (int64_t i = 0; i < N; ++i) {
      std::copy_n(rec.inputs.data.begin() + order[static_cast<size_t>(i)] * te, te,
                  in.data.begin() + i * te);
      std::copy_n(rec.outputs.data.begin() + order[static_cast<size_t>(i)] * te, te,
                  out.data.begin() + i * te);
    }
    VarianceProbe p = gradient_variance_probe(c.m, block, in, out, cfg,
                                              /*num_batches=*/4, /*curve_iters=*/0,
                                              200 + static_cast<uint64_t>(t));
    if (p.aph_variance <= p.ph_variance * (1.0 + 1e-12)) ++wins;
  }

  VarianceProbe curves = gradient_variance_probe(c.m, block, rec.inputs, rec.outputs,
                                                 cfg, 2, /*curve_iters=*/500, 7);
  auto fluct = [](const std::vector<double>& v) {
    double s = 0;
    for (size_t i = 1; i < v.size(); ++i) s += std::abs(v[i] - v[i - 1]);
    return s / static_cast<double>(v.size() - 1);
  };
  double fp = fluct(curves.ph_curve), fa = fluct(curves.aph_curve);
  bool pass = wins >= 19 && fa <= fp;
  verdict(4, pass,
          "averaged-weight grad variance <= per-sample in " + std::to_string(wins) +
              "/20 trials (need >=19); 500-iter curve fluctuation averaged=" + fmt(fa) +
              " vs per-sample=" + fmt(fp));
}

// ---------------------------------------------------------------------------
// 5. Activation replacement shrinks the FC2 input range, accuracy holds.
// ---------------------------------------------------------------------------
TEST(Acceptance, C5_MlpReconstructionRange) {
  Calib c;
  const int64_t N = 256;
  Tensor calib = c.train_images(N);
  double fp_acc = evaluate_fp(c.m, c.ds.eval.images, c.ds.eval.labels);

  VitModel<float> m = c.m;  // reconstructed in place, block by block
  int shrunk = 0;
  std::string quantiles;
  Tensor x = detail::embed_all(m, calib, nullptr, 32);
  for (int b = 0; b < m.cfg.depth; ++b) {
    Tensor mlp_in = detail::capture_mlp_inputs(m, b, x, 32);
    auto hidden_q = [&](Activation act) {
      Tape<float> tp;
      const BlockParams<float>& blk = m.blocks[static_cast<size_t>(b)];
      auto [hid, out] = detail::mlp_branch(tp, tp.constant(mlp_in), tp.constant(blk.w1),
                                           tp.constant(blk.b1), tp.constant(blk.w2),
                                           tp.constant(blk.b2), act);
      (void)out;
      const Tensor& hv = tp.val(hid);
      std::vector<double> v(hv.data.begin(), hv.data.end());
      return quantile(std::move(v), 0.99);
    };
    double pre = hidden_q(Activation::kGelu);
    MlpReconConfig mc;
    mc.iters = 500;
    mc.seed = 31 + static_cast<uint64_t>(b);
    reconstruct_mlp(m, b, mlp_in, mc);
    double post = hidden_q(Activation::kRelu);
    if (post < pre) ++shrunk;
    quantiles += " b" + std::to_string(b) + ":" + fmt(pre) + "->" + fmt(post);
    // propagate through the reconstructed block
    Tape<float> tp;
    BlockRunCtx<float> ctx;
    x = tp.val(run_block(tp, m, b, tp.constant(x), ctx));
  }
  double mr_acc = evaluate_fp(m, c.ds.eval.images, c.ds.eval.labels);
  bool pass = shrunk == m.cfg.depth && mr_acc >= fp_acc - 0.02;
  verdict(5, pass,
          "FC2-input 0.99-quantile shrank in " + std::to_string(shrunk) + "/" +
              std::to_string(m.cfg.depth) + " blocks (" + quantiles +
              "); accuracy " + fmt(fp_acc) + " -> " + fmt(mr_acc) + " (drop <= 0.02)");
}

// ---------------------------------------------------------------------------
// 6. Ablation ordering at W3/A3; W8/A8 near full precision.
// ---------------------------------------------------------------------------
TEST(Acceptance, C6_AblationOrdering) {
  Calib c;
  Tensor calib = c.train_images(256);
  double fp_acc = evaluate_fp(c.m, c.ds.eval.images, c.ds.eval.labels);

  auto run = [&](int bits, int iters, ReconLossKind k, bool mr) {
    ReconstructionConfig cfg;
    cfg.weight_bits = bits;
    cfg.act_bits = bits;
    cfg.iters = iters;
    cfg.calib_samples = 256;
    cfg.loss_kind = k;
    cfg.enable_mlp_recon = mr;
    QuantizedModel qm = quantize_model(c.m, calib, cfg);
    return evaluate_quantized(qm, c.ds.eval.images, c.ds.eval.labels);
  };

  double a3_mse = run(3, 2000, ReconLossKind::kMse, false);
  double a3_aph = run(3, 2000, ReconLossKind::kAph, false);
  double a3_mr = run(3, 2000, ReconLossKind::kAph, true);
  // ordering must hold up to a 1-point tie band
  auto ordered = [](double hi, double lo) { return hi >= lo - 0.01; };
  auto tag = [](double hi, double lo) {
    return hi >= lo + 0.01 ? "" : " (tie)";
  };
  bool w3_ok = ordered(a3_mr, a3_aph) && ordered(a3_aph, a3_mse);

  double a8_mse = run(8, 250, ReconLossKind::kMse, false);
  double a8_aph = run(8, 250, ReconLossKind::kAph, false);
  double a8_mr = run(8, 250, ReconLossKind::kAph, true);
  bool w8_ok = std::abs(a8_mse - fp_acc) <= 0.01 && std::abs(a8_aph - fp_acc) <= 0.01 &&
               std::abs(a8_mr - fp_acc) <= 0.01;

  verdict(6, w3_ok && w8_ok,
          "W3/A3: aph+mr=" + fmt(a3_mr) + std::string(tag(a3_mr, a3_aph)) +
              " >= aph=" + fmt(a3_aph) + std::string(tag(a3_aph, a3_mse)) +
              " >= mse=" + fmt(a3_mse) + "; W8/A8 vs fp=" + fmt(fp_acc) +
              ": mse=" + fmt(a8_mse) + " aph=" + fmt(a8_aph) + " aph+mr=" + fmt(a8_mr) +
              " (all within 0.01)");
}

// ---------------------------------------------------------------------------
// 7. Quantizer property suites.
// ---------------------------------------------------------------------------
TEST(Acceptance, C7_QuantizerProperties) {
  std::mt19937_64 rng(77);
  std::normal_distribution<float> nd;
  std::uniform_int_distribution<int> pick_bits(2, 8);
  std::uniform_real_distribution<float> scale_mag(0.01f, 10.0f);
  int cases = 0, failures = 0;
  int f_idem = 0, f_bound = 0, f_codes = 0, f_round = 0;
  for (int it = 0; it < 1200; ++it) {
    int bits = pick_bits(rng);
    bool signed_ = (it % 3) != 0;
    bool per_channel = (it % 2) == 0;
    int64_t rows = 1 + static_cast<int64_t>(rng() % 6);
    int64_t cols = 1 + static_cast<int64_t>(rng() % 24);
    Tensor x = Tensor::zeros({rows, cols});
    float mag = scale_mag(rng);
    for (auto& v : x.data) v = mag * nd(rng);
    if (!signed_)
      for (auto& v : x.data) v = std::abs(v);
    QuantParams qp = calibrate_quant_params(
        x, bits, per_channel ? Granularity::kPerChannel : Granularity::kPerTensor, 1.0,
        signed_);
    Tensor q = fake_quantize(x, qp);
    Tensor qq = fake_quantize(q, qp);
    ++cases;
    bool ok = true;
    if (q.data != qq.data) {  // idempotence, bitwise
      ok = false;
      ++f_idem;
    }
    int64_t groups = static_cast<int64_t>(qp.scale.size());
    // in-grid values land within half a step; saturated values hit the edge
    for (int64_t i = 0; i < x.numel(); ++i) {
      size_t g = static_cast<size_t>(groups > 1 ? i % cols : 0);
      double s = qp.scale[g];
      double z = qp.zero_point[g];
      double xv = static_cast<double>(x.at(i)), qv = static_cast<double>(q.at(i));
      double code = std::round(xv / s) + z;
      double eps = 1e-5 * std::max(1.0, std::abs(xv));
      bool bad;
      if (code >= static_cast<double>(qp.qmin()) && code <= static_cast<double>(qp.qmax()))
        bad = std::abs(qv - xv) > 0.5 * s + eps;
      else {
        double edge = code < static_cast<double>(qp.qmin())
                          ? s * (static_cast<double>(qp.qmin()) - z)
                          : s * (static_cast<double>(qp.qmax()) - z);
        bad = std::abs(qv - edge) > eps;
      }
      if (bad) {
        ok = false;
        ++f_bound;
        break;
      }
    }
    // distinct codes per group bounded by the code book size
    for (int64_t g = 0; g < groups; ++g) {
      std::vector<float> vals;
      for (int64_t i = 0; i < x.numel(); ++i)
        if (groups == 1 || i % cols == g) vals.push_back(q.at(i));
      std::sort(vals.begin(), vals.end());
      vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
      if (vals.size() > (1u << bits)) {
        ok = false;
        ++f_codes;
        break;
      }
    }
    // rounding-variable initialization reproduces the weights
    AdaRoundState st = init_adaround(x, qp);
    Tensor soft = adaround_weight(x, qp, st, false);
    for (int64_t i = 0; i < x.numel(); ++i) {
      size_t g = static_cast<size_t>(groups > 1 ? i % cols : 0);
      double s = qp.scale[g];
      double z = qp.zero_point[g];
      double xv = static_cast<double>(x.at(i));
      // at init floor(w/s) + h == w/s, so only range saturation can deviate
      double code = std::min(std::max(xv / s + z, static_cast<double>(qp.qmin())),
                             static_cast<double>(qp.qmax()));
      double target = s * (code - z);
      if (std::abs(static_cast<double>(soft.at(i)) - target) >
          1e-4 * s + 1e-5 * std::max(1.0, std::abs(xv))) {
        ok = false;
        ++f_round;
        break;
      }
    }
    if (!ok) ++failures;
  }
  verdict(7, failures == 0,
          std::to_string(cases) + " randomized cases, failures = " +
              std::to_string(failures) + " (idempotence " + std::to_string(f_idem) +
              ", step bound " + std::to_string(f_bound) + ", code-book size " +
              std::to_string(f_codes) + ", rounding init " + std::to_string(f_round) +
              ")");
}

// ---------------------------------------------------------------------------
// 8. Byte-identical artifacts under identical config and seed.
// ---------------------------------------------------------------------------
TEST(Acceptance, C8_Determinism) {
  namespace fs = std::filesystem;
  Calib c;
  Tensor calib = c.train_images(32);
  ReconstructionConfig cfg;
  cfg.weight_bits = 4;
  cfg.act_bits = 4;
  cfg.iters = 60;
  cfg.calib_samples = 32;
  cfg.mlp.iters = 30;

  fs::path dir = fs::temp_directory_path() / "aphq_acceptance_c8";
  fs::create_directories(dir);
  std::vector<std::vector<char>> bytes;
  std::vector<std::string> reports;
  for (int run = 0; run < 2; ++run) {
    VitModel<float> fp = fixture::model();  // fresh load each run
    PipelineReport rep;
    QuantizedModel qm = quantize_model(fp, calib, cfg, &rep);
    std::string path = (dir / ("run" + std::to_string(run) + ".ckpt")).string();
    save_quantized_checkpoint(path, qm);
    bytes.push_back(detail::read_file(path));
    double fp_acc = evaluate_fp(fp, c.ds.eval.images, c.ds.eval.labels);
    double q_acc = evaluate_quantized(qm, c.ds.eval.images, c.ds.eval.labels);
    reports.push_back(make_run_report(cfg, rep, fp_acc, q_acc, 0.0).dump(2));
  }
  fs::remove_all(dir);
  bool pass = bytes[0] == bytes[1] && reports[0] == reports[1];
  verdict(8, pass,
          std::string("two identical-seed pipeline runs: checkpoints ") +
              (bytes[0] == bytes[1] ? "byte-identical" : "DIFFER") + ", reports " +
              (reports[0] == reports[1] ? "identical" : "DIFFER") +
              " (wall-clock timing pinned)");
}

// ---------------------------------------------------------------------------
// 9. Central-difference checks on every differentiable tape primitive.
// ---------------------------------------------------------------------------
// One randomized instance of a primitive: leaf inputs plus a builder that
// applies the op (with any per-instance attributes baked in).
struct OpInstance {
  std::vector<TensorD> inputs;
  std::function<Var(Tape<double>&, const std::vector<Var>&)> apply;
};

using OpGen = std::function<OpInstance(std::mt19937_64&)>;

TensorD randn(std::mt19937_64& rng, Shape s, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  TensorD t = TensorD::zeros(std::move(s));
  for (auto& v : t.data) v = nd(rng);
  return t;
}

// keep values away from a non-smooth point so central differences stay valid
void push_away(TensorD& t, double point, double margin) {
  for (auto& v : t.data)
    if (std::abs(v - point) < margin) v = point + (v >= point ? margin : -margin);
}

// Checks d(proj . op(inputs))/d(inputs) against central differences.
// Returns the number of failed coordinates.
int check_instance(const OpInstance& inst, std::mt19937_64& rng) {
  auto eval = [&](const std::vector<TensorD>& vals, const TensorD& proj) {
    Tape<double> tp;
    std::vector<Var> leaves;
    for (const auto& v : vals) leaves.push_back(tp.constant(v));
    Var out = inst.apply(tp, leaves);
    Var loss = sum_all(tp, mul(tp, out, tp.constant(proj)));
    return tp.val(loss).at(0);
  };

  TensorD proj;
  std::vector<TensorD> grads;
  {
    Tape<double> tp;
    std::vector<Var> leaves;
    for (const auto& v : inst.inputs) {
      TensorD t = v;
      t.requires_grad = true;
      leaves.push_back(tp.leaf(std::move(t)));
    }
    Var out = inst.apply(tp, leaves);
    proj = randn(rng, tp.val(out).shape);
    Var loss = sum_all(tp, mul(tp, out, tp.constant(proj)));
    tp.backward(loss);
    for (Var l : leaves) {
      const TensorD* g = tp.grad(l);
      grads.push_back(g ? *g : TensorD::zeros(tp.val(l).shape));
    }
  }

  const double h = 1e-5;
  int bad = 0;
  for (size_t li = 0; li < inst.inputs.size(); ++li) {
    int64_t n = inst.inputs[li].numel();
    int probes = static_cast<int>(std::min<int64_t>(n, 6));
    for (int p = 0; p < probes; ++p) {
      int64_t i = static_cast<int64_t>(rng() % static_cast<uint64_t>(n));
      std::vector<TensorD> vp = inst.inputs, vm = inst.inputs;
      vp[li].at(i) += h;
      vm[li].at(i) -= h;
      double fd = (eval(vp, proj) - eval(vm, proj)) / (2 * h);
      double an = grads[li].at(i);
      if (std::abs(fd - an) > 1e-3 * std::max(std::abs(fd), std::abs(an)) + 1e-7)
        ++bad;
    }
  }
  return bad;
}

TEST(Acceptance, C9_GradientCorrectness) {
  std::vector<std::pair<std::string, OpGen>> ops;
  auto shape3 = [](std::mt19937_64& rng) {
    return Shape{1 + static_cast<int64_t>(rng() % 3), 2 + static_cast<int64_t>(rng() % 3),
                 2 + static_cast<int64_t>(rng() % 4)};
  };
  auto binary = [&](auto fn) {
    return [fn, shape3](std::mt19937_64& rng) {
      Shape s = shape3(rng);
      OpInstance in;
      in.inputs = {randn(rng, s), randn(rng, s)};
      in.apply = [fn](Tape<double>& tp, const std::vector<Var>& l) {
        return fn(tp, l[0], l[1]);
      };
      return in;
    };
  };
  ops.emplace_back("add", binary([](Tape<double>& tp, Var a, Var b) { return add(tp, a, b); }));
  ops.emplace_back("sub", binary([](Tape<double>& tp, Var a, Var b) { return sub(tp, a, b); }));
  ops.emplace_back("mul", binary([](Tape<double>& tp, Var a, Var b) { return mul(tp, a, b); }));
  ops.emplace_back("scalar_mul", [&](std::mt19937_64& rng) {
    OpInstance in;
    in.inputs = {randn(rng, shape3(rng))};
    double c = std::normal_distribution<double>()(rng);
    in.apply = [c](Tape<double>& tp, const std::vector<Var>& l) {
      return scalar_mul(tp, l[0], c);
    };
    return in;
  });
  ops.emplace_back("add_bcast", [&](std::mt19937_64& rng) {
    Shape s = shape3(rng);
    OpInstance in;
    in.inputs = {randn(rng, s), randn(rng, {s[1], s[2]})};
    in.apply = [](Tape<double>& tp, const std::vector<Var>& l) {
      return add_bcast(tp, l[0], l[1]);
    };
    return in;
  });
  ops.emplace_back("reshape", [&](std::mt19937_64& rng) {
    Shape s = shape3(rng);
    OpInstance in;
    in.inputs = {randn(rng, s)};
    Shape target{s[0] * s[1], s[2]};
    in.apply = [target](Tape<double>& tp, const std::vector<Var>& l) {
      return reshape(tp, l[0], target);
    };
    return in;
  });
  ops.emplace_back("permute", [&](std::mt19937_64& rng) {
    OpInstance in;
    in.inputs = {randn(rng, shape3(rng))};
    std::vector<int> axes{0, 1, 2};
    std::shuffle(axes.begin(), axes.end(), rng);
    in.apply = [axes](Tape<double>& tp, const std::vector<Var>& l) {
      return permute(tp, l[0], axes);
    };
    return in;
  });
  ops.emplace_back("prepend_token", [&](std::mt19937_64& rng) {
    Shape s = shape3(rng);
    OpInstance in;
    in.inputs = {randn(rng, s), randn(rng, {s[2]})};
    in.apply = [](Tape<double>& tp, const std::vector<Var>& l) {
      return prepend_token(tp, l[0], l[1]);
    };
    return in;
  });
  ops.emplace_back("select_token", [&](std::mt19937_64& rng) {
    Shape s = shape3(rng);
    OpInstance in;
    in.inputs = {randn(rng, s)};
    int64_t idx = static_cast<int64_t>(rng() % static_cast<uint64_t>(s[1]));
    in.apply = [idx](Tape<double>& tp, const std::vector<Var>& l) {
      return select_token(tp, l[0], idx);
    };
    return in;
  });
  for (bool tb : {false, true}) {
    ops.emplace_back(tb ? "matmul_t" : "matmul", [tb](std::mt19937_64& rng) {
      int64_t m = 2 + static_cast<int64_t>(rng() % 3);
      int64_t k = 2 + static_cast<int64_t>(rng() % 3);
      int64_t n = 2 + static_cast<int64_t>(rng() % 3);
      OpInstance in;
      in.inputs = {randn(rng, {m, k}), tb ? randn(rng, {n, k}) : randn(rng, {k, n})};
      in.apply = [tb](Tape<double>& tp, const std::vector<Var>& l) {
        return matmul(tp, l[0], l[1], tb);
      };
      return in;
    });
  }
  ops.emplace_back("gelu", [&](std::mt19937_64& rng) {
    OpInstance in;
    in.inputs = {randn(rng, shape3(rng))};
    in.apply = [](Tape<double>& tp, const std::vector<Var>& l) { return gelu(tp, l[0]); };
    return in;
  });
  ops.emplace_back("relu", [&](std::mt19937_64& rng) {
    OpInstance in;
    TensorD x = randn(rng, shape3(rng));
    push_away(x, 0.0, 1e-3);
    in.inputs = {std::move(x)};
    in.apply = [](Tape<double>& tp, const std::vector<Var>& l) { return relu(tp, l[0]); };
    return in;
  });
  ops.emplace_back("clamp_max", [&](std::mt19937_64& rng) {
    OpInstance in;
    TensorD x = randn(rng, shape3(rng));
    double cap = 0.5;
    push_away(x, cap, 1e-3);
    in.inputs = {std::move(x)};
    in.apply = [cap](Tape<double>& tp, const std::vector<Var>& l) {
      return clamp_max(tp, l[0], cap);
    };
    return in;
  });
  ops.emplace_back("softmax_lastdim", [&](std::mt19937_64& rng) {
    OpInstance in;
    in.inputs = {randn(rng, shape3(rng))};
    in.apply = [](Tape<double>& tp, const std::vector<Var>& l) {
      return softmax_lastdim(tp, l[0]);
    };
    return in;
  });
  ops.emplace_back("layernorm", [&](std::mt19937_64& rng) {
    Shape s = shape3(rng);
    OpInstance in;
    in.inputs = {randn(rng, s), randn(rng, {s[2]}), randn(rng, {s[2]})};
    in.apply = [](Tape<double>& tp, const std::vector<Var>& l) {
      return layernorm(tp, l[0], l[1], l[2]);
    };
    return in;
  });
  ops.emplace_back("sum_all", [&](std::mt19937_64& rng) {
    OpInstance in;
    in.inputs = {randn(rng, shape3(rng))};
    in.apply = [](Tape<double>& tp, const std::vector<Var>& l) {
      return sum_all(tp, l[0]);
    };
    return in;
  });
  ops.emplace_back("weighted_sse", [&](std::mt19937_64& rng) {
    Shape s = shape3(rng);
    OpInstance in;
    in.inputs = {randn(rng, s), randn(rng, s)};
    TensorD w = randn(rng, s);
    for (auto& v : w.data) v = std::abs(v) + 0.1;
    in.apply = [w](Tape<double>& tp, const std::vector<Var>& l) {
      return weighted_sse(tp, l[0], l[1], tp.constant(w));
    };
    return in;
  });
  ops.emplace_back("kl_divergence_logits", [&](std::mt19937_64& rng) {
    Shape s{2 + static_cast<int64_t>(rng() % 3), 3 + static_cast<int64_t>(rng() % 5)};
    OpInstance in;
    in.inputs = {randn(rng, s)};
    TensorD teacher = randn(rng, s);
    in.apply = [teacher](Tape<double>& tp, const std::vector<Var>& l) {
      return kl_divergence_logits(tp, l[0], tp.constant(teacher));
    };
    return in;
  });
  ops.emplace_back("smooth_l1", [&](std::mt19937_64& rng) {
    Shape s = shape3(rng);
    OpInstance in;
    TensorD a = randn(rng, s), b = randn(rng, s);
    // keep |a-b| away from the quadratic/linear switch point
    for (int64_t i = 0; i < a.numel(); ++i) {
      double d = a.at(i) - b.at(i);
      if (std::abs(std::abs(d) - 1.0) < 1e-3)
        a.at(i) = b.at(i) + (d >= 0 ? 1.0 : -1.0) * 1.01;
    }
    in.inputs = {std::move(a), std::move(b)};
    in.apply = [](Tape<double>& tp, const std::vector<Var>& l) {
      return smooth_l1(tp, l[0], l[1]);
    };
    return in;
  });
  ops.emplace_back("softmax_cross_entropy", [&](std::mt19937_64& rng) {
    int64_t n = 2 + static_cast<int64_t>(rng() % 3);
    int64_t c = 3 + static_cast<int64_t>(rng() % 5);
    OpInstance in;
    in.inputs = {randn(rng, {n, c})};
    std::vector<int> labels;
    for (int64_t i = 0; i < n; ++i)
      labels.push_back(static_cast<int>(rng() % static_cast<uint64_t>(c)));
    in.apply = [labels](Tape<double>& tp, const std::vector<Var>& l) {
      return softmax_cross_entropy(tp, l[0], labels);
    };
    return in;
  });

  auto t0 = std::chrono::steady_clock::now();
  int total_bad = 0;
  std::string bad_ops;
  for (auto& [name, gen] : ops) {
    std::mt19937_64 rng(std::hash<std::string>{}(name));
    int bad = 0;
    for (int it = 0; it < 100; ++it) {
      OpInstance inst = gen(rng);
      bad += check_instance(inst, rng);
    }
    if (bad) {
      total_bad += bad;
      bad_ops += " " + name + "(" + std::to_string(bad) + ")";
    }
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  verdict(9, total_bad == 0,
          std::to_string(ops.size()) +
              " primitives x 100 random instances, central-difference rel tol 1e-3; "
              "failed coordinates: " +
              std::to_string(total_bad) + (bad_ops.empty() ? "" : " in" + bad_ops) +
              " (" + fmt(secs) + "s)");
}

}  // namespace

// Uniform affine quantizer, learnable rounding, and stochastic activation
// substitution: worked examples plus randomized property suites.

#include <gtest/gtest.h>

#include <random>

#include "aphq/quant.hpp"
#include "aphq/tensor.hpp"

using namespace aphq;

namespace {
Tensor randt(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::zeros(std::move(s));
  for (auto& v : t.data) v = static_cast<float>(u(rng));
  return t;
}
}  // namespace

TEST(Round, HalfAwayFromZero) {
  EXPECT_DOUBLE_EQ(qround(0.5), 1.0);
  EXPECT_DOUBLE_EQ(qround(-0.5), -1.0);
  EXPECT_DOUBLE_EQ(qround(2.5), 3.0);
  EXPECT_DOUBLE_EQ(qround(-2.5), -3.0);
  EXPECT_DOUBLE_EQ(qround(3.4), 3.0);
}

TEST(QuantParams, Validation) {
  QuantParams q;
  q.bits = 4;
  q.is_signed = false;
  q.scale = {1.0};
  q.zero_point = {0};
  EXPECT_TRUE(q.valid());
  EXPECT_EQ(q.qmin(), 0);
  EXPECT_EQ(q.qmax(), 15);
  q.is_signed = true;
  EXPECT_EQ(q.qmin(), -8);
  EXPECT_EQ(q.qmax(), 7);
  q.zero_point = {100};
  EXPECT_FALSE(q.valid());
  q.zero_point = {0};
  q.scale = {0.0};
  EXPECT_FALSE(q.valid());
  q.scale = {1.0};
  q.bits = 1;
  EXPECT_FALSE(q.valid());
  q.bits = 9;
  EXPECT_FALSE(q.valid());
}

TEST(Calibrate, ExactUniformRange) {
  // values covering [0, 15] with 4 unsigned bits fit with scale 1, zp 0
  Tensor x = Tensor::zeros({16});
  for (int i = 0; i < 16; ++i) x.at(i) = static_cast<float>(i);
  QuantParams q = calibrate_quant_params(x, 4, Granularity::kPerTensor, 1.0, false);
  ASSERT_TRUE(q.valid());
  EXPECT_DOUBLE_EQ(q.scale[0], 1.0);
  EXPECT_EQ(q.zero_point[0], 0);
  // brute-force: no candidate (scale, zp) on a grid beats the fitted range
  auto sse = [&](double s, int z) {
    double acc = 0;
    for (float v : x.data) {
      double qv = std::min(std::max(qround(v / s) + z, 0.0), 15.0);
      double d = s * (qv - z) - v;
      acc += d * d;
    }
    return acc;
  };
  double fitted = sse(q.scale[0], q.zero_point[0]);
  for (double s = 0.25; s <= 2.0; s += 0.25)
    for (int z = 0; z <= 15; z += 3) EXPECT_LE(fitted, sse(s, z) + 1e-9);
}

TEST(Calibrate, ConstantTensorDegenerates) {
  Tensor x = Tensor::full({32}, 7.5f);
  QuantParams q = calibrate_quant_params(x, 8, Granularity::kPerTensor, 1.0, false);
  ASSERT_TRUE(q.valid());
  EXPECT_DOUBLE_EQ(q.scale[0], kScaleFloor);
  EXPECT_EQ(q.zero_point[0], 128);  // centered in [0, 255]
  // all-zero input quantizes to exactly zero
  Tensor z = Tensor::zeros({8});
  QuantParams qz = calibrate_quant_params(z, 8, Granularity::kPerTensor, 1.0, true);
  Tensor fz = fake_quantize(z, qz);
  for (float v : fz.data) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(Calibrate, SymmetricSignedWeights) {
  const double s = 0.25;
  Tensor x = Tensor::zeros({16});
  for (int i = 0; i < 16; ++i) x.at(i) = static_cast<float>((i - 8) * s);  // [-8s, 7s]
  QuantParams q = calibrate_quant_params(x, 4, Granularity::kPerTensor, 1.0, true);
  EXPECT_NEAR(q.scale[0], s, 1e-9);
  EXPECT_EQ(q.zero_point[0], 0);
}

TEST(Calibrate, PerChannelUsesLastAxis) {
  // two output channels with very different ranges
  Tensor w = Tensor::zeros({4, 2});
  for (int r = 0; r < 4; ++r) {
    w.at(r * 2 + 0) = static_cast<float>(r) * 0.1f;
    w.at(r * 2 + 1) = static_cast<float>(r) * 10.0f;
  }
  QuantParams q = calibrate_quant_params(w, 8, Granularity::kPerChannel, 1.0, true);
  ASSERT_EQ(q.scale.size(), 2u);
  EXPECT_LT(q.scale[0], q.scale[1]);
  EXPECT_NEAR(q.scale[1] / q.scale[0], 100.0, 1e-3);
}

TEST(Calibrate, QuantileClipTightensRange) {
  std::mt19937_64 rng(3);
  Tensor x = randt({1000}, rng, -1.0, 1.0);
  x.at(0) = 1000.0f;  // single outlier
  QuantParams clipped = calibrate_quant_params(x, 8, Granularity::kPerTensor, 0.99, false);
  QuantParams exact = calibrate_quant_params(x, 8, Granularity::kPerTensor, 1.0, false);
  EXPECT_LT(clipped.scale[0], exact.scale[0] / 10.0);
}

TEST(FakeQuantize, WorkedExamples) {
  QuantParams q;
  q.bits = 4;
  q.is_signed = false;
  q.scale = {1.0};
  q.zero_point = {0};
  Tensor x({3}, {0.0f, 3.4f, 100.0f});
  Tensor y = fake_quantize(x, q);
  EXPECT_FLOAT_EQ(y.at(0), 0.0f);
  EXPECT_FLOAT_EQ(y.at(1), 3.0f);
  EXPECT_FLOAT_EQ(y.at(2), 15.0f);
}

TEST(FakeQuantize, PropertySuite) {
  // >= 1000 randomized cases: idempotence, cardinality, error bound
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> bits_d(2, 8);
  int cases = 0;
  for (int trial = 0; trial < 300; ++trial) {
    int bits = bits_d(rng);
    bool is_signed = trial % 2 == 0;
    bool per_chan = trial % 3 == 0;
    Tensor x = randt({8, 6}, rng, is_signed ? -4.0 : 0.0, 4.0);
    QuantParams q = calibrate_quant_params(
        x, bits, per_chan ? Granularity::kPerChannel : Granularity::kPerTensor, 1.0,
        is_signed);
    ASSERT_TRUE(q.valid());
    Tensor y = fake_quantize(x, q);
    Tensor y2 = fake_quantize(y, q);
    for (int64_t i = 0; i < y.numel(); ++i) {
      ASSERT_FLOAT_EQ(y.at(i), y2.at(i)) << "idempotence, trial " << trial;
      size_t c = per_chan ? static_cast<size_t>(i % 6) : 0;
      double s = q.scale[c];
      double lo = s * (q.qmin() - q.zero_point[c]);
      double hi = s * (q.qmax() - q.zero_point[c]);
      double xv = static_cast<double>(x.at(i));
      if (xv >= lo && xv <= hi)
        ASSERT_LE(std::abs(xv - static_cast<double>(y.at(i))), s / 2.0 + 1e-6)
            << "error bound, trial " << trial;
      ++cases;
    }
    // distinct codes per channel group never exceed 2^bits
    for (int64_t c = 0; c < (per_chan ? 6 : 1); ++c) {
      std::vector<float> vals;
      for (int64_t i = 0; i < y.numel(); ++i)
        if (!per_chan || i % 6 == c) vals.push_back(y.at(i));
      std::sort(vals.begin(), vals.end());
      vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
      ASSERT_LE(static_cast<int64_t>(vals.size()), int64_t(1) << bits);
    }
  }
  EXPECT_GE(cases, 1000);
}

TEST(AdaRound, InitializationIdentity) {
  std::mt19937_64 rng(5);
  Tensor w = randt({12, 8}, rng, -0.8, 0.8);
  QuantParams q = calibrate_quant_params(w, 4, Granularity::kPerChannel, 1.0, true);
  AdaRoundState st = init_adaround(w, q);
  for (int64_t i = 0; i < w.numel(); ++i) {
    double u = static_cast<double>(w.at(i)) / q.scale[static_cast<size_t>(i % 8)];
    double frac = u - std::floor(u);
    EXPECT_NEAR(st.h(static_cast<double>(st.v.at(i))), frac, 1e-5);
  }
  Tensor soft = adaround_weight(w, q, st, false);
  for (int64_t i = 0; i < w.numel(); ++i) {
    double s = q.scale[static_cast<size_t>(i % 8)];
    double code = static_cast<double>(w.at(i)) / s + q.zero_point[static_cast<size_t>(i % 8)];
    if (code > q.qmin() && code < q.qmax())
      EXPECT_NEAR(soft.at(i), w.at(i), 2e-5 * std::max(1.0, static_cast<double>(std::abs(w.at(i)))));
  }
}

TEST(AdaRound, HardThresholdAndBounds) {
  Tensor w({2}, {0.49f, 0.49f});
  QuantParams q;
  q.bits = 4;
  q.is_signed = true;
  q.scale = {1.0};
  q.zero_point = {0};
  AdaRoundState st;
  st.v = Tensor::zeros({2});
  // h(v)=0.9 -> rounds up; h(v)=0.1 -> rounds down
  auto v_for_h = [&](double h) {
    double p = (h - st.gamma) / (st.zeta - st.gamma);
    return static_cast<float>(std::log(p / (1.0 - p)));
  };
  st.v.at(0) = v_for_h(0.9);
  st.v.at(1) = v_for_h(0.1);
  Tensor hard = adaround_weight(w, q, st, true);
  EXPECT_FLOAT_EQ(hard.at(0), 1.0f);
  EXPECT_FLOAT_EQ(hard.at(1), 0.0f);

  std::mt19937_64 rng(6);
  Tensor wr = randt({64}, rng, -0.9, 0.9);
  QuantParams qr = calibrate_quant_params(wr, 4, Granularity::kPerTensor, 1.0, true);
  AdaRoundState str = init_adaround(wr, qr);
  for (bool hard_mode : {false, true}) {
    Tensor out = adaround_weight(wr, qr, str, hard_mode);
    for (int64_t i = 0; i < wr.numel(); ++i) {
      double code = static_cast<double>(wr.at(i)) / qr.scale[0] + qr.zero_point[0];
      if (code > qr.qmin() && code < qr.qmax())
        EXPECT_LE(std::abs(out.at(i) - wr.at(i)), qr.scale[0] + 1e-6);
    }
  }
}

TEST(AdaRound, MonotoneInV) {
  std::mt19937_64 rng(7);
  Tensor w = randt({40}, rng, -0.9, 0.9);
  QuantParams q = calibrate_quant_params(w, 4, Granularity::kPerTensor, 1.0, true);
  AdaRoundState st = init_adaround(w, q);
  AdaRoundState st_hi = st;
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (auto& v : st_hi.v.data) v += static_cast<float>(u(rng));
  for (bool hard_mode : {false, true}) {
    Tensor lo = adaround_weight(w, q, st, hard_mode);
    Tensor hi = adaround_weight(w, q, st_hi, hard_mode);
    for (int64_t i = 0; i < w.numel(); ++i) EXPECT_GE(hi.at(i), lo.at(i) - 1e-7);
  }
}

TEST(QDrop, EndpointsAndConcentration) {
  std::mt19937_64 rng(8);
  Tensor fp = randt({1000}, rng), qt = randt({1000}, rng);
  std::mt19937_64 r1(1);
  Tensor all_q = qdrop_activation(fp, qt, DropConfig(0.0), r1);
  for (int64_t i = 0; i < 1000; ++i) EXPECT_FLOAT_EQ(all_q.at(i), qt.at(i));
  Tensor all_fp = qdrop_activation(fp, qt, DropConfig(1.0), r1);
  for (int64_t i = 0; i < 1000; ++i) EXPECT_FLOAT_EQ(all_fp.at(i), fp.at(i));

  // binomial concentration at p=0.5 with 1e6 elements
  int64_t n = 1000000;
  Tensor ones = Tensor::full({n}, 1.0f), zeros = Tensor::zeros({n});
  std::mt19937_64 r2(2);
  Tensor mix = qdrop_activation(ones, zeros, DropConfig(0.5), r2);
  double mean = sum_f64(mix) / static_cast<double>(n);
  double sigma = 0.5 / std::sqrt(static_cast<double>(n));
  EXPECT_NEAR(mean, 0.5, 3.0 * sigma);

  // fixed seed -> bitwise reproducible
  std::mt19937_64 ra(42), rb(42);
  Tensor a = qdrop_activation(fp, qt, DropConfig(0.5), ra);
  Tensor b = qdrop_activation(fp, qt, DropConfig(0.5), rb);
  EXPECT_EQ(a.data, b.data);

  EXPECT_THROW(DropConfig(1.5), std::invalid_argument);
}

TEST(QuantOps, AdaroundOpMatchesSoftWeight) {
  std::mt19937_64 rng(9);
  Tensor w = randt({6, 4}, rng, -0.7, 0.7);
  QuantParams q = calibrate_quant_params(w, 3, Granularity::kPerChannel, 1.0, true);
  AdaRoundState st = init_adaround(w, q);
  for (auto& v : st.v.data) v += 0.3f;  // move off the identity point
  Tape<float> tp;
  Var vv = tp.leaf(st.v.with_grad());
  Var o = adaround_weight_op(tp, vv, w, q, st);
  Tensor ref = adaround_weight(w, q, st, false);
  for (int64_t i = 0; i < w.numel(); ++i) EXPECT_FLOAT_EQ(tp.val(o).at(i), ref.at(i));

  // gradient wrt V: scale * dh for in-range entries (soft path is smooth)
  Var loss = sum_all(tp, o);
  tp.backward(loss);
  const TensorD* g = tp.grad(vv);
  ASSERT_NE(g, nullptr);
  for (int64_t i = 0; i < w.numel(); ++i) {
    size_t c = static_cast<size_t>(i % 4);
    double code = std::floor(static_cast<double>(w.at(i)) / q.scale[c]) +
                  q.zero_point[c] + st.h(static_cast<double>(st.v.at(i)));
    if (code > q.qmin() && code < q.qmax())
      EXPECT_NEAR(g->at(i), q.scale[c] * st.dh(static_cast<double>(st.v.at(i))), 1e-9);
    else
      EXPECT_DOUBLE_EQ(g->at(i), 0.0);
  }
}

TEST(QuantOps, ActQuantStraightThrough) {
  QuantParams q;
  q.bits = 4;
  q.is_signed = false;
  q.scale = {0.5};
  q.zero_point = {0};
  Tensor x({3}, {1.2f, 3.0f, 100.0f});  // last element clips
  Tape<float> tp;
  Tensor xl = x;
  xl.requires_grad = true;
  Var xv = tp.leaf(std::move(xl));
  Var ls = tp.leaf(Tensor::scalar(std::log(0.5f)).with_grad());
  Var o = fake_quant_act_op(tp, xv, ls, q);
  EXPECT_FLOAT_EQ(tp.val(o).at(0), 1.0f);   // round(2.4)=2 -> 1.0
  EXPECT_FLOAT_EQ(tp.val(o).at(1), 3.0f);
  EXPECT_FLOAT_EQ(tp.val(o).at(2), 7.5f);   // clamp at 15 * 0.5
  Var loss = sum_all(tp, o);
  tp.backward(loss);
  const TensorD* gx = tp.grad(xv);
  ASSERT_NE(gx, nullptr);
  EXPECT_DOUBLE_EQ(gx->at(0), 1.0);  // in range: pass-through
  EXPECT_DOUBLE_EQ(gx->at(2), 0.0);  // clipped: blocked
  // scale gradient: clipped element contributes qmax * s (LSQ form)
  const TensorD* gs = tp.grad(ls);
  ASSERT_NE(gs, nullptr);
  double expect = ((2.0 - 2.4) + (6.0 - 6.0) + 15.0) * 0.5;
  EXPECT_NEAR(gs->at(0), expect, 1e-6);
}

TEST(QuantOps, QdropMixRoutesGradients) {
  Tape<float> tp;
  Tensor a({4}, {1, 2, 3, 4}), b({4}, {10, 20, 30, 40});
  a.requires_grad = b.requires_grad = true;
  Var av = tp.leaf(std::move(a)), bv = tp.leaf(std::move(b));
  Var o = qdrop_mix_op(tp, av, bv, {1, 0, 1, 0});
  EXPECT_FLOAT_EQ(tp.val(o).at(0), 1.0f);
  EXPECT_FLOAT_EQ(tp.val(o).at(1), 20.0f);
  tp.backward(sum_all(tp, o));
  EXPECT_DOUBLE_EQ(tp.grad(av)->at(0), 1.0);
  EXPECT_DOUBLE_EQ(tp.grad(av)->at(1), 0.0);
  EXPECT_DOUBLE_EQ(tp.grad(bv)->at(0), 0.0);
  EXPECT_DOUBLE_EQ(tp.grad(bv)->at(1), 1.0);
}

TEST(QuantOps, RoundingRegularizer) {
  AdaRoundState st;
  st.v = Tensor::zeros({3});
  Tape<float> tp;
  Tensor v({3}, {0.7f, -0.4f, 1.3f});
  v.requires_grad = true;
  Var vv = tp.leaf(std::move(v));
  double beta = 4.0;
  Var reg = adaround_reg_op(tp, vv, st, beta);
  double expect = 0;
  for (float x : {0.7f, -0.4f, 1.3f})
    expect += 1.0 - std::pow(std::abs(2.0 * st.h(x) - 1.0), beta);
  expect *= st.lambda;
  EXPECT_NEAR(tp.val(reg).at(0), expect, 1e-6);

  tp.backward(reg);
  const TensorD* g = tp.grad(vv);
  ASSERT_NE(g, nullptr);
  // finite-difference check (smooth region)
  for (int i = 0; i < 3; ++i) {
    double h = 1e-5;
    auto f = [&](double vi) {
      double hh = st.h(vi);
      return st.lambda * (1.0 - std::pow(std::abs(2.0 * hh - 1.0), beta));
    };
    double base = static_cast<double>(tp.val(vv).at(i));
    double fd = (f(base + h) - f(base - h)) / (2 * h);
    EXPECT_NEAR(g->at(i), fd, 1e-4 * std::max(1.0, std::abs(fd)));
  }
  // annealing schedule endpoints
  EXPECT_DOUBLE_EQ(st.beta_at(0, 100), st.beta_start);
  EXPECT_DOUBLE_EQ(st.beta_at(100, 100), st.beta_end);
  EXPECT_GT(st.beta_at(30, 100), st.beta_at(80, 100));
}

// Command-line driver for the quantization toolkit. Thin shell over the
// library: every subcommand is reachable through the headers with identical
// results. Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "aphq/checkpoint.hpp"
#include "aphq/report.hpp"

using namespace aphq;

namespace {

struct CommonArgs {
  std::string checkpoint;
  std::string dataset;
  std::string config_path;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--checkpoint", a.checkpoint, "input checkpoint path")->required();
  cmd->add_option("--dataset", a.dataset, "dataset directory (index.json + samples)")
      ->required();
  cmd->add_option("--config", a.config_path, "JSON run-config file (defaults overlay)");
}

/// Flags that overlay the run config; only flags the user actually passed
/// override the config file / defaults.
struct ConfigFlags {
  int wbits = 8, abits = 8, iters = 2000, calib = 1024, batch = 32;
  std::string loss = "aph";
  bool mlp_recon = true, qdrop = true;
  uint64_t seed = 1;
  CLI::App* cmd = nullptr;

  void add(CLI::App* c) {
    cmd = c;
    c->add_option("--wbits", wbits, "weight bit-width [2,8]");
    c->add_option("--abits", abits, "activation bit-width [2,8]");
    c->add_option("--iters", iters, "reconstruction iterations per block");
    c->add_option("--calib", calib, "calibration sample count");
    c->add_option("--batch", batch, "mini-batch size");
    c->add_option("--loss", loss, "reconstruction loss: mse|bh|ph|aph");
    c->add_flag("--mlp-recon,!--no-mlp-recon", mlp_recon,
                "enable activation replacement + MLP retraining");
    c->add_flag("--qdrop,!--no-qdrop", qdrop, "enable stochastic activation dropping");
    c->add_option("--seed", seed, "run seed");
  }

  ReconstructionConfig resolve(const std::string& config_path) const {
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) {
      auto buf = detail::read_file(config_path);
      j = nlohmann::json::parse(buf.begin(), buf.end());
    }
    ReconstructionConfig cfg = parse_run_config(j);
    if (cmd->count("--wbits")) cfg.weight_bits = wbits;
    if (cmd->count("--abits")) cfg.act_bits = abits;
    if (cmd->count("--iters")) cfg.iters = iters;
    if (cmd->count("--calib")) cfg.calib_samples = calib;
    if (cmd->count("--batch")) cfg.batch_size = batch;
    if (cmd->count("--loss")) cfg.loss_kind = recon_loss_from_string(loss);
    if (cmd->count("--mlp-recon") || cmd->count("--no-mlp-recon"))
      cfg.enable_mlp_recon = mlp_recon;
    if (cmd->count("--qdrop") || cmd->count("--no-qdrop")) cfg.enable_qdrop = qdrop;
    if (cmd->count("--seed")) cfg.seed = seed;
    cfg.validate();
    return cfg;
  }
};

std::string act_point_name(int p) {
  switch (p) {
    case kActLn1: return "attn_in";
    case kActProbs: return "attn_probs";
    case kActProjIn: return "attn_proj_in";
    case kActLn2: return "mlp_in";
    default: return "mlp_hidden";
  }
}

int cmd_quantize(const CommonArgs& common, const ConfigFlags& flags,
                 const std::string& out_path, const std::string& report_path) {
  ReconstructionConfig cfg = flags.resolve(common.config_path);
  VitModel<float> fp = load_checkpoint(common.checkpoint);
  Dataset ds = load_dataset(common.dataset);
  Tensor calib = load_calibration(ds, std::min<int64_t>(cfg.calib_samples, ds.size()),
                                  cfg.seed);

  auto t0 = std::chrono::steady_clock::now();
  PipelineReport rep;
  QuantizedModel qm = quantize_model(fp, calib, cfg, &rep);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  double fp_acc = evaluate_fp(fp, ds.images, ds.labels);
  double q_acc = evaluate_quantized(qm, ds.images, ds.labels);
  std::printf("fp accuracy        %.6f\n", fp_acc);
  std::printf("quantized accuracy %.6f\n", q_acc);
  std::printf("elapsed            %.1fs\n", secs);

  if (!out_path.empty()) save_quantized_checkpoint(out_path, qm);
  if (!report_path.empty())
    write_text(report_path, make_run_report(cfg, rep, fp_acc, q_acc, secs).dump(2));
  return 0;
}

int cmd_eval(const CommonArgs& common) {
  Dataset ds = load_dataset(common.dataset);
  detail::Container c = detail::read_container(common.checkpoint);
  std::string kind = c.manifest.at("kind").get<std::string>();
  double acc;
  if (kind == "quantized") {
    QuantizedModel qm = load_quantized_checkpoint(common.checkpoint);
    acc = evaluate_quantized(qm, ds.images, ds.labels);
  } else {
    VitModel<float> m = load_checkpoint(common.checkpoint);
    acc = evaluate_fp(m, ds.images, ds.labels);
  }
  std::printf("%s accuracy %.6f (%lld samples)\n", kind.c_str(), acc,
              static_cast<long long>(ds.size()));
  return 0;
}

int cmd_compare_losses(const CommonArgs& common, const ConfigFlags& flags,
                       const std::string& out_path) {
  ReconstructionConfig base = flags.resolve(common.config_path);
  VitModel<float> fp = load_checkpoint(common.checkpoint);
  Dataset ds = load_dataset(common.dataset);
  Tensor calib = load_calibration(ds, std::min<int64_t>(base.calib_samples, ds.size()),
                                  base.seed);
  double fp_acc = evaluate_fp(fp, ds.images, ds.labels);

  std::vector<std::vector<std::string>> rows;
  for (ReconLossKind k : {ReconLossKind::kMse, ReconLossKind::kBh, ReconLossKind::kPh,
                          ReconLossKind::kAph}) {
    for (bool mr : {false, true}) {
      ReconstructionConfig cfg = base;
      cfg.loss_kind = k;
      cfg.enable_mlp_recon = mr;
      QuantizedModel qm = quantize_model(fp, calib, cfg);
      double acc = evaluate_quantized(qm, ds.images, ds.labels);
      std::printf("loss=%-4s mr=%-3s accuracy %.6f\n", to_string(k), mr ? "on" : "off", acc);
      rows.push_back({to_string(k), mr ? "on" : "off", fmt_double(acc),
                      fmt_double(acc - fp_acc)});
    }
  }
  std::string csv = make_csv(config_hash(nlohmann::json(base)), base.seed,
                             {"loss", "mlp_recon", "accuracy", "accuracy_vs_fp"}, rows);
  if (!out_path.empty())
    write_text(out_path, csv);
  else
    std::fputs(csv.c_str(), stdout);
  return 0;
}

int cmd_export_hessian(const CommonArgs& common, const ConfigFlags& flags,
                       const std::string& tokens_path, const std::string& channels_path) {
  ReconstructionConfig cfg = flags.resolve(common.config_path);
  VitModel<float> fp = load_checkpoint(common.checkpoint);
  Dataset ds = load_dataset(common.dataset);
  Tensor calib = load_calibration(ds, std::min<int64_t>(cfg.calib_samples, ds.size()),
                                  cfg.seed);
  std::vector<Tensor> batches;
  for (int64_t off = 0; off < calib.dim(0); off += cfg.batch_size) {
    int64_t B = std::min<int64_t>(cfg.batch_size, calib.dim(0) - off);
    Tensor xb = Tensor::zeros({B, calib.dim(1)});
    std::copy_n(calib.data.begin() + off * calib.dim(1), B * calib.dim(1), xb.data.begin());
    batches.push_back(std::move(xb));
  }
  std::vector<BlockRecord> recs = capture_block_records(fp, batches);
  VitModel<double> md = fp.cast<double>();

  std::vector<std::vector<std::string>> token_rows, channel_rows;
  int64_t t = fp.cfg.tokens(), e = fp.cfg.embed_dim;
  for (int b = 0; b < fp.cfg.depth; ++b) {
    HessianDiagonal h = compute_block_aph(md, b, recs[static_cast<size_t>(b)].outputs,
                                          cfg.perturb, cfg.batch_size,
                                          cfg.seed + 101 * static_cast<uint64_t>(b));
    Tensor w = clamp_nonneg(h.values);
    for (int64_t tok = 0; tok < t; ++tok) {
      double s = 0;
      for (int64_t c = 0; c < e; ++c) s += w.at(tok * e + c);
      token_rows.push_back({std::to_string(b), std::to_string(tok), fmt_double(s / e)});
    }
    for (int64_t c = 0; c < e; ++c) {
      double s = 0;
      for (int64_t tok = 0; tok < t; ++tok) s += w.at(tok * e + c);
      channel_rows.push_back({std::to_string(b), std::to_string(c), fmt_double(s / t)});
    }
  }
  std::string hash = config_hash(nlohmann::json(cfg));
  write_text(tokens_path, make_csv(hash, cfg.seed,
                                   {"block", "token", "mean_importance"}, token_rows));
  write_text(channels_path, make_csv(hash, cfg.seed,
                                     {"block", "channel", "mean_importance"}, channel_rows));
  std::printf("wrote %s and %s\n", tokens_path.c_str(), channels_path.c_str());
  return 0;
}

int cmd_export_ranges(const CommonArgs& common, const ConfigFlags& flags,
                      const std::string& out_path) {
  ReconstructionConfig cfg = flags.resolve(common.config_path);
  VitModel<float> fp = load_checkpoint(common.checkpoint);
  Dataset ds = load_dataset(common.dataset);
  Tensor calib = load_calibration(ds, std::min<int64_t>(cfg.calib_samples, ds.size()),
                                  cfg.seed);

  std::vector<std::vector<std::string>> rows;
  Tape<float> tp;
  Var x = embed_images(tp, fp, calib);
  for (int b = 0; b < fp.cfg.depth; ++b) {
    std::array<std::vector<float>, kNumActPoints> cap;
    BlockRunCtx<float> ctx;
    ctx.act_capture = &cap;
    Tape<float> tpb;
    x = tpb.constant(tp.val(x));
    Var y = run_block(tpb, fp, b, x, ctx);
    for (int p = 0; p < kNumActPoints; ++p) {
      std::vector<double> v(cap[static_cast<size_t>(p)].begin(),
                            cap[static_cast<size_t>(p)].end());
      double lo = *std::min_element(v.begin(), v.end());
      double hi = *std::max_element(v.begin(), v.end());
      double qlo = quantile(std::vector<double>(v), 1.0 - cfg.act_clip_quantile);
      double qhi = quantile(std::move(v), cfg.act_clip_quantile);
      rows.push_back({std::to_string(b), act_point_name(p), fmt_double(lo),
                      fmt_double(hi), fmt_double(qlo), fmt_double(qhi)});
    }
    tp = Tape<float>();
    x = tp.constant(tpb.val(y));
  }
  std::string csv = make_csv(config_hash(nlohmann::json(cfg)), cfg.seed,
                             {"block", "activation", "min", "max", "quantile_lo",
                              "quantile_hi"},
                             rows);
  if (!out_path.empty())
    write_text(out_path, csv);
  else
    std::fputs(csv.c_str(), stdout);
  return 0;
}

int cmd_probe_variance(const CommonArgs& common, const ConfigFlags& flags,
                       int block_index, int num_batches, int curve_iters,
                       const std::string& out_path) {
  ReconstructionConfig cfg = flags.resolve(common.config_path);
  VitModel<float> fp = load_checkpoint(common.checkpoint);
  check(block_index >= 0 && block_index < fp.cfg.depth, "probe-variance: bad --block");
  Dataset ds = load_dataset(common.dataset);
  Tensor calib = load_calibration(ds, std::min<int64_t>(cfg.calib_samples, ds.size()),
                                  cfg.seed);
  std::vector<Tensor> batches = {calib};
  std::vector<BlockRecord> recs = capture_block_records(fp, batches);
  const BlockRecord& rec = recs[static_cast<size_t>(block_index)];

  VarianceProbe p = gradient_variance_probe(fp, block_index, rec.inputs, rec.outputs,
                                            cfg, num_batches, curve_iters, cfg.seed);
  std::printf("per-sample-weight gradient variance %.6e\n", p.ph_variance);
  std::printf("averaged-weight gradient variance   %.6e\n", p.aph_variance);

  std::vector<std::vector<std::string>> rows;
  for (size_t i = 0; i < p.ph_grad.size(); ++i)
    rows.push_back({"grad", std::to_string(i), fmt_double(p.ph_grad[i]),
                    fmt_double(p.aph_grad[i])});
  for (size_t i = 0; i < p.ph_curve.size(); ++i)
    rows.push_back({"curve", std::to_string(i), fmt_double(p.ph_curve[i]),
                    fmt_double(p.aph_curve[i])});
  rows.push_back({"variance", "0", fmt_double(p.ph_variance), fmt_double(p.aph_variance)});
  std::string csv = make_csv(config_hash(nlohmann::json(cfg)), cfg.seed,
                             {"metric", "index", "per_sample", "averaged"}, rows);
  if (!out_path.empty())
    write_text(out_path, csv);
  else
    std::fputs(csv.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"post-training quantization toolkit for the toy ViT"};
  app.require_subcommand(1);

  CommonArgs common;
  ConfigFlags flags;
  std::string out_path, report_path, tokens_path, channels_path;
  int block_index = 0, num_batches = 20, curve_iters = 500;

  CLI::App* quantize = app.add_subcommand("quantize", "run the full quantization pipeline");
  add_common(quantize, common);
  flags.add(quantize);
  quantize->add_option("--out", out_path, "output quantized checkpoint path");
  quantize->add_option("--report", report_path, "output JSON run report path");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a labeled dataset");
  add_common(eval, common);

  CLI::App* compare = app.add_subcommand(
      "compare-losses", "ablation matrix {mse,bh,ph,aph} x {mlp-recon on/off}");
  add_common(compare, common);
  flags.add(compare);
  compare->add_option("--out", out_path, "output CSV path (stdout when omitted)");

  CLI::App* hess = app.add_subcommand("export-hessian",
                                      "per-block token/channel importance tables");
  add_common(hess, common);
  flags.add(hess);
  hess->add_option("--out-tokens", tokens_path, "token importance CSV path")->required();
  hess->add_option("--out-channels", channels_path, "channel importance CSV path")
      ->required();

  CLI::App* ranges = app.add_subcommand("export-ranges",
                                        "per-layer activation ranges and quantiles");
  add_common(ranges, common);
  flags.add(ranges);
  ranges->add_option("--out", out_path, "output CSV path (stdout when omitted)");

  CLI::App* probe = app.add_subcommand(
      "probe-variance", "gradient variance of per-sample vs averaged loss weights");
  add_common(probe, common);
  flags.add(probe);
  probe->add_option("--block", block_index, "block index to probe");
  probe->add_option("--batches", num_batches, "disjoint mini-batches for gradients");
  probe->add_option("--curve-iters", curve_iters, "training-curve iterations");
  probe->add_option("--out", out_path, "output CSV path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (quantize->parsed()) return cmd_quantize(common, flags, out_path, report_path);
    if (eval->parsed()) return cmd_eval(common);
    if (compare->parsed()) return cmd_compare_losses(common, flags, out_path);
    if (hess->parsed()) return cmd_export_hessian(common, flags, tokens_path, channels_path);
    if (ranges->parsed()) return cmd_export_ranges(common, flags, out_path);
    if (probe->parsed())
      return cmd_probe_variance(common, flags, block_index, num_batches, curve_iters,
                                out_path);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return 2;
  }
  return 2;  // unreachable
}

#pragma once

#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aphq/data.hpp"
#include "aphq/mlp_recon.hpp"
#include "aphq/pipeline.hpp"
#include "aphq/serialize.hpp"

namespace aphq {

inline void to_json(nlohmann::json& j, const MlpReconResult& r) {
  j = {{"block", r.block_index},
       {"initial_loss", r.initial_loss},
       {"final_loss", r.final_loss},
       {"clamp_threshold", r.clamp_threshold},
       {"clamp_active", r.clamp_active},
       {"pre_range", {r.pre_range.lo, r.pre_range.hi}},
       {"post_range", {r.post_range.lo, r.post_range.hi}},
       {"iters", r.iters_run}};
}

inline void to_json(nlohmann::json& j, const BlockReconResult& r) {
  j = {{"block", r.block_index},
       {"initial_loss", r.initial_loss},
       {"final_loss", r.final_loss},
       {"diverged", r.diverged},
       {"iters", r.iters_run},
       {"loss_curve", r.loss_curve}};
}

/// Run report: config, provenance, per-block results, metrics, timings.
inline nlohmann::json make_run_report(const ReconstructionConfig& cfg,
                                      const PipelineReport& rep,
                                      double fp_accuracy, double quant_accuracy,
                                      double elapsed_seconds) {
  nlohmann::json jcfg = cfg;
  return {{"config", jcfg},
          {"config_hash", config_hash(jcfg)},
          {"seed", cfg.seed},
          {"mlp_reconstruction", rep.mlp},
          {"block_reconstruction", rep.recon},
          {"accuracy", {{"fp", fp_accuracy}, {"quantized", quant_accuracy}}},
          {"elapsed_seconds", elapsed_seconds}};
}

/// CSV with a provenance comment line followed by the header row.
/// Every emitted table embeds the config hash and seed of the run.
inline std::string make_csv(const std::string& hash, uint64_t seed,
                            const std::vector<std::string>& header,
                            const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream os;
  os << "# config_hash=" << hash << " seed=" << seed << "\n";
  for (size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << "\n";
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
    os << "\n";
  }
  return os.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  detail::write_file_atomic(path, text.data(), text.size());
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace aphq

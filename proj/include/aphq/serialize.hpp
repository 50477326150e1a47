#pragma once

#include <cstdio>
#include <string>

#include <json.hpp>

#include "aphq/pipeline.hpp"

namespace aphq {

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Hash of a canonical (sorted-key) JSON dump; stamps every report.
inline std::string config_hash(const nlohmann::json& j) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

// --- enum <-> string -------------------------------------------------------

inline std::string to_string(Activation a) {
  return a == Activation::kGelu ? "gelu" : "relu";
}
inline Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::kGelu;
  if (s == "relu") return Activation::kRelu;
  throw std::invalid_argument("unknown activation: " + s);
}

inline std::string to_string(PerturbDirection d) {
  return d == PerturbDirection::kUniform ? "uniform" : "sign-probe";
}
inline PerturbDirection direction_from_string(const std::string& s) {
  if (s == "uniform") return PerturbDirection::kUniform;
  if (s == "sign-probe") return PerturbDirection::kSignProbe;
  throw std::invalid_argument("unknown perturbation direction: " + s);
}

inline std::string to_string(DistillLossKind k) {
  return k == DistillLossKind::kKlClassification ? "kl" : "kl+smooth-l1";
}
inline DistillLossKind distill_loss_from_string(const std::string& s) {
  if (s == "kl") return DistillLossKind::kKlClassification;
  if (s == "kl+smooth-l1") return DistillLossKind::kKlPlusSmoothL1;
  throw std::invalid_argument("unknown distillation loss: " + s);
}

// --- to_json / from_json (ADL hooks for nlohmann::json) --------------------

inline void to_json(nlohmann::json& j, const ViTConfig& c) {
  j = {{"image_size", c.image_size}, {"patch_size", c.patch_size},
       {"channels", c.channels},     {"embed_dim", c.embed_dim},
       {"depth", c.depth},           {"heads", c.heads},
       {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}};
}
inline void from_json(const nlohmann::json& j, ViTConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("patch_size").get_to(c.patch_size);
  j.at("channels").get_to(c.channels);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("depth").get_to(c.depth);
  j.at("heads").get_to(c.heads);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("num_classes").get_to(c.num_classes);
  c.validate();
}

inline void to_json(nlohmann::json& j, const QuantParams& q) {
  j = {{"bits", q.bits},
       {"signed", q.is_signed},
       {"granularity", q.granularity == Granularity::kPerChannel ? "per-channel" : "per-tensor"},
       {"scale", q.scale},
       {"zero_point", q.zero_point}};
}
inline void from_json(const nlohmann::json& j, QuantParams& q) {
  j.at("bits").get_to(q.bits);
  j.at("signed").get_to(q.is_signed);
  std::string g = j.at("granularity").get<std::string>();
  if (g == "per-channel")
    q.granularity = Granularity::kPerChannel;
  else if (g == "per-tensor")
    q.granularity = Granularity::kPerTensor;
  else
    throw std::invalid_argument("unknown granularity: " + g);
  j.at("scale").get_to(q.scale);
  j.at("zero_point").get_to(q.zero_point);
  check(q.valid(), "deserialized QuantParams invalid");
}

inline void to_json(nlohmann::json& j, const PerturbationConfig& c) {
  j = {{"delta", c.delta},
       {"loss", to_string(c.loss_kind)},
       {"direction", to_string(c.direction)},
       {"probes", c.probes}};
}
inline void from_json(const nlohmann::json& j, PerturbationConfig& c) {
  j.at("delta").get_to(c.delta);
  c.loss_kind = distill_loss_from_string(j.at("loss").get<std::string>());
  c.direction = direction_from_string(j.at("direction").get<std::string>());
  j.at("probes").get_to(c.probes);
  c.validate();
}

inline void to_json(nlohmann::json& j, const MlpReconConfig& c) {
  j = {{"alpha", c.alpha},
       {"clamp_quantile", c.clamp_quantile},
       {"lr", c.lr},
       {"iters", c.iters},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"per_batch_threshold", c.per_batch_threshold}};
}
inline void from_json(const nlohmann::json& j, MlpReconConfig& c) {
  j.at("alpha").get_to(c.alpha);
  j.at("clamp_quantile").get_to(c.clamp_quantile);
  j.at("lr").get_to(c.lr);
  j.at("iters").get_to(c.iters);
  j.at("batch_size").get_to(c.batch_size);
  j.at("seed").get_to(c.seed);
  j.at("per_batch_threshold").get_to(c.per_batch_threshold);
  c.validate();
}

inline void to_json(nlohmann::json& j, const ReconstructionConfig& c) {
  j = {{"weight_bits", c.weight_bits},
       {"act_bits", c.act_bits},
       {"batch_size", c.batch_size},
       {"lr_weight", c.lr_weight},
       {"lr_act", c.lr_act},
       {"iters", c.iters},
       {"loss_kind", to_string(c.loss_kind)},
       {"calib_samples", c.calib_samples},
       {"act_clip_quantile", c.act_clip_quantile},
       {"enable_mlp_recon", c.enable_mlp_recon},
       {"enable_qdrop", c.enable_qdrop},
       {"drop_probability", c.drop_probability},
       {"perturb", c.perturb},
       {"mlp", c.mlp},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, ReconstructionConfig& c) {
  j.at("weight_bits").get_to(c.weight_bits);
  j.at("act_bits").get_to(c.act_bits);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr_weight").get_to(c.lr_weight);
  j.at("lr_act").get_to(c.lr_act);
  j.at("iters").get_to(c.iters);
  c.loss_kind = recon_loss_from_string(j.at("loss_kind").get<std::string>());
  j.at("calib_samples").get_to(c.calib_samples);
  j.at("act_clip_quantile").get_to(c.act_clip_quantile);
  j.at("enable_mlp_recon").get_to(c.enable_mlp_recon);
  j.at("enable_qdrop").get_to(c.enable_qdrop);
  j.at("drop_probability").get_to(c.drop_probability);
  j.at("perturb").get_to(c.perturb);
  j.at("mlp").get_to(c.mlp);
  j.at("seed").get_to(c.seed);
  c.validate();
}

/// Strict parse: every key in `j` must be consumed by the schema of T.
namespace detail {
inline void reject_unknown_keys(const nlohmann::json& j, const nlohmann::json& schema,
                                const std::string& where) {
  check(j.is_object(), "config section " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    check(schema.contains(it.key()), "unknown config key: " + where + it.key());
    if (it.value().is_object())
      reject_unknown_keys(it.value(), schema.at(it.key()), where + it.key() + ".");
  }
}
}  // namespace detail

/// Parses a ReconstructionConfig from JSON, tolerating omitted keys (they
/// keep their defaults) but rejecting unknown ones.
inline ReconstructionConfig parse_run_config(const nlohmann::json& j) {
  ReconstructionConfig defaults;
  nlohmann::json schema = defaults;
  detail::reject_unknown_keys(j, schema, "");
  schema.merge_patch(j);  // overlay provided keys on the defaults
  return schema.get<ReconstructionConfig>();
}

}  // namespace aphq

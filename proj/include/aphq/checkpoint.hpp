#pragma once

#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "aphq/data.hpp"  // write_file_atomic / read_file
#include "aphq/pipeline.hpp"
#include "aphq/serialize.hpp"

namespace aphq {

// Container layout: 8-byte magic, u64-LE manifest length, UTF-8 JSON
// manifest, then the payload of concatenated raw little-endian f32 tensors.
inline constexpr char kCkptMagic[8] = {'Q', 'V', 'I', 'T', 'C', 'K', 'P', 'T'};
inline constexpr int kCkptVersion = 1;

namespace detail {

using NamedTensor = std::pair<std::string, const Tensor*>;

inline void gather_model(const VitModel<float>& m, std::vector<NamedTensor>& out) {
  out.emplace_back("patch_w", &m.patch_w);
  out.emplace_back("patch_b", &m.patch_b);
  out.emplace_back("cls_token", &m.cls_token);
  out.emplace_back("pos_emb", &m.pos_emb);
  for (size_t b = 0; b < m.blocks.size(); ++b) {
    const BlockParams<float>& blk = m.blocks[b];
    std::string p = "blocks." + std::to_string(b) + ".";
    out.emplace_back(p + "ln1_g", &blk.ln1_g);
    out.emplace_back(p + "ln1_b", &blk.ln1_b);
    out.emplace_back(p + "wq", &blk.wq);
    out.emplace_back(p + "bq", &blk.bq);
    out.emplace_back(p + "wk", &blk.wk);
    out.emplace_back(p + "bk", &blk.bk);
    out.emplace_back(p + "wv", &blk.wv);
    out.emplace_back(p + "bv", &blk.bv);
    out.emplace_back(p + "wo", &blk.wo);
    out.emplace_back(p + "bo", &blk.bo);
    out.emplace_back(p + "ln2_g", &blk.ln2_g);
    out.emplace_back(p + "ln2_b", &blk.ln2_b);
    out.emplace_back(p + "w1", &blk.w1);
    out.emplace_back(p + "b1", &blk.b1);
    out.emplace_back(p + "w2", &blk.w2);
    out.emplace_back(p + "b2", &blk.b2);
  }
  out.emplace_back("lnf_g", &m.lnf_g);
  out.emplace_back("lnf_b", &m.lnf_b);
  out.emplace_back("head_w", &m.head_w);
  out.emplace_back("head_b", &m.head_b);
}

// Mutable mirror of gather_model for loading; ordering must match.
inline void gather_model_mut(VitModel<float>& m, std::vector<std::pair<std::string, Tensor*>>& out) {
  std::vector<NamedTensor> c;
  gather_model(m, c);
  out.clear();
  for (auto& [n, t] : c) out.emplace_back(n, const_cast<Tensor*>(t));
}

inline void write_container(const std::string& path, const nlohmann::json& manifest,
                            const std::vector<char>& payload) {
  std::string mtext = manifest.dump();
  std::vector<char> buf;
  buf.reserve(8 + 8 + mtext.size() + payload.size());
  buf.insert(buf.end(), kCkptMagic, kCkptMagic + 8);
  uint64_t mlen = mtext.size();
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((mlen >> (8 * i)) & 0xff));
  buf.insert(buf.end(), mtext.begin(), mtext.end());
  buf.insert(buf.end(), payload.begin(), payload.end());
  write_file_atomic(path, buf.data(), buf.size());
}

struct Container {
  nlohmann::json manifest;
  std::vector<char> payload;
};

inline Container read_container(const std::string& path) {
  auto buf = read_file(path);
  check(buf.size() >= 16 && std::memcmp(buf.data(), kCkptMagic, 8) == 0,
        "not a checkpoint container: " + path);
  uint64_t mlen = 0;
  for (int i = 0; i < 8; ++i)
    mlen |= static_cast<uint64_t>(static_cast<unsigned char>(buf[8 + i])) << (8 * i);
  check(buf.size() >= 16 + mlen, "truncated manifest: " + path);
  Container c;
  c.manifest = nlohmann::json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<long>(mlen));
  int ver = c.manifest.at("format_version").get<int>();
  check(ver == kCkptVersion, "unsupported checkpoint format version " +
                                 std::to_string(ver) + " in " + path);
  c.payload.assign(buf.begin() + 16 + static_cast<long>(mlen), buf.end());
  return c;
}

inline nlohmann::json tensor_directory(const std::vector<NamedTensor>& tensors,
                                       std::vector<char>& payload) {
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    size_t off = payload.size();
    size_t len = t->data.size() * sizeof(float);
    payload.resize(off + len);
    std::memcpy(payload.data() + off, t->data.data(), len);
    dir.push_back({{"name", name},
                   {"shape", t->shape},
                   {"dtype", "f32"},
                   {"offset", off},
                   {"length", len}});
  }
  return dir;
}

inline void read_tensors(const Container& c,
                         const std::vector<std::pair<std::string, Tensor*>>& tensors) {
  const auto& dir = c.manifest.at("tensors");
  check(dir.size() == tensors.size(), "tensor directory size mismatch");
  size_t prev_end = 0;
  for (size_t i = 0; i < tensors.size(); ++i) {
    const auto& rec = dir[i];
    check(rec.at("name").get<std::string>() == tensors[i].first,
          "unexpected tensor name: " + rec.at("name").get<std::string>());
    check(rec.at("dtype").get<std::string>() == "f32", "unsupported dtype");
    Shape shape = rec.at("shape").get<Shape>();
    size_t off = rec.at("offset").get<size_t>();
    size_t len = rec.at("length").get<size_t>();
    check(off == prev_end, "overlapping or out-of-order tensor blobs");
    check(off + len <= c.payload.size(), "truncated payload");
    check(len == static_cast<size_t>(shape_numel(shape)) * sizeof(float),
          "tensor length/shape mismatch: " + tensors[i].first);
    prev_end = off + len;
    Tensor t = Tensor::zeros(shape);
    std::memcpy(t.data.data(), c.payload.data() + off, len);
    *tensors[i].second = std::move(t);
  }
  check(prev_end == c.payload.size(), "trailing bytes in payload");
}

inline nlohmann::json activations_of(const VitModel<float>& m) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& b : m.blocks) a.push_back(to_string(b.act));
  return a;
}
}  // namespace detail

/// Saves a full-precision model. Byte output is deterministic for identical
/// input.
inline void save_checkpoint(const std::string& path, const VitModel<float>& m,
                            uint64_t seed = 0) {
  m.cfg.validate();
  std::vector<detail::NamedTensor> tensors;
  detail::gather_model(m, tensors);
  std::vector<char> payload;
  nlohmann::json manifest = {
      {"format_version", kCkptVersion},
      {"kind", "fp"},
      {"vit_config", m.cfg},
      {"activations", detail::activations_of(m)},
      {"tensors", detail::tensor_directory(tensors, payload)},
  };
  manifest["provenance"] = {{"config_hash", config_hash(manifest.at("vit_config"))},
                            {"seed", seed}};
  detail::write_container(path, manifest, payload);
}

inline VitModel<float> load_checkpoint(const std::string& path) {
  detail::Container c = detail::read_container(path);
  check(c.manifest.at("kind").get<std::string>() == "fp",
        "expected a full-precision checkpoint: " + path);
  VitModel<float> m;
  m.cfg = c.manifest.at("vit_config").get<ViTConfig>();
  m.blocks.resize(static_cast<size_t>(m.cfg.depth));
  std::vector<std::pair<std::string, Tensor*>> tensors;
  detail::gather_model_mut(m, tensors);
  detail::read_tensors(c, tensors);
  const auto& acts = c.manifest.at("activations");
  check(acts.size() == m.blocks.size(), "activation list size mismatch");
  for (size_t b = 0; b < m.blocks.size(); ++b)
    m.blocks[b].act = activation_from_string(acts[b].get<std::string>());
  return m;
}

/// Saves a quantized model: float parameters, hardened weights, and all
/// quantizer records.
inline void save_quantized_checkpoint(const std::string& path, const QuantizedModel& qm) {
  qm.model.cfg.validate();
  std::vector<detail::NamedTensor> tensors;
  detail::gather_model(qm.model, tensors);
  for (size_t b = 0; b < qm.blocks.size(); ++b)
    for (int s = 0; s < kNumWeightSlots; ++s)
      tensors.emplace_back("blocks." + std::to_string(b) + ".hardened." + std::to_string(s),
                           &qm.blocks[b].hardened[static_cast<size_t>(s)]);
  tensors.emplace_back("patch_w_q", &qm.patch_w_q);
  tensors.emplace_back("head_w_q", &qm.head_w_q);

  nlohmann::json quant;
  quant["blocks"] = nlohmann::json::array();
  for (const auto& bq : qm.blocks) {
    nlohmann::json jb;
    jb["weight_qp"] = bq.weight_qp;
    jb["act_qp"] = bq.act_qp;
    jb["diverged"] = bq.diverged;
    quant["blocks"].push_back(std::move(jb));
  }
  quant["patch_qp"] = qm.patch_qp;
  quant["head_qp"] = qm.head_qp;

  std::vector<char> payload;
  nlohmann::json manifest = {
      {"format_version", kCkptVersion},
      {"kind", "quantized"},
      {"vit_config", qm.model.cfg},
      {"activations", detail::activations_of(qm.model)},
      {"recon_config", qm.cfg},
      {"quant", std::move(quant)},
      {"tensors", detail::tensor_directory(tensors, payload)},
  };
  nlohmann::json hashed = {{"vit_config", manifest.at("vit_config")},
                           {"recon_config", manifest.at("recon_config")}};
  manifest["provenance"] = {{"config_hash", config_hash(hashed)}, {"seed", qm.cfg.seed}};
  detail::write_container(path, manifest, payload);
}

inline QuantizedModel load_quantized_checkpoint(const std::string& path) {
  detail::Container c = detail::read_container(path);
  check(c.manifest.at("kind").get<std::string>() == "quantized",
        "expected a quantized checkpoint: " + path);
  QuantizedModel qm;
  qm.model.cfg = c.manifest.at("vit_config").get<ViTConfig>();
  qm.model.blocks.resize(static_cast<size_t>(qm.model.cfg.depth));
  qm.cfg = c.manifest.at("recon_config").get<ReconstructionConfig>();
  qm.blocks.resize(qm.model.blocks.size());

  std::vector<std::pair<std::string, Tensor*>> tensors;
  detail::gather_model_mut(qm.model, tensors);
  for (size_t b = 0; b < qm.blocks.size(); ++b)
    for (int s = 0; s < kNumWeightSlots; ++s)
      tensors.emplace_back("blocks." + std::to_string(b) + ".hardened." + std::to_string(s),
                           &qm.blocks[b].hardened[static_cast<size_t>(s)]);
  tensors.emplace_back("patch_w_q", &qm.patch_w_q);
  tensors.emplace_back("head_w_q", &qm.head_w_q);
  detail::read_tensors(c, tensors);

  const auto& acts = c.manifest.at("activations");
  for (size_t b = 0; b < qm.model.blocks.size(); ++b)
    qm.model.blocks[b].act = activation_from_string(acts[b].get<std::string>());
  const auto& quant = c.manifest.at("quant");
  check(quant.at("blocks").size() == qm.blocks.size(), "quant block count mismatch");
  for (size_t b = 0; b < qm.blocks.size(); ++b) {
    const auto& jb = quant.at("blocks")[b];
    for (int s = 0; s < kNumWeightSlots; ++s)
      qm.blocks[b].weight_qp[static_cast<size_t>(s)] =
          jb.at("weight_qp")[static_cast<size_t>(s)].get<QuantParams>();
    for (int p = 0; p < kNumActPoints; ++p)
      qm.blocks[b].act_qp[static_cast<size_t>(p)] =
          jb.at("act_qp")[static_cast<size_t>(p)].get<QuantParams>();
    qm.blocks[b].diverged = jb.at("diverged").get<bool>();
  }
  qm.patch_qp = quant.at("patch_qp").get<QuantParams>();
  qm.head_qp = quant.at("head_qp").get<QuantParams>();
  return qm;
}

}  // namespace aphq

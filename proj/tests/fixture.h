// Shared access to the committed trained-model fixture and its dataset.
#pragma once

#include <string>

#include <json.hpp>

#include "aphq/checkpoint.hpp"
#include "aphq/data.hpp"

namespace fixture {

inline std::string dir() { return FIXTURE_DIR; }

inline nlohmann::json meta() {
  auto buf = aphq::detail::read_file(dir() + "/fixture_meta.json");
  return nlohmann::json::parse(buf.begin(), buf.end());
}

inline aphq::VitModel<float> model() {
  return aphq::load_checkpoint(dir() + "/fixture.ckpt");
}

struct Splits {
  aphq::Dataset train, eval;
};

/// Regenerates the deterministic dataset the fixture was trained on.
inline Splits dataset() {
  nlohmann::json m = meta();
  aphq::ViTConfig cfg = m.at("vit_config").get<aphq::ViTConfig>();
  int64_t train_n = m.at("train_n").get<int64_t>();
  int64_t eval_n = m.at("eval_n").get<int64_t>();
  aphq::Dataset all = aphq::make_synthetic_dataset(
      cfg, train_n + eval_n, m.at("data_seed").get<uint64_t>(),
      m.at("noise_sigma").get<double>());
  int64_t chw = all.images.numel() / all.size();
  auto split = [&](int64_t from, int64_t n) {
    aphq::Dataset d;
    d.images = aphq::Tensor::zeros({n, chw});
    std::copy_n(all.images.data.begin() + from * chw, n * chw, d.images.data.begin());
    d.labels.assign(all.labels.begin() + from, all.labels.begin() + from + n);
    return d;
  };
  return {split(0, train_n), split(train_n, eval_n)};
}

inline aphq::Tensor golden_logits() {
  nlohmann::json m = meta();
  int64_t gn = m.at("golden_n").get<int64_t>();
  int64_t classes = m.at("vit_config").at("num_classes").get<int64_t>();
  auto raw = aphq::detail::read_file(dir() + "/golden_logits.bin");
  aphq::check(raw.size() == static_cast<size_t>(gn * classes) * sizeof(float),
              "golden logits size mismatch");
  aphq::Tensor t = aphq::Tensor::zeros({gn, classes});
  std::memcpy(t.data.data(), raw.data(), raw.size());
  return t;
}

}  // namespace fixture

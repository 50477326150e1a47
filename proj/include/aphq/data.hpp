#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "aphq/tensor.hpp"
#include "aphq/vit.hpp"

namespace aphq {

/// Labeled image set, flattened row-major [N, C*H*W].
struct Dataset {
  Tensor images;
  std::vector<int> labels;

  int64_t size() const { return images.numel() ? images.dim(0) : 0; }
};

/// Gaussian class-prototype toy data: each class c has a fixed prototype
/// image; samples are prototype + noise. Deterministic under seed.
inline Dataset make_synthetic_dataset(const ViTConfig& cfg, int64_t n, uint64_t seed,
                                      double noise_sigma = 0.6) {
  cfg.validate();
  check(n > 0, "make_synthetic_dataset: n must be positive");
  int64_t chw = static_cast<int64_t>(cfg.channels) * cfg.image_size * cfg.image_size;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<Tensor> protos;
  for (int c = 0; c < cfg.num_classes; ++c) {
    Tensor p = Tensor::zeros({chw});
    for (auto& v : p.data) v = static_cast<float>(nd(rng));
    protos.push_back(std::move(p));
  }
  Dataset ds;
  ds.images = Tensor::zeros({n, chw});
  ds.labels.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int c = static_cast<int>(i % cfg.num_classes);
    ds.labels[static_cast<size_t>(i)] = c;
    for (int64_t j = 0; j < chw; ++j)
      ds.images.at(i * chw + j) = static_cast<float>(
          static_cast<double>(protos[static_cast<size_t>(c)].at(j)) +
          noise_sigma * nd(rng));
  }
  return ds;
}

namespace detail {
inline void write_file_atomic(const std::string& path, const char* data, size_t len) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    check(f.good(), "cannot open for writing: " + tmp);
    f.write(data, static_cast<std::streamsize>(len));
    check(f.good(), "write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  check(!ec, "rename failed: " + tmp + " -> " + path + ": " + ec.message());
}

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open: " + path);
  f.seekg(0, std::ios::end);
  auto len = f.tellg();
  f.seekg(0);
  std::vector<char> buf(static_cast<size_t>(len));
  f.read(buf.data(), len);
  check(f.good(), "read failed: " + path);
  return buf;
}
}  // namespace detail

/// Directory layout: one raw little-endian f32 .bin per sample plus
/// index.json listing {name, shape, label} records.
inline void save_dataset(const std::string& dir, const Dataset& ds) {
  check(ds.size() > 0, "save_dataset: empty dataset");
  std::filesystem::create_directories(dir);
  int64_t chw = ds.images.numel() / ds.size();
  nlohmann::json index = nlohmann::json::array();
  for (int64_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%06lld.bin", static_cast<long long>(i));
    detail::write_file_atomic(
        dir + "/" + name,
        reinterpret_cast<const char*>(ds.images.data.data() + i * chw),
        static_cast<size_t>(chw) * sizeof(float));
    index.push_back({{"name", name},
                     {"shape", nlohmann::json::array({chw})},
                     {"label", ds.labels[static_cast<size_t>(i)]}});
  }
  std::string text = index.dump(2);
  detail::write_file_atomic(dir + "/index.json", text.data(), text.size());
}

inline Dataset load_dataset(const std::string& dir) {
  auto buf = detail::read_file(dir + "/index.json");
  nlohmann::json index = nlohmann::json::parse(buf.begin(), buf.end());
  check(index.is_array() && !index.empty(), "load_dataset: empty or invalid index");
  int64_t n = static_cast<int64_t>(index.size());
  int64_t chw = -1;
  Dataset ds;
  ds.labels.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const auto& rec = index[static_cast<size_t>(i)];
    int64_t numel = 1;
    for (const auto& d : rec.at("shape")) numel *= d.get<int64_t>();
    if (chw < 0) {
      chw = numel;
      ds.images = Tensor::zeros({n, chw});
    }
    check(numel == chw, "load_dataset: inconsistent sample shapes");
    auto raw = detail::read_file(dir + "/" + rec.at("name").get<std::string>());
    check(raw.size() == static_cast<size_t>(chw) * sizeof(float),
          "load_dataset: sample size mismatch: " + rec.at("name").get<std::string>());
    std::memcpy(ds.images.data.data() + i * chw, raw.data(), raw.size());
    for (int64_t j = 0; j < chw; ++j)
      check(std::isfinite(ds.images.at(i * chw + j)),
            "load_dataset: non-finite value in " + rec.at("name").get<std::string>());
    ds.labels.push_back(rec.at("label").get<int>());
  }
  return ds;
}

/// Draws n samples without replacement under a deterministic shuffle.
/// Labels are intentionally dropped (unlabeled calibration contract).
inline Tensor load_calibration(const Dataset& ds, int64_t n, uint64_t seed) {
  check(n > 0, "load_calibration: n must be positive");
  check(ds.size() >= n, "load_calibration: dataset has " + std::to_string(ds.size()) +
                            " samples, need " + std::to_string(n));
  std::vector<int64_t> idx(static_cast<size_t>(ds.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  int64_t chw = ds.images.numel() / ds.size();
  Tensor out = Tensor::zeros({n, chw});
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(ds.images.data.begin() + idx[static_cast<size_t>(i)] * chw, chw,
                out.data.begin() + i * chw);
  return out;
}

/// Binary PPM (P6) / PGM (P5) import, normalized to [0,1], channel-planar.
inline Tensor read_pnm(const std::string& path) {
  auto buf = detail::read_file(path);
  size_t pos = 0;
  auto token = [&]() {
    while (pos < buf.size() && (std::isspace(static_cast<unsigned char>(buf[pos])) ||
                                buf[pos] == '#')) {
      if (buf[pos] == '#')
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      else
        ++pos;
    }
    size_t start = pos;
    while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    return std::string(buf.begin() + static_cast<long>(start),
                       buf.begin() + static_cast<long>(pos));
  };
  std::string magic = token();
  check(magic == "P5" || magic == "P6", "read_pnm: unsupported format in " + path);
  int channels = magic == "P6" ? 3 : 1;
  int w = std::stoi(token()), h = std::stoi(token()), maxval = std::stoi(token());
  check(w > 0 && h > 0 && maxval > 0 && maxval < 65536, "read_pnm: bad header in " + path);
  check(maxval < 256, "read_pnm: 16-bit samples not supported: " + path);
  ++pos;  // single whitespace after maxval
  size_t need = static_cast<size_t>(w) * h * channels;
  check(buf.size() - pos >= need, "read_pnm: truncated pixel data in " + path);
  Tensor out = Tensor::zeros({static_cast<int64_t>(channels) * h * w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < channels; ++c) {
        auto v = static_cast<unsigned char>(buf[pos + (y * w + x) * channels + c]);
        out.at((c * h + y) * w + x) = static_cast<float>(v) / static_cast<float>(maxval);
      }
  return out;
}

}  // namespace aphq

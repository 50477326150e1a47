// Writes a dataset directory (index.json + per-sample .bin files), either
// synthesized from the Gaussian-prototype generator or imported from a
// folder of binary PGM/PPM images named <label>_<anything>.pgm|.ppm.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>

#include "aphq/data.hpp"

using namespace aphq;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"dataset directory writer"};
  std::string out_dir, import_dir;
  int64_t n = 512;
  uint64_t seed = 1234;
  double noise = 3.0;
  ViTConfig cfg;
  app.add_option("--out", out_dir, "output dataset directory")->required();
  app.add_option("--from-images", import_dir,
                 "import <label>_*.pgm/.ppm images instead of synthesizing");
  app.add_option("--n", n, "sample count (synthetic mode)");
  app.add_option("--seed", seed, "generator seed (synthetic mode)");
  app.add_option("--noise", noise, "noise sigma (synthetic mode)");
  CLI11_PARSE(app, argc, argv);

  try {
    Dataset ds;
    if (!import_dir.empty()) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(import_dir)) {
        std::string ext = e.path().extension().string();
        if (ext == ".pgm" || ext == ".ppm") files.push_back(e.path());
      }
      check(!files.empty(), "no .pgm/.ppm files in " + import_dir);
      std::sort(files.begin(), files.end());
      int64_t chw = -1;
      for (size_t i = 0; i < files.size(); ++i) {
        Tensor img = read_pnm(files[i].string());
        if (chw < 0) {
          chw = img.numel();
          ds.images = Tensor::zeros({static_cast<int64_t>(files.size()), chw});
        }
        check(img.numel() == chw, "inconsistent image size: " + files[i].string());
        std::copy(img.data.begin(), img.data.end(),
                  ds.images.data.begin() + static_cast<int64_t>(i) * chw);
        std::string stem = files[i].stem().string();
        ds.labels.push_back(std::stoi(stem.substr(0, stem.find('_'))));
      }
    } else {
      ds = make_synthetic_dataset(cfg, n, seed, noise);
    }
    save_dataset(out_dir, ds);
    std::printf("wrote %lld samples to %s\n", static_cast<long long>(ds.size()),
                out_dir.c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

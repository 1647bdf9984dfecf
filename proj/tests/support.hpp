#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "covidscreen/core/random.hpp"
#include "covidscreen/nn/model_spec.hpp"
#include "covidscreen/preprocess/image.hpp"
#include "covidscreen/train/dataset.hpp"

namespace covidscreen::testing {

// Small networks at 64x64 keep the model-level tests fast on one CPU core.
inline nn::ModelSpec tiny_spec(nn::ModelKind kind) {
  using nn::DenseNetConfig;
  using nn::ModelKind;
  using nn::ModelSpec;
  ModelSpec s = kind == ModelKind::kCT    ? ModelSpec::ct(DenseNetConfig::tiny())
                : kind == ModelKind::kCXR ? ModelSpec::cxr(DenseNetConfig::tiny())
                                          : ModelSpec::aux_extractor("chexpert6", 6, DenseNetConfig::tiny());
  s.preprocess.target_size = {64, 64, 3};
  s.hidden = kind == ModelKind::kAux ? 0 : 16;
  return s;
}

inline nn::ModelSpec with_constant_aux(nn::ModelSpec s) {
  s.aux[0].constant = true;
  s.aux[0].values = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  s.aux[1].constant = true;
  s.aux[1].values = {0.25, 0.75};
  return s;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("covidscreen_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline constexpr int kSquareSide = 16;

// Smooth ramp background; when `quadrant` is 0..3 (row-major: TL, TR, BL, BR)
// a bright square is placed at a random position inside that quadrant, at
// least `margin` pixels away from the two midlines.
inline preprocess::RasterImage square_image(Rng& rng, int size, int quadrant, int margin = 0) {
  preprocess::RasterImage img(size, size, 3);
  const bool vertical = rng.uniform() < 0.5;
  const double base = rng.uniform(20.0, 50.0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double t = static_cast<double>(vertical ? y : x) / size;
      const auto v = preprocess::saturate_u8(base + 50.0 * t);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = v;
    }
  }
  if (quadrant >= 0) {
    const int half = size / 2;
    const int side = size * kSquareSide / 64;
    const auto span = static_cast<std::uint64_t>(half - side - margin + 1);
    const int y0 = (quadrant / 2) * (half + margin) + static_cast<int>(rng.below(span));
    const int x0 = (quadrant % 2) * (half + margin) + static_cast<int>(rng.below(span));
    for (int y = y0; y < y0 + side; ++y) {
      for (int x = x0; x < x0 + side; ++x) {
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = 230;
      }
    }
  }
  return img;
}

// Square present (random quadrant) -> COVID19, absent -> NORMAL, alternating.
// The quadrant of image i is recorded in `quadrants` (-1 when absent).
inline train::InMemoryDataset square_dataset(int n, std::uint64_t seed, int size = 64,
                                             std::vector<int>* quadrants = nullptr) {
  train::InMemoryDataset ds;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const int q = i % 2 == 0 ? static_cast<int>(rng.below(4)) : -1;
    ds.add("img" + std::to_string(i), square_image(rng, size, q), q >= 0 ? Label::kCovid19 : Label::kNormal);
    if (quadrants) quadrants->push_back(q);
  }
  return ds;
}

}  // namespace covidscreen::testing

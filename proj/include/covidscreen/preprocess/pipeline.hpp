#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>

#include "covidscreen/core/random.hpp"
#include "covidscreen/preprocess/image.hpp"

namespace covidscreen::preprocess {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct TargetSize {
  int height = 256;
  int width = 256;
  int channels = 3;
};

enum class EqualizeMode { kPerChannel, kLuminance };
enum class PipelineMode { kTrain, kEval };

struct PreprocessConfig {
  Interval rotation_range_deg{-15.0, 15.0};
  Interval translation_range_frac{-0.05, 0.05};
  TargetSize target_size{};
  int blur_window = 3;
  // <= 0 selects the standard fixed small-window kernel (binomial 1-2-1 for
  // window 3, the usual sigma-0.8 default); > 0 samples a Gaussian.
  double blur_sigma = 0.0;
  bool augment_enabled = true;
  EqualizeMode equalize_mode = EqualizeMode::kPerChannel;
  std::uint8_t fill_value = 0;

  // Throws InvalidArgument on an inconsistent configuration.
  void validate() const;
};

void to_json(nlohmann::json& j, const PreprocessConfig& cfg);
void from_json(const nlohmann::json& j, PreprocessConfig& cfg);

struct AffineParams {
  double angle_deg = 0.0;
  double shift_x_frac = 0.0;
  double shift_y_frac = 0.0;
};

// Draws rotation and translation uniformly from the configured ranges.
AffineParams sample_augmentation(Rng& rng, const PreprocessConfig& cfg);

// Rotates about the image center, then translates by the given fractions of
// (width, height). Exposed pixels take `fill`; output dims equal input dims.
RasterImage apply_affine(const RasterImage& img, const AffineParams& params, std::uint8_t fill);

RasterImage augment(const RasterImage& img, Rng& rng, const PreprocessConfig& cfg);

// out(v) = round(255 * (cdf(v) - cdf_min) / (N - cdf_min)). A channel with a
// single intensity level is left unchanged.
RasterImage equalize_histogram(const RasterImage& img,
                               EqualizeMode mode = EqualizeMode::kPerChannel);

// Direct bilinear rescale (half-pixel centers). One-channel inputs are
// replicated when three channels are requested.
template <typename T>
Image<T> resize(const Image<T>& img, const TargetSize& target);

Eigen::VectorXd gaussian_kernel_1d(int window, double sigma);
Eigen::MatrixXd gaussian_kernel(int window, double sigma);

// Separable Gaussian filter with reflect-101 borders.
template <typename T>
Image<T> gaussian_blur(const Image<T>& img, int window, double sigma);

// Per-image standardization with the population standard deviation.
template <typename T>
NormalizedTensor normalize(const Image<T>& img);

// augment (train only) -> equalize -> resize -> blur -> normalize.
NormalizedTensor run_pipeline(const RasterImage& img, PipelineMode mode, Rng& rng,
                              const PreprocessConfig& cfg);

}  // namespace covidscreen::preprocess

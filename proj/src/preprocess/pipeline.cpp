#include "covidscreen/preprocess/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace covidscreen::preprocess {

void PreprocessConfig::validate() const {
  if (rotation_range_deg.lo > rotation_range_deg.hi) {
    throw InvalidArgument("rotation range lower bound exceeds upper bound");
  }
  if (translation_range_frac.lo > translation_range_frac.hi) {
    throw InvalidArgument("translation range lower bound exceeds upper bound");
  }
  if (blur_window < 1 || blur_window % 2 == 0) {
    throw InvalidArgument("blur window must be odd and >= 1");
  }
  if (target_size.height <= 0 || target_size.width <= 0 ||
      (target_size.channels != 1 && target_size.channels != 3)) {
    throw InvalidArgument("target size must be positive with 1 or 3 channels");
  }
}

void to_json(nlohmann::json& j, const PreprocessConfig& cfg) {
  j = nlohmann::json{
      {"rotation_range_deg", {cfg.rotation_range_deg.lo, cfg.rotation_range_deg.hi}},
      {"translation_range_frac", {cfg.translation_range_frac.lo, cfg.translation_range_frac.hi}},
      {"target_size",
       {cfg.target_size.height, cfg.target_size.width, cfg.target_size.channels}},
      {"blur_window", cfg.blur_window},
      {"blur_sigma", cfg.blur_sigma},
      {"augment_enabled", cfg.augment_enabled},
      {"equalize_mode",
       cfg.equalize_mode == EqualizeMode::kPerChannel ? "per_channel" : "luminance"},
      {"fill_value", cfg.fill_value},
  };
}

void from_json(const nlohmann::json& j, PreprocessConfig& cfg) {
  PreprocessConfig d;
  if (j.contains("rotation_range_deg")) {
    const auto& r = j.at("rotation_range_deg");
    d.rotation_range_deg = {r.at(0).get<double>(), r.at(1).get<double>()};
  }
  if (j.contains("translation_range_frac")) {
    const auto& r = j.at("translation_range_frac");
    d.translation_range_frac = {r.at(0).get<double>(), r.at(1).get<double>()};
  }
  if (j.contains("target_size")) {
    const auto& t = j.at("target_size");
    d.target_size = {t.at(0).get<int>(), t.at(1).get<int>(), t.at(2).get<int>()};
  }
  d.blur_window = j.value("blur_window", d.blur_window);
  d.blur_sigma = j.value("blur_sigma", d.blur_sigma);
  d.augment_enabled = j.value("augment_enabled", d.augment_enabled);
  const std::string mode = j.value("equalize_mode", std::string("per_channel"));
  if (mode == "per_channel") {
    d.equalize_mode = EqualizeMode::kPerChannel;
  } else if (mode == "luminance") {
    d.equalize_mode = EqualizeMode::kLuminance;
  } else {
    throw InvalidArgument("unknown equalize_mode '" + mode + "'");
  }
  d.fill_value = j.value("fill_value", d.fill_value);
  d.validate();
  cfg = d;
}

AffineParams sample_augmentation(Rng& rng, const PreprocessConfig& cfg) {
  AffineParams p;
  p.angle_deg = rng.uniform(cfg.rotation_range_deg.lo, cfg.rotation_range_deg.hi);
  p.shift_x_frac = rng.uniform(cfg.translation_range_frac.lo, cfg.translation_range_frac.hi);
  p.shift_y_frac = rng.uniform(cfg.translation_range_frac.lo, cfg.translation_range_frac.hi);
  return p;
}

RasterImage apply_affine(const RasterImage& img, const AffineParams& params, std::uint8_t fill) {
  const int h = img.height();
  const int w = img.width();
  const int ch = img.channels();
  RasterImage out(h, w, ch, fill);

  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta);
  const double sin_t = std::sin(theta);
  const double cx = (w - 1) / 2.0;
  const double cy = (h - 1) / 2.0;
  const double tx = params.shift_x_frac * w;
  const double ty = params.shift_y_frac * h;

  auto sample = [&](int y, int x, int c) -> double {
    if (x < 0 || y < 0 || x >= w || y >= h) return fill;
    return img.at(y, x, c);
  };

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Inverse map: output pixel -> source coordinate.
      const double dx = x - cx - tx;
      const double dy = y - cy - ty;
      const double sx = cos_t * dx + sin_t * dy + cx;
      const double sy = -sin_t * dx + cos_t * dy + cy;
      const double fx0 = std::floor(sx);
      const double fy0 = std::floor(sy);
      const double ax = sx - fx0;
      const double ay = sy - fy0;
      const int x0 = static_cast<int>(fx0);
      const int y0 = static_cast<int>(fy0);
      if (x0 < -1 || y0 < -1 || x0 >= w || y0 >= h) continue;
      for (int c = 0; c < ch; ++c) {
        double v = (1 - ay) * ((1 - ax) * sample(y0, x0, c) + (ax > 0 ? ax * sample(y0, x0 + 1, c) : 0.0));
        if (ay > 0) {
          v += ay * ((1 - ax) * sample(y0 + 1, x0, c) + (ax > 0 ? ax * sample(y0 + 1, x0 + 1, c) : 0.0));
        }
        out.at(y, x, c) = saturate_u8(v);
      }
    }
  }
  return out;
}

RasterImage augment(const RasterImage& img, Rng& rng, const PreprocessConfig& cfg) {
  return apply_affine(img, sample_augmentation(rng, cfg), cfg.fill_value);
}

namespace {

std::array<std::uint8_t, 256> equalization_lut(const std::array<std::int64_t, 256>& hist,
                                               std::int64_t n, bool* degenerate) {
  std::array<std::uint8_t, 256> lut{};
  std::array<std::int64_t, 256> cdf{};
  std::int64_t running = 0;
  std::int64_t cdf_min = 0;
  int levels = 0;
  for (int v = 0; v < 256; ++v) {
    running += hist[v];
    cdf[v] = running;
    if (hist[v] > 0) {
      if (levels == 0) cdf_min = running;
      ++levels;
    }
  }
  *degenerate = levels <= 1;
  for (int v = 0; v < 256; ++v) {
    if (*degenerate) {
      lut[v] = static_cast<std::uint8_t>(v);
    } else {
      const double num = static_cast<double>(std::max<std::int64_t>(cdf[v] - cdf_min, 0));
      lut[v] = saturate_u8(std::round(255.0 * num / static_cast<double>(n - cdf_min)));
    }
  }
  return lut;
}

}  // namespace

RasterImage equalize_histogram(const RasterImage& img, EqualizeMode mode) {
  const int ch = img.channels();
  const std::int64_t n = static_cast<std::int64_t>(img.height()) * img.width();
  RasterImage out = img;

  if (mode == EqualizeMode::kPerChannel || ch == 1) {
    for (int c = 0; c < ch; ++c) {
      std::array<std::int64_t, 256> hist{};
      for (std::int64_t i = 0; i < n; ++i) ++hist[img.data()[i * ch + c]];
      bool degenerate = false;
      const auto lut = equalization_lut(hist, n, &degenerate);
      for (std::int64_t i = 0; i < n; ++i) out.data()[i * ch + c] = lut[img.data()[i * ch + c]];
    }
    return out;
  }

  // Luminance mode: equalize BT.601 luma and shift all channels by the luma
  // change, which leaves the chroma difference channels untouched.
  std::vector<std::uint8_t> luma(static_cast<std::size_t>(n));
  std::array<std::int64_t, 256> hist{};
  for (std::int64_t i = 0; i < n; ++i) {
    const std::uint8_t* p = img.data() + i * 3;
    luma[i] = saturate_u8(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
    ++hist[luma[i]];
  }
  bool degenerate = false;
  const auto lut = equalization_lut(hist, n, &degenerate);
  for (std::int64_t i = 0; i < n; ++i) {
    const int delta = static_cast<int>(lut[luma[i]]) - static_cast<int>(luma[i]);
    for (int c = 0; c < 3; ++c) {
      out.data()[i * 3 + c] = saturate_u8(static_cast<double>(img.data()[i * 3 + c]) + delta);
    }
  }
  return out;
}

template <typename T>
Image<T> resize(const Image<T>& img, const TargetSize& target) {
  const int in_h = img.height();
  const int in_w = img.width();
  const int in_c = img.channels();
  Image<T> out(target.height, target.width, target.channels);

  const double scale_y = static_cast<double>(in_h) / target.height;
  const double scale_x = static_cast<double>(in_w) / target.width;

  struct Tap {
    int i0, i1;
    double a;
  };
  auto taps = [](int out_len, int in_len, double scale) {
    std::vector<Tap> t(static_cast<std::size_t>(out_len));
    for (int o = 0; o < out_len; ++o) {
      double s = (o + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in_len - 1));
      const int i0 = static_cast<int>(std::floor(s));
      const int i1 = std::min(i0 + 1, in_len - 1);
      t[o] = {i0, i1, s - i0};
    }
    return t;
  };
  const auto ty = taps(target.height, in_h, scale_y);
  const auto tx = taps(target.width, in_w, scale_x);

  auto source = [&](int y, int x, int c) -> double {
    if (in_c == target.channels) return static_cast<double>(img.at(y, x, c));
    if (in_c == 1) return static_cast<double>(img.at(y, x, 0));
    return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
  };

  for (int y = 0; y < target.height; ++y) {
    const Tap& vy = ty[y];
    for (int x = 0; x < target.width; ++x) {
      const Tap& vx = tx[x];
      for (int c = 0; c < target.channels; ++c) {
        const double top = (1 - vx.a) * source(vy.i0, vx.i0, c) + vx.a * source(vy.i0, vx.i1, c);
        const double bot = (1 - vx.a) * source(vy.i1, vx.i0, c) + vx.a * source(vy.i1, vx.i1, c);
        const double v = (1 - vy.a) * top + vy.a * bot;
        if constexpr (std::is_integral_v<T>) {
          out.at(y, x, c) = saturate_u8(v);
        } else {
          out.at(y, x, c) = static_cast<T>(v);
        }
      }
    }
  }
  return out;
}

Eigen::VectorXd gaussian_kernel_1d(int window, double sigma) {
  if (window < 1 || window % 2 == 0) throw InvalidArgument("blur window must be odd and >= 1");
  Eigen::VectorXd k(window);
  if (sigma <= 0.0 && window <= 7) {
    // Fixed small-window kernels (binomial coefficients / table values).
    static const double k1[] = {1.0};
    static const double k3[] = {0.25, 0.5, 0.25};
    static const double k5[] = {0.0625, 0.25, 0.375, 0.25, 0.0625};
    static const double k7[] = {0.03125, 0.109375, 0.21875, 0.28125, 0.21875, 0.109375, 0.03125};
    const double* table = window == 1 ? k1 : window == 3 ? k3 : window == 5 ? k5 : k7;
    for (int i = 0; i < window; ++i) k[i] = table[i];
    return k;
  }
  if (sigma <= 0.0) sigma = 0.3 * ((window - 1) * 0.5 - 1) + 0.8;
  const int r = window / 2;
  for (int i = 0; i < window; ++i) {
    const double x = i - r;
    k[i] = std::exp(-(x * x) / (2 * sigma * sigma));
  }
  k /= k.sum();
  return k;
}

Eigen::MatrixXd gaussian_kernel(int window, double sigma) {
  const Eigen::VectorXd k = gaussian_kernel_1d(window, sigma);
  return k * k.transpose();
}

namespace {

inline int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

}  // namespace

template <typename T>
Image<T> gaussian_blur(const Image<T>& img, int window, double sigma) {
  const Eigen::VectorXd k = gaussian_kernel_1d(window, sigma);
  const int r = window / 2;
  const int h = img.height();
  const int w = img.width();
  const int ch = img.channels();

  Eigen::ArrayXd tmp(img.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int t = -r; t <= r; ++t) {
          acc += k[t + r] * static_cast<double>(img.at(y, reflect101(x + t, w), c));
        }
        tmp[(static_cast<Eigen::Index>(y) * w + x) * ch + c] = acc;
      }
    }
  }
  Image<T> out(h, w, ch);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int t = -r; t <= r; ++t) {
          acc += k[t + r] * tmp[(static_cast<Eigen::Index>(reflect101(y + t, h)) * w + x) * ch + c];
        }
        if constexpr (std::is_integral_v<T>) {
          out.at(y, x, c) = saturate_u8(acc);
        } else {
          out.at(y, x, c) = static_cast<T>(acc);
        }
      }
    }
  }
  return out;
}

template <typename T>
NormalizedTensor normalize(const Image<T>& img) {
  NormalizedTensor out;
  out.values = Image<float>(img.height(), img.width(), img.channels());
  const Eigen::ArrayXd v = img.pixels().template cast<double>();
  const double mean = v.mean();
  const double var = (v - mean).square().mean();
  if (!(var > 0.0)) {
    out.degenerate = true;
    return out;
  }
  const double inv_std = 1.0 / std::sqrt(var);
  out.values.pixels() = ((v - mean) * inv_std).cast<float>();
  return out;
}

NormalizedTensor run_pipeline(const RasterImage& img, PipelineMode mode, Rng& rng,
                              const PreprocessConfig& cfg) {
  cfg.validate();
  const RasterImage augmented = (mode == PipelineMode::kTrain && cfg.augment_enabled)
                                    ? augment(img, rng, cfg)
                                    : img;
  const RasterImage equalized = equalize_histogram(augmented, cfg.equalize_mode);
  const Image<double> resized = resize(image_cast<double>(equalized), cfg.target_size);
  const Image<double> blurred = gaussian_blur(resized, cfg.blur_window, cfg.blur_sigma);
  return normalize(blurred);
}

template Image<std::uint8_t> resize(const Image<std::uint8_t>&, const TargetSize&);
template Image<float> resize(const Image<float>&, const TargetSize&);
template Image<double> resize(const Image<double>&, const TargetSize&);
template Image<std::uint8_t> gaussian_blur(const Image<std::uint8_t>&, int, double);
template Image<float> gaussian_blur(const Image<float>&, int, double);
template Image<double> gaussian_blur(const Image<double>&, int, double);
template NormalizedTensor normalize(const Image<std::uint8_t>&);
template NormalizedTensor normalize(const Image<float>&);
template NormalizedTensor normalize(const Image<double>&);

}  // namespace covidscreen::preprocess

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <type_traits>

#include "covidscreen/core/error.hpp"

namespace covidscreen::preprocess {

// Interleaved height x width x channels raster. Channels are RGB order when
// there are three of them.
template <typename T>
class Image {
 public:
  using value_type = T;
  using Storage = Eigen::Array<T, Eigen::Dynamic, 1>;

  Image() = default;
  Image(int height, int width, int channels, T fill = T(0))
      : height_(height), width_(width), channels_(channels) {
    if (height <= 0 || width <= 0 || (channels != 1 && channels != 3)) {
      throw InvalidArgument("image dimensions must be positive with 1 or 3 channels");
    }
    pixels_ = Storage::Constant(static_cast<Eigen::Index>(height) * width * channels, fill);
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  Eigen::Index size() const { return pixels_.size(); }
  bool empty() const { return pixels_.size() == 0; }

  T& at(int y, int x, int c) { return pixels_[index(y, x, c)]; }
  T at(int y, int x, int c) const { return pixels_[index(y, x, c)]; }

  Storage& pixels() { return pixels_; }
  const Storage& pixels() const { return pixels_; }
  T* data() { return pixels_.data(); }
  const T* data() const { return pixels_.data(); }

  bool operator==(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_ &&
           (pixels_ == other.pixels_).all();
  }

 private:
  Eigen::Index index(int y, int x, int c) const {
    return (static_cast<Eigen::Index>(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  Storage pixels_;
};

using RasterImage = Image<std::uint8_t>;

struct NormalizedTensor {
  Image<float> values;
  std::string image_id;
  // Set when the source had zero variance; values are then all zero.
  bool degenerate = false;
};

// Rounds and clamps a real intensity into [0, 255].
inline std::uint8_t saturate_u8(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 255.0) return 255;
  return static_cast<std::uint8_t>(v + 0.5);
}

template <typename To, typename From>
Image<To> image_cast(const Image<From>& in) {
  Image<To> out(in.height(), in.width(), in.channels());
  if constexpr (std::is_same_v<To, std::uint8_t> && !std::is_same_v<From, std::uint8_t>) {
    for (Eigen::Index i = 0; i < in.size(); ++i) out.pixels()[i] = saturate_u8(in.pixels()[i]);
  } else {
    out.pixels() = in.pixels().template cast<To>();
  }
  return out;
}

}  // namespace covidscreen::preprocess

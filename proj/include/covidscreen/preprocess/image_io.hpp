#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "covidscreen/preprocess/image.hpp"

namespace covidscreen::preprocess {

struct DecodedImage {
  RasterImage image;  // 8-bit, RGB or single channel
  int bit_depth = 0;  // bits per pixel of the encoded source (e.g. 24 for 8-bit RGB)
};

// Throws UndecodableImage when the bytes are not a supported raster format,
// MissingFile when the path does not exist.
DecodedImage decode_image(std::span<const std::uint8_t> bytes);
DecodedImage read_image(const std::filesystem::path& path);

// Forces three channels (grayscale replicated).
RasterImage to_rgb(const RasterImage& img);

std::vector<std::uint8_t> encode_png(const RasterImage& img);
void write_image(const std::filesystem::path& path, const RasterImage& img);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace covidscreen::preprocess

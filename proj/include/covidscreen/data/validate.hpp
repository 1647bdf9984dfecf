#pragma once

#include <filesystem>
#include <string>

#include "covidscreen/data/manifest.hpp"

namespace covidscreen::data {

// Size and depth bounds of the conformant CT dataset.
inline constexpr int kMinSide = 484;
inline constexpr int kMaxSide = 1024;
inline constexpr int kRequiredBitDepth = 24;

struct ValidationResult {
  bool ok = false;
  std::string reason;
  int width = 0;
  int height = 0;
  int bit_depth = 0;
};

ValidationResult check_bounds(int width, int height, int bit_depth, bool strict);

// Decodes the file and checks it. Lenient mode only requires decodability.
// Throws UndecodableImage / MissingFile.
ValidationResult validate_image(const std::filesystem::path& file, bool strict);
ValidationResult validate_image(const DatasetManifest& manifest, ImageRecord& record, bool strict);

}  // namespace covidscreen::data

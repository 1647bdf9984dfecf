#include "covidscreen/data/validate.hpp"

#include "covidscreen/preprocess/image_io.hpp"

namespace covidscreen::data {

ValidationResult check_bounds(int width, int height, int bit_depth, bool strict) {
  ValidationResult r;
  r.width = width;
  r.height = height;
  r.bit_depth = bit_depth;
  r.ok = true;
  if (!strict) return r;
  if (width < kMinSide || height < kMinSide) {
    r.ok = false;
    r.reason = "resolution " + std::to_string(width) + "x" + std::to_string(height) +
               " below minimum " + std::to_string(kMinSide);
  } else if (width > kMaxSide || height > kMaxSide) {
    r.ok = false;
    r.reason = "resolution " + std::to_string(width) + "x" + std::to_string(height) +
               " above maximum " + std::to_string(kMaxSide);
  } else if (bit_depth != kRequiredBitDepth) {
    r.ok = false;
    r.reason = "bit depth " + std::to_string(bit_depth) + " (expected " +
               std::to_string(kRequiredBitDepth) + ")";
  }
  return r;
}

ValidationResult validate_image(const std::filesystem::path& file, bool strict) {
  const auto decoded = preprocess::read_image(file);
  return check_bounds(decoded.image.width(), decoded.image.height(), decoded.bit_depth, strict);
}

ValidationResult validate_image(const DatasetManifest& manifest, ImageRecord& record,
                                bool strict) {
  auto result = validate_image(manifest.resolve(record), strict);
  record.width = result.width;
  record.height = result.height;
  record.bit_depth = result.bit_depth;
  return result;
}

}  // namespace covidscreen::data

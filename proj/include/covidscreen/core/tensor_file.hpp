#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace covidscreen {

// Binary tensor container shared by the preprocess and cam commands:
//
//   bytes 0..3   magic "CSTN"
//   u32          format version (1)
//   u32          rank
//   u64 x rank   dimensions, outermost first
//   f32 x prod   values, row-major
//
// All integers and floats are little-endian.
struct StoredTensor {
  std::vector<std::uint64_t> dims;
  std::vector<float> values;
};

void write_tensor_file(const std::filesystem::path& path, std::span<const std::uint64_t> dims,
                       std::span<const float> values);
StoredTensor read_tensor_file(const std::filesystem::path& path);

}  // namespace covidscreen

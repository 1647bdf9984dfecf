#include "covidscreen/core/tensor_file.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>

#include "covidscreen/core/error.hpp"

namespace covidscreen {
namespace {

constexpr char kMagic[4] = {'C', 'S', 'T', 'N'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& os, T value) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is, const std::filesystem::path& path) {
  std::uint8_t bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw InvalidArgument("truncated tensor file: " + path.string());
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, std::span<const std::uint64_t> dims,
                       std::span<const float> values) {
  const std::uint64_t count =
      std::accumulate(dims.begin(), dims.end(), std::uint64_t{1}, std::multiplies<>());
  if (count != values.size()) throw InvalidArgument("tensor dims do not match value count");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InvalidArgument("cannot open for writing: " + path.string());
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, kVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(dims.size()));
  for (std::uint64_t d : dims) put_le<std::uint64_t>(os, d);
  for (float v : values) put_le<float>(os, v);
  if (!os) throw InvalidArgument("write failed: " + path.string());
}

StoredTensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFile("cannot open tensor file: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw InvalidArgument("not a tensor file: " + path.string());
  }
  if (get_le<std::uint32_t>(is, path) != kVersion) {
    throw InvalidArgument("unsupported tensor file version: " + path.string());
  }
  StoredTensor out;
  const auto rank = get_le<std::uint32_t>(is, path);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    out.dims.push_back(get_le<std::uint64_t>(is, path));
    count *= out.dims.back();
  }
  out.values.resize(count);
  for (auto& v : out.values) v = get_le<float>(is, path);
  return out;
}

}  // namespace covidscreen

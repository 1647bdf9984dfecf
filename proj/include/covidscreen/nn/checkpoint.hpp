#pragma once

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "covidscreen/nn/model_spec.hpp"
#include "covidscreen/nn/network.hpp"

namespace covidscreen::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint32_t { kFloat32 = 1, kFloat64 = 2 };

struct StoredArray {
  std::array<std::uint64_t, 4> dims{};
  // Values widened to double; float payloads round-trip exactly.
  std::vector<double> values;
  bool operator==(const StoredArray&) const = default;
};

// Binary container:
//   "CSCKPT\0\0" | u32 version | u32 dtype | u64 len + spec JSON |
//   u64 len + metadata JSON | u64 count | count x (u32 name len, name,
//   4 x u64 dims, raw values) | u32 CRC-32 of everything before it.
// Little-endian throughout; tensors sorted by name.
struct Checkpoint {
  ModelSpec spec;
  nlohmann::json metadata = nlohmann::json::object();
  DType dtype = DType::kFloat32;
  std::map<std::string, StoredArray> tensors;
};

// Throws CorruptCheckpoint (truncation, bad magic or CRC) or VersionMismatch.
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Writes atomically (temporary file + rename).
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

template <typename Scalar>
Checkpoint snapshot(Network<Scalar>& net, const nlohmann::json& metadata = nlohmann::json::object());

// Copies every tensor of `net` from `ckpt`. VersionMismatch when the
// architectures differ or a tensor is missing or misshapen.
template <typename Scalar>
void restore(Network<Scalar>& net, const Checkpoint& ckpt);

// Copies the tensors whose names start with `prefix` into `net`, which must
// contain every one of them (after replacing `prefix` by `target_prefix`).
template <typename Scalar>
std::size_t restore_prefix(Network<Scalar>& net, const Checkpoint& ckpt, const std::string& prefix,
                           const std::string& target_prefix);

// Auxiliary extractors for a fresh cxr network: constant stubs come from the
// spec; network extractors are read from `aux_checkpoints` (keyed by slot
// name), MissingAuxCheckpoint when absent.
template <typename Scalar>
std::vector<std::unique_ptr<AuxExtractor<Scalar>>> build_aux(
    ModelSpec& spec, const std::map<std::string, std::filesystem::path>& aux_checkpoints);

// A randomly initialized network. Loads backbone weights when the spec names
// a backbone checkpoint.
template <typename Scalar>
std::unique_ptr<Network<Scalar>> make_network(
    ModelSpec spec, std::uint64_t seed,
    const std::map<std::string, std::filesystem::path>& aux_checkpoints = {});

// Rebuilds the network stored in a checkpoint (auxiliary weights included).
template <typename Scalar>
std::unique_ptr<Network<Scalar>> network_from_checkpoint(const Checkpoint& ckpt);

template <typename Scalar>
std::unique_ptr<Network<Scalar>> load_network(const std::filesystem::path& path) {
  return network_from_checkpoint<Scalar>(read_checkpoint(path));
}

// Lowercase hex SHA-256 of a file's bytes.
std::string file_sha256(const std::filesystem::path& path);
std::string sha256_hex(const void* data, std::size_t size);

}  // namespace covidscreen::nn

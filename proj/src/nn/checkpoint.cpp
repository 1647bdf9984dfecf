#include "covidscreen/nn/checkpoint.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "covidscreen/core/error.hpp"

namespace covidscreen::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

constexpr char kMagic[8] = {'C', 'S', 'C', 'K', 'P', 'T', '\0', '\0'};

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void str64(const std::string& s) {
    pod<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size) : data_(data), size_(size) {}

  template <typename T>
  T pod() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const char* take(std::size_t n) {
    if (n > size_ - pos_) throw CorruptCheckpoint("checkpoint is truncated");
    const char* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::string str(std::size_t n) { return std::string(take(n), n); }

 private:
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename Scalar>
constexpr DType dtype_of() {
  return std::is_same_v<Scalar, float> ? DType::kFloat32 : DType::kFloat64;
}

template <typename Scalar>
std::array<std::uint64_t, 4> dims_of_t(const Tensor<Scalar>& t) {
  return {static_cast<std::uint64_t>(t.batch()), static_cast<std::uint64_t>(t.channels()),
          static_cast<std::uint64_t>(t.height()), static_cast<std::uint64_t>(t.width())};
}

std::string dims_str(const std::array<std::uint64_t, 4>& d) {
  return "(" + std::to_string(d[0]) + "," + std::to_string(d[1]) + "," + std::to_string(d[2]) +
         "," + std::to_string(d[3]) + ")";
}

template <typename Scalar>
void copy_into(const std::string& name, const StoredArray& src, Tensor<Scalar>& dst) {
  if (src.dims != dims_of_t(dst)) {
    throw VersionMismatch("tensor '" + name + "' has shape " + dims_str(src.dims) +
                          " in the checkpoint but " + dims_str(dims_of_t(dst)) + " in the model");
  }
  for (Eigen::Index i = 0; i < dst.size(); ++i) {
    dst.data()[i] = static_cast<Scalar>(src.values[static_cast<std::size_t>(i)]);
  }
}

}  // namespace

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFile("cannot open checkpoint " + path.string());
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) + 12) throw CorruptCheckpoint(path.string() + ": checkpoint is truncated");
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CorruptCheckpoint(path.string() + ": not a checkpoint file");
  }
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
  const bool crc_ok = crc32_of(buf.data(), buf.size() - 4) == stored_crc;

  Reader r(buf.data(), buf.size() - 4);
  r.take(sizeof(kMagic));
  const auto version = r.pod<std::uint32_t>();
  if (!crc_ok) throw CorruptCheckpoint(path.string() + ": checksum mismatch (truncated or damaged)");
  if (version != kCheckpointVersion) {
    throw VersionMismatch(path.string() + ": checkpoint format version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  const auto dtype = r.pod<std::uint32_t>();
  if (dtype != 1 && dtype != 2) throw CorruptCheckpoint(path.string() + ": unknown dtype");
  ck.dtype = static_cast<DType>(dtype);
  try {
    const std::string spec_text = r.str(r.pod<std::uint64_t>());
    ck.spec = nlohmann::json::parse(spec_text).get<ModelSpec>();
    ck.metadata = nlohmann::json::parse(r.str(r.pod<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(path.string() + ": bad header: " + e.what());
  }
  const auto count = r.pod<std::uint64_t>();
  const std::size_t width = ck.dtype == DType::kFloat32 ? 4 : 8;
  for (std::uint64_t t = 0; t < count; ++t) {
    const std::string name = r.str(r.pod<std::uint32_t>());
    StoredArray a;
    std::uint64_t n = 1;
    for (auto& d : a.dims) {
      d = r.pod<std::uint64_t>();
      n *= d;
    }
    const char* raw = r.take(n * width);
    a.values.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      if (ck.dtype == DType::kFloat32) {
        float v;
        std::memcpy(&v, raw + i * 4, 4);
        a.values[i] = v;
      } else {
        std::memcpy(&a.values[i], raw + i * 8, 8);
      }
    }
    ck.tensors.emplace(name, std::move(a));
  }
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod(kCheckpointVersion);
  w.pod(static_cast<std::uint32_t>(ck.dtype));
  w.str64(nlohmann::json(ck.spec).dump());
  w.str64(ck.metadata.dump());
  w.pod<std::uint64_t>(ck.tensors.size());
  for (const auto& [name, a] : ck.tensors) {
    w.pod(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    for (auto d : a.dims) w.pod(d);
    for (double v : a.values) {
      if (ck.dtype == DType::kFloat32) {
        w.pod(static_cast<float>(v));
      } else {
        w.pod(v);
      }
    }
  }
  w.pod(crc32_of(w.buffer().data(), w.buffer().size()));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw MissingFile("cannot write checkpoint " + tmp.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename Scalar>
Checkpoint snapshot(Network<Scalar>& net, const nlohmann::json& metadata) {
  Checkpoint ck;
  ck.spec = net.spec();
  ck.metadata = metadata;
  ck.dtype = dtype_of<Scalar>();
  for (const auto& t : net.tensors()) {
    StoredArray a;
    a.dims = dims_of_t(*t.value);
    a.values.assign(t.value->data(), t.value->data() + t.value->size());
    if (!ck.tensors.emplace(t.name, std::move(a)).second) {
      throw Error("duplicate tensor name " + t.name);
    }
  }
  return ck;
}

template <typename Scalar>
void restore(Network<Scalar>& net, const Checkpoint& ck) {
  if (!net.spec().same_architecture(ck.spec)) {
    throw VersionMismatch("checkpoint holds a " + to_string(ck.spec.kind) + " model with " +
                          std::to_string(ck.spec.outputs) + " outputs that does not match the " +
                          to_string(net.spec().kind) + " model being loaded");
  }
  const auto tensors = net.tensors();
  for (const auto& t : tensors) {
    const auto it = ck.tensors.find(t.name);
    if (it == ck.tensors.end()) throw VersionMismatch("checkpoint lacks tensor '" + t.name + "'");
  }
  for (const auto& t : tensors) copy_into(t.name, ck.tensors.at(t.name), *t.value);
}

template <typename Scalar>
std::size_t restore_prefix(Network<Scalar>& net, const Checkpoint& ck, const std::string& prefix,
                           const std::string& target_prefix) {
  std::map<std::string, Tensor<Scalar>*> targets;
  for (const auto& t : net.tensors()) targets[t.name] = t.value;
  std::size_t copied = 0;
  for (const auto& [name, a] : ck.tensors) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    const std::string target = target_prefix + name.substr(prefix.size());
    const auto it = targets.find(target);
    if (it == targets.end()) throw VersionMismatch("model has no tensor '" + target + "'");
    copy_into(target, a, *it->second);
    ++copied;
  }
  return copied;
}

template <typename Scalar>
std::vector<std::unique_ptr<AuxExtractor<Scalar>>> build_aux(
    ModelSpec& spec, const std::map<std::string, std::filesystem::path>& aux_checkpoints) {
  std::vector<std::unique_ptr<AuxExtractor<Scalar>>> out;
  for (AuxSpec& slot : spec.aux) {
    if (slot.constant) {
      out.push_back(std::make_unique<ConstantAuxExtractor<Scalar>>(slot.name, slot.values));
      continue;
    }
    const auto it = aux_checkpoints.find(slot.name);
    if (it == aux_checkpoints.end()) {
      throw MissingAuxCheckpoint("no checkpoint for auxiliary extractor '" + slot.name + "'");
    }
    if (!std::filesystem::exists(it->second)) {
      throw MissingAuxCheckpoint("auxiliary checkpoint " + it->second.string() + " does not exist");
    }
    const Checkpoint ck = read_checkpoint(it->second);
    if (ck.spec.kind != ModelKind::kAux || ck.spec.outputs != slot.dim) {
      throw VersionMismatch(it->second.string() + " is not a " + std::to_string(slot.dim) +
                            "-output auxiliary extractor");
    }
    ModelSpec aux_spec = ck.spec;
    aux_spec.aux.front().name = slot.name;
    if (aux_spec.preprocess.target_size.height != spec.preprocess.target_size.height ||
        aux_spec.preprocess.target_size.width != spec.preprocess.target_size.width) {
      throw ShapeMismatch("auxiliary extractor '" + slot.name + "' expects a different input size");
    }
    auto net = std::make_unique<Network<Scalar>>(aux_spec);
    restore(*net, Checkpoint{aux_spec, ck.metadata, ck.dtype, ck.tensors});
    slot.network = nlohmann::json(aux_spec);
    out.push_back(std::make_unique<NetworkAuxExtractor<Scalar>>(std::move(net)));
  }
  return out;
}

template <typename Scalar>
std::unique_ptr<Network<Scalar>> make_network(
    ModelSpec spec, std::uint64_t seed,
    const std::map<std::string, std::filesystem::path>& aux_checkpoints) {
  spec.validate();
  std::vector<std::unique_ptr<AuxExtractor<Scalar>>> aux;
  if (spec.kind == ModelKind::kCXR) aux = build_aux<Scalar>(spec, aux_checkpoints);
  auto net = std::make_unique<Network<Scalar>>(spec, std::move(aux));
  Rng rng = Rng::derive(seed, {0x1417});
  net->init(rng);
  if (!spec.backbone_weights.empty()) {
    const Checkpoint ck = read_checkpoint(spec.backbone_weights);
    if (!(ck.spec.backbone == spec.backbone)) {
      throw VersionMismatch(spec.backbone_weights + " holds a different backbone (" +
                            ck.spec.backbone.name + ")");
    }
    if (restore_prefix(*net, ck, "backbone.", "backbone.") == 0) {
      throw VersionMismatch(spec.backbone_weights + " holds no backbone tensors");
    }
  }
  return net;
}

template <typename Scalar>
std::unique_ptr<Network<Scalar>> network_from_checkpoint(const Checkpoint& ck) {
  ModelSpec spec = ck.spec;
  std::vector<std::unique_ptr<AuxExtractor<Scalar>>> aux;
  if (spec.kind == ModelKind::kCXR) {
    for (const AuxSpec& slot : spec.aux) {
      if (slot.constant) {
        aux.push_back(std::make_unique<ConstantAuxExtractor<Scalar>>(slot.name, slot.values));
        continue;
      }
      const std::string prefix = "aux." + slot.name + ".";
      const auto it = ck.tensors.lower_bound(prefix);
      const bool has_weights = it != ck.tensors.end() && it->first.compare(0, prefix.size(), prefix) == 0;
      if (slot.network.is_null() || !has_weights) {
        throw MissingAuxCheckpoint("checkpoint has no weights for auxiliary extractor '" +
                                   slot.name + "'");
      }
      auto net = std::make_unique<Network<Scalar>>(slot.network.get<ModelSpec>());
      aux.push_back(std::make_unique<NetworkAuxExtractor<Scalar>>(std::move(net)));
    }
  }
  auto net = std::make_unique<Network<Scalar>>(spec, std::move(aux));
  restore(*net, ck);
  return net;
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFile("cannot open " + path.string());
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(buf.data(), buf.size());
}

#define COVIDSCREEN_INSTANTIATE(S)                                                              \
  template Checkpoint snapshot(Network<S>&, const nlohmann::json&);                             \
  template void restore(Network<S>&, const Checkpoint&);                                        \
  template std::size_t restore_prefix(Network<S>&, const Checkpoint&, const std::string&,       \
                                      const std::string&);                                      \
  template std::vector<std::unique_ptr<AuxExtractor<S>>> build_aux(                             \
      ModelSpec&, const std::map<std::string, std::filesystem::path>&);                         \
  template std::unique_ptr<Network<S>> make_network(                                            \
      ModelSpec, std::uint64_t, const std::map<std::string, std::filesystem::path>&);           \
  template std::unique_ptr<Network<S>> network_from_checkpoint(const Checkpoint&);

COVIDSCREEN_INSTANTIATE(float)
COVIDSCREEN_INSTANTIATE(double)

#undef COVIDSCREEN_INSTANTIATE

}  // namespace covidscreen::nn

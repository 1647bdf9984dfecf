#include "covidscreen/service/model_registry.hpp"

#include "covidscreen/core/error.hpp"
#include "covidscreen/nn/checkpoint.hpp"

namespace covidscreen::service {

LoadedModel::LoadedModel(std::filesystem::path path, Modality modality, int replicas)
    : path_(std::move(path)), modality_(modality) {
  const nn::Checkpoint ckpt = nn::read_checkpoint(path_);
  const nn::ModelKind expected = modality == Modality::kCT ? nn::ModelKind::kCT : nn::ModelKind::kCXR;
  if (ckpt.spec.kind != expected) {
    throw InvalidArgument("checkpoint " + path_.string() + " holds a " + nn::to_string(ckpt.spec.kind) +
                          " model, expected " + nn::to_string(expected));
  }
  version_ = nn::file_sha256(path_).substr(0, 12);
  for (int i = 0; i < std::max(1, replicas); ++i) {
    replicas_.push_back(nn::network_from_checkpoint<float>(ckpt));
    free_.push_back(static_cast<std::size_t>(i));
  }
}

LoadedModel::Lease LoadedModel::acquire() {
  std::unique_lock lock(mutex_);
  available_.wait(lock, [this] { return !free_.empty(); });
  const std::size_t slot = free_.back();
  free_.pop_back();
  return Lease(*this, slot);
}

LoadedModel::Lease::~Lease() {
  if (!model_) return;
  {
    std::lock_guard lock(model_->mutex_);
    model_->free_.push_back(slot_);
  }
  model_->available_.notify_one();
}

std::shared_ptr<LoadedModel> ModelRegistry::load(Modality modality, const std::filesystem::path& path) {
  auto model = std::make_shared<LoadedModel>(path, modality, replicas_);
  std::lock_guard lock(mutex_);
  models_[modality] = model;
  return model;
}

std::shared_ptr<LoadedModel> ModelRegistry::get(Modality modality) const {
  std::lock_guard lock(mutex_);
  const auto it = models_.find(modality);
  return it == models_.end() ? nullptr : it->second;
}

bool ModelRegistry::any_loaded() const {
  std::lock_guard lock(mutex_);
  return !models_.empty();
}

nlohmann::json ModelRegistry::status() const {
  std::lock_guard lock(mutex_);
  nlohmann::json out = nlohmann::json::object();
  for (Modality m : {Modality::kCT, Modality::kCXR}) {
    const auto it = models_.find(m);
    std::string key(to_string(m));
    for (auto& ch : key) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (it == models_.end()) {
      out[key] = nullptr;
    } else {
      out[key] = {{"model_version", it->second->version()},
                  {"checkpoint", it->second->path().string()},
                  {"replicas", it->second->replicas()}};
    }
  }
  return out;
}

}  // namespace covidscreen::service

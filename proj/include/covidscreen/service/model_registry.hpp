#pragma once

#include <json.hpp>

#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "covidscreen/core/labels.hpp"
#include "covidscreen/nn/network.hpp"

namespace covidscreen::service {

// One loaded checkpoint with a fixed set of network replicas. A request leases
// a replica for the duration of one forward (or Grad-CAM) pass.
class LoadedModel {
 public:
  LoadedModel(std::filesystem::path path, Modality modality, int replicas);

  class Lease {
   public:
    Lease(LoadedModel& model, std::size_t slot) : model_(&model), slot_(slot) {}
    Lease(Lease&& other) noexcept : model_(other.model_), slot_(other.slot_) { other.model_ = nullptr; }
    Lease(const Lease&) = delete;
    ~Lease();
    nn::Network<float>& net() { return *model_->replicas_[slot_]; }

   private:
    LoadedModel* model_;
    std::size_t slot_;
  };

  // Blocks until a replica is free.
  Lease acquire();

  const std::filesystem::path& path() const { return path_; }
  // First 12 hex digits of the checkpoint file's SHA-256.
  const std::string& version() const { return version_; }
  Modality modality() const { return modality_; }
  const nn::ModelSpec& spec() const { return replicas_.front()->spec(); }
  std::size_t replicas() const { return replicas_.size(); }

 private:
  std::filesystem::path path_;
  Modality modality_;
  std::string version_;
  std::vector<std::unique_ptr<nn::Network<float>>> replicas_;
  std::vector<std::size_t> free_;
  std::mutex mutex_;
  std::condition_variable available_;
};

// Current model per modality. Reloading swaps in a fully built model; requests
// already holding the previous one finish on it.
class ModelRegistry {
 public:
  explicit ModelRegistry(int replicas = 1) : replicas_(replicas) {}

  // Throws (and keeps the current model) when the checkpoint cannot be
  // loaded or is for the other modality.
  std::shared_ptr<LoadedModel> load(Modality modality, const std::filesystem::path& path);
  std::shared_ptr<LoadedModel> get(Modality modality) const;
  bool any_loaded() const;
  nlohmann::json status() const;

 private:
  int replicas_;
  mutable std::mutex mutex_;
  std::map<Modality, std::shared_ptr<LoadedModel>> models_;
};

}  // namespace covidscreen::service

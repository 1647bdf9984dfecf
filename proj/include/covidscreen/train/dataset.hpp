#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "covidscreen/core/labels.hpp"
#include "covidscreen/core/tensor.hpp"
#include "covidscreen/data/manifest.hpp"
#include "covidscreen/nn/model_spec.hpp"
#include "covidscreen/preprocess/pipeline.hpp"

namespace covidscreen::train {

// Indexed image source. Index order is the dataset's canonical order; batch
// composition and augmentation streams are keyed on it.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  virtual const std::string& image_id(std::size_t i) const = 0;
  virtual Label label(std::size_t i) const = 0;
  virtual preprocess::RasterImage load(std::size_t i) const = 0;
  bool empty() const { return size() == 0; }
};

class InMemoryDataset final : public Dataset {
 public:
  void add(std::string image_id, preprocess::RasterImage image, Label label);

  std::size_t size() const override { return items_.size(); }
  const std::string& image_id(std::size_t i) const override { return items_.at(i).id; }
  Label label(std::size_t i) const override { return items_.at(i).label; }
  preprocess::RasterImage load(std::size_t i) const override { return items_.at(i).image; }

 private:
  struct Item {
    std::string id;
    preprocess::RasterImage image;
    Label label;
  };
  std::vector<Item> items_;
};

// Records of one split of a manifest, read from disk on demand.
class ManifestDataset final : public Dataset {
 public:
  ManifestDataset(const data::DatasetManifest& manifest, Split split);
  // All records regardless of split.
  explicit ManifestDataset(const data::DatasetManifest& manifest);

  std::size_t size() const override { return records_.size(); }
  const std::string& image_id(std::size_t i) const override { return records_.at(i).image_id; }
  Label label(std::size_t i) const override { return records_.at(i).label; }
  preprocess::RasterImage load(std::size_t i) const override;

 private:
  data::DatasetManifest manifest_;
  std::vector<data::ImageRecord> records_;
};

// Writes an HWC normalized image into sample n of an NCHW tensor.
template <typename Scalar>
void write_chw(const preprocess::Image<float>& img, Tensor<Scalar>& batch, Eigen::Index n);

template <typename Scalar>
Tensor<Scalar> to_tensor(const preprocess::Image<float>& img);

// Preprocessing stream for sample `index` in `epoch`; independent of batch
// composition and call order.
preprocess::NormalizedTensor preprocess_sample(const preprocess::RasterImage& img,
                                               preprocess::PipelineMode mode, std::uint64_t seed,
                                               std::uint64_t epoch, std::uint64_t index,
                                               const preprocess::PreprocessConfig& cfg);

// Assembles model input batches. EVAL-mode tensors are deterministic and are
// cached after the first use.
class BatchBuilder {
 public:
  BatchBuilder(const Dataset& dataset, preprocess::PreprocessConfig cfg, std::uint64_t seed);

  template <typename Scalar>
  Tensor<Scalar> inputs(std::span<const std::size_t> indices, preprocess::PipelineMode mode,
                        std::uint64_t epoch);

  const Dataset& dataset() const { return dataset_; }

 private:
  const preprocess::Image<float>& eval_image(std::size_t i);

  const Dataset& dataset_;
  preprocess::PreprocessConfig cfg_;
  std::uint64_t seed_;
  std::mutex mutex_;
  std::map<std::size_t, preprocess::Image<float>> eval_cache_;
};

// CT: one-hot over (COVID19, OTHER_PNEUMONIA, NORMAL). CXR: y = [label == COVID19].
template <typename Scalar>
Tensor<Scalar> targets(const Dataset& dataset, std::span<const std::size_t> indices, nn::ModelKind kind);

}  // namespace covidscreen::train

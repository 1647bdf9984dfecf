#include "covidscreen/train/dataset.hpp"

#include "covidscreen/preprocess/image_io.hpp"

namespace covidscreen::train {

void InMemoryDataset::add(std::string image_id, preprocess::RasterImage image, Label label) {
  items_.push_back({std::move(image_id), std::move(image), label});
}

ManifestDataset::ManifestDataset(const data::DatasetManifest& manifest, Split split)
    : manifest_(manifest), records_(manifest.in_split(split)) {}

ManifestDataset::ManifestDataset(const data::DatasetManifest& manifest)
    : manifest_(manifest), records_(manifest.records) {}

preprocess::RasterImage ManifestDataset::load(std::size_t i) const {
  return preprocess::read_image(manifest_.resolve(records_.at(i))).image;
}

template <typename Scalar>
void write_chw(const preprocess::Image<float>& img, Tensor<Scalar>& batch, Eigen::Index n) {
  require_shape(batch, img.channels(), img.height(), img.width(), "batch slot");
  const Eigen::Index plane = static_cast<Eigen::Index>(img.height()) * img.width();
  Scalar* out = batch.sample_data(n);
  const float* in = img.data();
  const int c = img.channels();
  for (Eigen::Index p = 0; p < plane; ++p) {
    for (int k = 0; k < c; ++k) out[k * plane + p] = static_cast<Scalar>(in[p * c + k]);
  }
}

template <typename Scalar>
Tensor<Scalar> to_tensor(const preprocess::Image<float>& img) {
  Tensor<Scalar> t(1, img.channels(), img.height(), img.width());
  write_chw(img, t, 0);
  return t;
}

preprocess::NormalizedTensor preprocess_sample(const preprocess::RasterImage& img,
                                               preprocess::PipelineMode mode, std::uint64_t seed,
                                               std::uint64_t epoch, std::uint64_t index,
                                               const preprocess::PreprocessConfig& cfg) {
  Rng rng = Rng::derive(seed, {epoch, index});
  return preprocess::run_pipeline(img, mode, rng, cfg);
}

BatchBuilder::BatchBuilder(const Dataset& dataset, preprocess::PreprocessConfig cfg, std::uint64_t seed)
    : dataset_(dataset), cfg_(std::move(cfg)), seed_(seed) {
  cfg_.validate();
}

const preprocess::Image<float>& BatchBuilder::eval_image(std::size_t i) {
  {
    std::lock_guard lock(mutex_);
    const auto it = eval_cache_.find(i);
    if (it != eval_cache_.end()) return it->second;
  }
  auto result = preprocess_sample(dataset_.load(i), preprocess::PipelineMode::kEval, seed_, 0, i, cfg_);
  std::lock_guard lock(mutex_);
  return eval_cache_.emplace(i, std::move(result.values)).first->second;
}

template <typename Scalar>
Tensor<Scalar> BatchBuilder::inputs(std::span<const std::size_t> indices, preprocess::PipelineMode mode,
                                    std::uint64_t epoch) {
  const auto& t = cfg_.target_size;
  Tensor<Scalar> batch(static_cast<Eigen::Index>(indices.size()), t.channels, t.height, t.width);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (mode == preprocess::PipelineMode::kEval) {
      write_chw(eval_image(i), batch, static_cast<Eigen::Index>(k));
    } else {
      const auto sample = preprocess_sample(dataset_.load(i), mode, seed_, epoch, i, cfg_);
      write_chw(sample.values, batch, static_cast<Eigen::Index>(k));
    }
  }
  return batch;
}

template <typename Scalar>
Tensor<Scalar> targets(const Dataset& dataset, std::span<const std::size_t> indices, nn::ModelKind kind) {
  const auto b = static_cast<Eigen::Index>(indices.size());
  if (kind == nn::ModelKind::kCT) {
    Tensor<Scalar> y(b, kNumClasses, 1, 1);
    for (Eigen::Index k = 0; k < b; ++k) {
      y(k, label_index(dataset.label(indices[static_cast<std::size_t>(k)])), 0, 0) = Scalar(1);
    }
    return y;
  }
  if (kind == nn::ModelKind::kCXR) {
    Tensor<Scalar> y(b, 1, 1, 1);
    for (Eigen::Index k = 0; k < b; ++k) {
      y(k, 0, 0, 0) = dataset.label(indices[static_cast<std::size_t>(k)]) == Label::kCovid19 ? Scalar(1) : Scalar(0);
    }
    return y;
  }
  throw InvalidArgument("auxiliary networks are trained outside this toolkit");
}

template void write_chw(const preprocess::Image<float>&, Tensor<float>&, Eigen::Index);
template void write_chw(const preprocess::Image<float>&, Tensor<double>&, Eigen::Index);
template Tensor<float> to_tensor(const preprocess::Image<float>&);
template Tensor<double> to_tensor(const preprocess::Image<float>&);
template Tensor<float> BatchBuilder::inputs(std::span<const std::size_t>, preprocess::PipelineMode, std::uint64_t);
template Tensor<double> BatchBuilder::inputs(std::span<const std::size_t>, preprocess::PipelineMode, std::uint64_t);
template Tensor<float> targets(const Dataset&, std::span<const std::size_t>, nn::ModelKind);
template Tensor<double> targets(const Dataset&, std::span<const std::size_t>, nn::ModelKind);

}  // namespace covidscreen::train

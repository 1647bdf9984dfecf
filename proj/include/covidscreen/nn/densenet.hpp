#pragma once

#include <memory>
#include <vector>

#include "covidscreen/nn/layers.hpp"
#include "covidscreen/nn/model_spec.hpp"

namespace covidscreen::nn {

// BN-ReLU-Conv1x1-BN-ReLU-Conv3x3 producing `growth` new channels.
template <typename Scalar>
class DenseLayer {
 public:
  DenseLayer(Index in_channels, int growth, int bn_size);

  void init(Rng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);
  void collect(const std::string& prefix, NamedTensors<Scalar>& out);

 private:
  BatchNorm2d<Scalar> norm1_;
  ReLU<Scalar> relu1_;
  Conv2d<Scalar> conv1_;
  BatchNorm2d<Scalar> norm2_;
  ReLU<Scalar> relu2_;
  Conv2d<Scalar> conv2_;
};

template <typename Scalar>
class DenseBlock {
 public:
  DenseBlock(Index in_channels, int layers, int growth, int bn_size);

  void init(Rng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);
  void collect(const std::string& prefix, NamedTensors<Scalar>& out);
  Index out_channels() const { return out_channels_; }

 private:
  Index in_channels_;
  Index out_channels_;
  int growth_;
  std::vector<std::unique_ptr<DenseLayer<Scalar>>> layers_;
};

template <typename Scalar>
class Transition {
 public:
  Transition(Index in_channels, Index out_channels);

  void init(Rng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);
  void collect(const std::string& prefix, NamedTensors<Scalar>& out);

 private:
  BatchNorm2d<Scalar> norm_;
  ReLU<Scalar> relu_;
  Conv2d<Scalar> conv_;
  AvgPool2d<Scalar> pool_{2};
};

// DenseNet feature extractor (through the final norm and ReLU). Tensor names
// follow torchvision's `features.*` layout so converted weights load as is.
template <typename Scalar>
class DenseNet {
 public:
  explicit DenseNet(const DenseNetConfig& config);

  void init(Rng& rng);
  // (B, 3, H, W) -> (B, out_channels, H / stride, W / stride)
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  // Accumulates parameter gradients; the image gradient is discarded.
  void backward(const Tensor<Scalar>& grad_out);
  void collect(const std::string& prefix, NamedTensors<Scalar>& out);

  const DenseNetConfig& config() const { return config_; }
  Index out_channels() const { return out_channels_; }

 private:
  DenseNetConfig config_;
  Index out_channels_ = 0;
  Conv2d<Scalar> conv0_;
  BatchNorm2d<Scalar> norm0_;
  ReLU<Scalar> relu0_;
  MaxPool2d<Scalar> pool0_{3, 2, 1};
  std::vector<std::unique_ptr<DenseBlock<Scalar>>> blocks_;
  std::vector<std::unique_ptr<Transition<Scalar>>> transitions_;
  BatchNorm2d<Scalar> norm5_;
  ReLU<Scalar> relu5_;
};

}  // namespace covidscreen::nn

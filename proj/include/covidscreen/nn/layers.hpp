#pragma once

#include <string>
#include <vector>

#include "covidscreen/core/random.hpp"
#include "covidscreen/core/tensor.hpp"

namespace covidscreen::nn {

using Index = Eigen::Index;

// kTrain: batch statistics in batch-norm, activations recorded for backward.
// kInfer: running statistics, nothing recorded.
// kInferRecord: running statistics, activations recorded (gradient checks,
// Grad-CAM).
enum class Mode { kTrain, kInfer, kInferRecord };

inline bool records(Mode m) { return m != Mode::kInfer; }

template <typename Scalar>
struct Parameter {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;

  explicit Parameter(const typename Tensor<Scalar>::Shape& shape = {}) : value(shape), grad(shape) {}
  void zero_grad() { grad.set_zero(); }
};

// Named view of a model tensor. `grad` is null for non-trainable buffers
// (batch-norm running statistics).
template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar>* value = nullptr;
  Tensor<Scalar>* grad = nullptr;
};

template <typename Scalar>
using NamedTensors = std::vector<NamedTensor<Scalar>>;

template <typename Scalar>
void zero_grads(const NamedTensors<Scalar>& tensors) {
  for (const auto& t : tensors) {
    if (t.grad) t.grad->set_zero();
  }
}

template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(Index in_channels, Index out_channels, int kernel, int stride, int padding, bool bias);

  void init(Rng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);
  void collect(const std::string& prefix, NamedTensors<Scalar>& out);

  Index out_extent(Index in) const { return (in + 2 * padding_ - kernel_) / stride_ + 1; }
  Index in_channels() const { return in_; }
  Index out_channels() const { return out_; }
  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }

 private:
  bool pointwise() const { return kernel_ == 1 && stride_ == 1 && padding_ == 0; }
  void im2col(const Scalar* x, Index h, Index w, typename Tensor<Scalar>::RowMajorMatrix& cols) const;
  void col2im(const typename Tensor<Scalar>::RowMajorMatrix& cols, Index h, Index w, Scalar* gx) const;

  Index in_ = 0, out_ = 0;
  int kernel_ = 1, stride_ = 1, padding_ = 0;
  bool has_bias_ = false;
  Parameter<Scalar> weight_;  // (out, in, k, k)
  Parameter<Scalar> bias_;    // (out, 1, 1, 1)
  Tensor<Scalar> input_;
};

template <typename Scalar>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(Index channels, double eps = 1e-5, double momentum = 0.1);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);
  void collect(const std::string& prefix, NamedTensors<Scalar>& out);

  Parameter<Scalar>& gamma() { return gamma_; }
  Parameter<Scalar>& beta() { return beta_; }
  Tensor<Scalar>& running_mean() { return running_mean_; }
  Tensor<Scalar>& running_var() { return running_var_; }

 private:
  Index channels_ = 0;
  double eps_ = 1e-5;
  double momentum_ = 0.1;
  Parameter<Scalar> gamma_, beta_;
  Tensor<Scalar> running_mean_, running_var_;
  // Recorded state.
  Tensor<Scalar> xhat_;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std_;
  bool batch_stats_ = false;
};

template <typename Scalar>
class ReLU {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const;

 private:
  Tensor<Scalar> output_;
};

template <typename Scalar>
class MaxPool2d {
 public:
  MaxPool2d() = default;
  MaxPool2d(int kernel, int stride, int padding) : kernel_(kernel), stride_(stride), padding_(padding) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const;

 private:
  int kernel_ = 2, stride_ = 2, padding_ = 0;
  typename Tensor<Scalar>::Shape input_shape_{};
  std::vector<Index> argmax_;
};

// Non-overlapping average pooling (kernel == stride, no padding).
template <typename Scalar>
class AvgPool2d {
 public:
  AvgPool2d() = default;
  explicit AvgPool2d(int kernel) : kernel_(kernel) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const;

 private:
  int kernel_ = 2;
  typename Tensor<Scalar>::Shape input_shape_{};
};

// (B, C, H, W) -> (B, C, 1, 1)
template <typename Scalar>
class GlobalAvgPool {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const;

 private:
  typename Tensor<Scalar>::Shape input_shape_{};
};

// Fully-connected layer on (B, F, 1, 1) inputs; any (B, C, H, W) input is
// flattened to (B, C*H*W).
template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(Index in_features, Index out_features);

  void init(Rng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);
  void collect(const std::string& prefix, NamedTensors<Scalar>& out);

  Index in_features() const { return in_; }
  Index out_features() const { return out_; }
  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }

 private:
  Index in_ = 0, out_ = 0;
  Parameter<Scalar> weight_;  // (out, in, 1, 1)
  Parameter<Scalar> bias_;    // (out, 1, 1, 1)
  Tensor<Scalar> input_;
  typename Tensor<Scalar>::Shape input_shape_{};
};

// Bilinear resampling with half-pixel centers to an arbitrary spatial size.
template <typename Scalar>
class BilinearResize {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Index out_h, Index out_w, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const;

 private:
  typename Tensor<Scalar>::Shape input_shape_{};
};

// Channel concatenation helpers used by dense blocks and the CXR head.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

// Splits the first `channels` channels from the rest.
template <typename Scalar>
void split_channels(const Tensor<Scalar>& x, Index channels, Tensor<Scalar>& head, Tensor<Scalar>& tail);

}  // namespace covidscreen::nn

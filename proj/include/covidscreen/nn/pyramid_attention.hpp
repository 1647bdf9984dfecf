#pragma once

#include <memory>
#include <vector>

#include "covidscreen/nn/layers.hpp"
#include "covidscreen/nn/model_spec.hpp"

namespace covidscreen::nn {

// Feature-pyramid attention over a (B, C, H, W) map:
//   out = conv1x1(x) * att + broadcast(conv1x1(gap(x)))
// where att is built from a stride-2 convolution pyramid (one level per
// configured kernel), merged coarse-to-fine by bilinear upsampling and
// summation. The output has the input's shape.
template <typename Scalar>
class PyramidAttention {
 public:
  PyramidAttention(Index channels, const AttentionConfig& config);

  void init(Rng& rng);
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);
  void collect(const std::string& prefix, NamedTensors<Scalar>& out);

  Index channels() const { return channels_; }

 private:
  struct Level {
    Conv2d<Scalar> down;
    ReLU<Scalar> relu;
    Conv2d<Scalar> lateral;
    BilinearResize<Scalar> up;  // this level's merged map -> next finer size
  };

  Index channels_;
  Index pyramid_channels_;
  Conv2d<Scalar> main_;
  GlobalAvgPool<Scalar> gap_;
  Conv2d<Scalar> global_;
  std::vector<std::unique_ptr<Level>> levels_;
  BilinearResize<Scalar> up_out_;
  // Recorded forward state.
  Tensor<Scalar> main_out_;
  Tensor<Scalar> attention_;
};

}  // namespace covidscreen::nn

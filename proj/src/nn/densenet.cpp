#include "covidscreen/nn/densenet.hpp"

namespace covidscreen::nn {

template <typename Scalar>
DenseLayer<Scalar>::DenseLayer(Index in_channels, int growth, int bn_size)
    : norm1_(in_channels),
      conv1_(in_channels, static_cast<Index>(bn_size) * growth, 1, 1, 0, false),
      norm2_(static_cast<Index>(bn_size) * growth),
      conv2_(static_cast<Index>(bn_size) * growth, growth, 3, 1, 1, false) {}

template <typename Scalar>
void DenseLayer<Scalar>::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
}

template <typename Scalar>
Tensor<Scalar> DenseLayer<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  Tensor<Scalar> h = relu1_.forward(norm1_.forward(x, mode), mode);
  h = conv1_.forward(h, mode);
  h = relu2_.forward(norm2_.forward(h, mode), mode);
  return conv2_.forward(h, mode);
}

template <typename Scalar>
Tensor<Scalar> DenseLayer<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> g = conv2_.backward(grad_out);
  g = norm2_.backward(relu2_.backward(g));
  g = conv1_.backward(g);
  return norm1_.backward(relu1_.backward(g));
}

template <typename Scalar>
void DenseLayer<Scalar>::collect(const std::string& prefix, NamedTensors<Scalar>& out) {
  norm1_.collect(prefix + "norm1.", out);
  conv1_.collect(prefix + "conv1.", out);
  norm2_.collect(prefix + "norm2.", out);
  conv2_.collect(prefix + "conv2.", out);
}

template <typename Scalar>
DenseBlock<Scalar>::DenseBlock(Index in_channels, int layers, int growth, int bn_size)
    : in_channels_(in_channels), out_channels_(in_channels), growth_(growth) {
  for (int i = 0; i < layers; ++i) {
    layers_.push_back(std::make_unique<DenseLayer<Scalar>>(out_channels_, growth, bn_size));
    out_channels_ += growth;
  }
}

template <typename Scalar>
void DenseBlock<Scalar>::init(Rng& rng) {
  for (auto& l : layers_) l->init(rng);
}

template <typename Scalar>
Tensor<Scalar> DenseBlock<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  // Every layer sees the running concatenation of all earlier outputs.
  Tensor<Scalar> features = x;
  for (auto& l : layers_) features = concat_channels(features, l->forward(features, mode));
  return features;
}

template <typename Scalar>
Tensor<Scalar> DenseBlock<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> g = grad_out;
  Tensor<Scalar> head, tail;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    split_channels(g, g.channels() - growth_, head, tail);
    head.array() += (*it)->backward(tail).array();
    g = std::move(head);
  }
  return g;
}

template <typename Scalar>
void DenseBlock<Scalar>::collect(const std::string& prefix, NamedTensors<Scalar>& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->collect(prefix + "denselayer" + std::to_string(i + 1) + ".", out);
  }
}

template <typename Scalar>
Transition<Scalar>::Transition(Index in_channels, Index out_channels)
    : norm_(in_channels), conv_(in_channels, out_channels, 1, 1, 0, false) {}

template <typename Scalar>
void Transition<Scalar>::init(Rng& rng) {
  conv_.init(rng);
}

template <typename Scalar>
Tensor<Scalar> Transition<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  Tensor<Scalar> h = relu_.forward(norm_.forward(x, mode), mode);
  return pool_.forward(conv_.forward(h, mode), mode);
}

template <typename Scalar>
Tensor<Scalar> Transition<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> g = conv_.backward(pool_.backward(grad_out));
  return norm_.backward(relu_.backward(g));
}

template <typename Scalar>
void Transition<Scalar>::collect(const std::string& prefix, NamedTensors<Scalar>& out) {
  norm_.collect(prefix + "norm.", out);
  conv_.collect(prefix + "conv.", out);
}

template <typename Scalar>
DenseNet<Scalar>::DenseNet(const DenseNetConfig& config)
    : config_(config),
      conv0_(3, config.stem_channels, config.stem_kernel, config.stem_stride,
             config.stem_kernel / 2, false),
      norm0_(config.stem_channels) {
  if (config.block_layers.empty()) throw InvalidArgument("backbone needs at least one block");
  Index channels = config.stem_channels;
  for (std::size_t b = 0; b < config.block_layers.size(); ++b) {
    blocks_.push_back(std::make_unique<DenseBlock<Scalar>>(channels, config.block_layers[b],
                                                           config.growth_rate, config.bn_size));
    channels = blocks_.back()->out_channels();
    if (b + 1 < config.block_layers.size()) {
      const Index reduced = static_cast<Index>(channels * config.compression);
      transitions_.push_back(std::make_unique<Transition<Scalar>>(channels, reduced));
      channels = reduced;
    }
  }
  out_channels_ = channels;
  norm5_ = BatchNorm2d<Scalar>(channels);
}

template <typename Scalar>
void DenseNet<Scalar>::init(Rng& rng) {
  conv0_.init(rng);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    blocks_[b]->init(rng);
    if (b < transitions_.size()) transitions_[b]->init(rng);
  }
}

template <typename Scalar>
Tensor<Scalar> DenseNet<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  if (x.channels() != 3 || x.batch() < 1) {
    throw ShapeMismatch("backbone expects (B,3,H,W), got " + x.shape().str());
  }
  const Index stride = config_.output_stride();
  if (x.height() < stride || x.width() < stride) {
    throw ShapeMismatch("backbone input " + x.shape().str() + " is smaller than its stride");
  }
  Tensor<Scalar> h = relu0_.forward(norm0_.forward(conv0_.forward(x, mode), mode), mode);
  if (config_.stem_pool) h = pool0_.forward(h, mode);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    h = blocks_[b]->forward(h, mode);
    if (b < transitions_.size()) h = transitions_[b]->forward(h, mode);
  }
  return relu5_.forward(norm5_.forward(h, mode), mode);
}

template <typename Scalar>
void DenseNet<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> g = norm5_.backward(relu5_.backward(grad_out));
  for (std::size_t b = blocks_.size(); b-- > 0;) {
    if (b < transitions_.size()) g = transitions_[b]->backward(g);
    g = blocks_[b]->backward(g);
  }
  if (config_.stem_pool) g = pool0_.backward(g);
  g = norm0_.backward(relu0_.backward(g));
  conv0_.backward(g);
}

template <typename Scalar>
void DenseNet<Scalar>::collect(const std::string& prefix, NamedTensors<Scalar>& out) {
  conv0_.collect(prefix + "features.conv0.", out);
  norm0_.collect(prefix + "features.norm0.", out);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    blocks_[b]->collect(prefix + "features.denseblock" + std::to_string(b + 1) + ".", out);
    if (b < transitions_.size()) {
      transitions_[b]->collect(prefix + "features.transition" + std::to_string(b + 1) + ".", out);
    }
  }
  norm5_.collect(prefix + "features.norm5.", out);
}

template class DenseLayer<float>;
template class DenseLayer<double>;
template class DenseBlock<float>;
template class DenseBlock<double>;
template class Transition<float>;
template class Transition<double>;
template class DenseNet<float>;
template class DenseNet<double>;

}  // namespace covidscreen::nn

#include "covidscreen/nn/network.hpp"

#include <algorithm>
#include <cmath>

namespace covidscreen::nn {

namespace {

Index conv_extent(Index in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Spatial size of the backbone output for an input extent.
Index backbone_extent(const DenseNetConfig& c, Index in) {
  Index e = conv_extent(in, c.stem_kernel, c.stem_stride, c.stem_kernel / 2);
  if (c.stem_pool) e = conv_extent(e, 3, 2, 1);
  for (std::size_t b = 0; b + 1 < c.block_layers.size(); ++b) e /= 2;
  return e;
}

}  // namespace

// ---------------------------------------------------------------- activations

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& logits) {
  Tensor<Scalar> p(logits.shape());
  for (Index i = 0; i < logits.size(); ++i) {
    const Scalar z = logits.data()[i];
    if (z >= 0) {
      p.data()[i] = Scalar(1) / (Scalar(1) + std::exp(-z));
    } else {
      const Scalar e = std::exp(z);
      p.data()[i] = e / (Scalar(1) + e);
    }
  }
  return p;
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  Tensor<Scalar> p(logits.shape());
  auto in = logits.rows();
  auto out = p.rows();
  for (Index b = 0; b < logits.batch(); ++b) {
    out.row(b) = (in.row(b).array() - in.row(b).maxCoeff()).exp().matrix();
    out.row(b) /= out.row(b).sum();
  }
  return p;
}

double Prediction::covid_score() const {
  for (const auto& [label, p] : probabilities) {
    if (label == Label::kCovid19) return p;
  }
  return 0.0;
}

// ---------------------------------------------------------------- aux extractors

template <typename Scalar>
ConstantAuxExtractor<Scalar>::ConstantAuxExtractor(std::string name, std::vector<double> values)
    : name_(std::move(name)), values_(std::move(values)) {
  for (double& v : values_) v = std::clamp(v, 0.0, 1.0);
}

template <typename Scalar>
Tensor<Scalar> ConstantAuxExtractor<Scalar>::extract(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.batch(), dim(), 1, 1);
  for (Index b = 0; b < x.batch(); ++b) {
    for (int i = 0; i < dim(); ++i) out(b, i, 0, 0) = static_cast<Scalar>(values_[i]);
  }
  return out;
}

template <typename Scalar>
NetworkAuxExtractor<Scalar>::NetworkAuxExtractor(std::unique_ptr<Network<Scalar>> net)
    : net_(std::move(net)) {
  if (!net_ || net_->spec().kind != ModelKind::kAux) {
    throw InvalidArgument("auxiliary extractor needs an aux network");
  }
}

template <typename Scalar>
NetworkAuxExtractor<Scalar>::~NetworkAuxExtractor() = default;

template <typename Scalar>
const std::string& NetworkAuxExtractor<Scalar>::name() const {
  return net_->spec().aux.front().name;
}

template <typename Scalar>
int NetworkAuxExtractor<Scalar>::dim() const {
  return net_->spec().outputs;
}

template <typename Scalar>
Tensor<Scalar> NetworkAuxExtractor<Scalar>::extract(const Tensor<Scalar>& x) {
  Tensor<Scalar> p = sigmoid(net_->forward(x, Mode::kInfer));
  p.array() = p.array().max(Scalar(0)).min(Scalar(1));
  return p;
}

template <typename Scalar>
void NetworkAuxExtractor<Scalar>::collect(const std::string& prefix, NamedTensors<Scalar>& out) {
  for (auto t : net_->tensors()) {
    t.name = prefix + t.name;
    t.grad = nullptr;
    out.push_back(t);
  }
}

// ---------------------------------------------------------------- Network

template <typename Scalar>
Network<Scalar>::Network(const ModelSpec& spec, std::vector<std::unique_ptr<AuxExtractor<Scalar>>> aux)
    : spec_(spec),
      backbone_(spec.backbone),
      attention_(backbone_.out_channels(), spec.attention),
      aux_(std::move(aux)) {
  spec_.validate();
  const Index c = backbone_.out_channels();
  const Index fh = feature_height();
  const Index fw = feature_width();
  if (fh < 1 || fw < 1) throw ShapeMismatch("input size is too small for the backbone");
  Index head_in = 0;
  switch (spec_.kind) {
    case ModelKind::kCT:
      head_norm_ = BatchNorm2d<Scalar>(c);
      head_in = c * fh * fw;
      if (!aux_.empty()) throw InvalidArgument("ct network takes no auxiliary extractors");
      break;
    case ModelKind::kCXR:
      head_in = c;
      if (aux_.size() != spec_.aux.size()) {
        throw MissingAuxCheckpoint("cxr network needs " + std::to_string(spec_.aux.size()) +
                                   " auxiliary extractors, got " + std::to_string(aux_.size()));
      }
      for (std::size_t i = 0; i < aux_.size(); ++i) {
        if (!aux_[i]) throw MissingAuxCheckpoint("auxiliary extractor '" + spec_.aux[i].name + "' is not loaded");
        if (aux_[i]->dim() != spec_.aux[i].dim || aux_[i]->name() != spec_.aux[i].name) {
          throw ShapeMismatch("auxiliary extractor '" + aux_[i]->name() + "' (dim " +
                              std::to_string(aux_[i]->dim()) + ") does not fill slot '" +
                              spec_.aux[i].name + "'");
        }
        head_in += aux_[i]->dim();
      }
      break;
    case ModelKind::kAux:
      head_in = c;
      if (!aux_.empty()) throw InvalidArgument("aux network takes no auxiliary extractors");
      break;
  }
  if (spec_.hidden > 0) {
    fc1_ = Linear<Scalar>(head_in, spec_.hidden);
    fc2_ = Linear<Scalar>(spec_.hidden, spec_.outputs);
  } else {
    fc2_ = Linear<Scalar>(head_in, spec_.outputs);
  }
}

template <typename Scalar>
Network<Scalar>::~Network() = default;

template <typename Scalar>
Index Network<Scalar>::feature_height() const {
  return backbone_extent(spec_.backbone, spec_.preprocess.target_size.height);
}

template <typename Scalar>
Index Network<Scalar>::feature_width() const {
  return backbone_extent(spec_.backbone, spec_.preprocess.target_size.width);
}

template <typename Scalar>
void Network<Scalar>::init(Rng& rng) {
  backbone_.init(rng);
  attention_.init(rng);
  if (spec_.hidden > 0) fc1_.init(rng);
  fc2_.init(rng);
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::features(const Tensor<Scalar>& x, Mode mode) {
  const auto& t = spec_.preprocess.target_size;
  require_shape(x, 3, t.height, t.width, "network input");
  if (spec_.kind == ModelKind::kCXR) {
    Tensor<Scalar> ctx = aux_[0]->extract(x);
    for (std::size_t i = 1; i < aux_.size(); ++i) ctx = concat_channels(ctx, aux_[i]->extract(x));
    aux_context_ = std::move(ctx);
  }
  Tensor<Scalar> b = backbone_.forward(x, mode);
  Tensor<Scalar> f = attention_.forward(b, mode);
  if (records(mode)) {
    feature_shape_ = f.shape();
    backbone_out_ = std::move(b);
  }
  return f;
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::head(const Tensor<Scalar>& feats, Mode mode) {
  require_shape(feats, feature_channels(), feature_height(), feature_width(), "network head");
  Tensor<Scalar> h;
  switch (spec_.kind) {
    case ModelKind::kCT:
      h = head_norm_.forward(feats, mode);
      break;
    case ModelKind::kCXR:
      if (aux_context_.batch() != feats.batch()) {
        throw ShapeMismatch("cxr head called without auxiliary outputs for this batch");
      }
      h = concat_channels(pool_.forward(feats, mode), aux_context_);
      if (records(mode)) head_input_ = h;
      break;
    case ModelKind::kAux:
      h = pool_.forward(feats, mode);
      break;
  }
  if (spec_.hidden > 0) h = relu_.forward(fc1_.forward(h, mode), mode);
  return fc2_.forward(h, mode);
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::head_backward(const Tensor<Scalar>& grad_logits) {
  Tensor<Scalar> g = fc2_.backward(grad_logits);
  if (spec_.hidden > 0) g = fc1_.backward(relu_.backward(g));
  switch (spec_.kind) {
    case ModelKind::kCT:
      return head_norm_.backward(g);
    case ModelKind::kCXR: {
      Tensor<Scalar> main, aux_part;
      split_channels(g, feature_channels(), main, aux_part);
      return pool_.backward(main);
    }
    case ModelKind::kAux:
      break;
  }
  return pool_.backward(g);
}

template <typename Scalar>
void Network<Scalar>::features_backward(const Tensor<Scalar>& grad_feats) {
  backbone_.backward(attention_.backward(grad_feats));
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::attention_backward(const Tensor<Scalar>& grad_feats) {
  return attention_.backward(grad_feats);
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  return head(features(x, mode), mode);
}

template <typename Scalar>
void Network<Scalar>::backward(const Tensor<Scalar>& grad_logits) {
  features_backward(head_backward(grad_logits));
}

template <typename Scalar>
void Network<Scalar>::collect_head(NamedTensors<Scalar>& out) {
  if (spec_.kind == ModelKind::kCT) head_norm_.collect("head.norm.", out);
  if (spec_.hidden > 0) fc1_.collect("head.fc1.", out);
  fc2_.collect("head.fc2.", out);
}

template <typename Scalar>
NamedTensors<Scalar> Network<Scalar>::tensors() {
  NamedTensors<Scalar> out;
  backbone_.collect("backbone.", out);
  attention_.collect("attention.", out);
  collect_head(out);
  for (auto& a : aux_) a->collect("aux." + a->name() + ".", out);
  return out;
}

template <typename Scalar>
NamedTensors<Scalar> Network<Scalar>::trainable() {
  NamedTensors<Scalar> out;
  for (const auto& t : tensors()) {
    if (t.grad) out.push_back(t);
  }
  return out;
}

template <typename Scalar>
NamedTensors<Scalar> Network<Scalar>::attention_and_head() {
  NamedTensors<Scalar> out;
  attention_.collect("attention.", out);
  collect_head(out);
  return out;
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::probabilities(const Tensor<Scalar>& logits) const {
  return spec_.activation == HeadActivation::kSoftmax ? softmax(logits) : sigmoid(logits);
}

template <typename Scalar>
std::vector<Prediction> Network<Scalar>::predict(const Tensor<Scalar>& logits) const {
  const Tensor<Scalar> p = probabilities(logits);
  std::vector<Prediction> out(static_cast<std::size_t>(p.batch()));
  for (Index b = 0; b < p.batch(); ++b) {
    Prediction& pred = out[static_cast<std::size_t>(b)];
    if (spec_.kind == ModelKind::kCT) {
      int best = 0;
      for (int k = 0; k < kNumClasses; ++k) {
        const double v = static_cast<double>(p(b, k, 0, 0));
        pred.probabilities.emplace_back(kAllLabels[k], v);
        if (v > pred.probabilities[best].second) best = k;
      }
      pred.predicted_label = kAllLabels[best];
      pred.binary = pred.predicted_label == Label::kCovid19 ? 1 : 0;
    } else if (spec_.kind == ModelKind::kCXR) {
      const double v = static_cast<double>(p(b, 0, 0, 0));
      pred.probabilities = {{Label::kCovid19, v}, {Label::kNormal, 1.0 - v}};
      pred.binary = v >= 0.5 ? 1 : 0;
      pred.predicted_label = pred.binary ? Label::kCovid19 : Label::kNormal;
    } else {
      throw InvalidArgument("auxiliary networks do not produce screening predictions");
    }
  }
  return out;
}

template class ConstantAuxExtractor<float>;
template class ConstantAuxExtractor<double>;
template class NetworkAuxExtractor<float>;
template class NetworkAuxExtractor<double>;
template class Network<float>;
template class Network<double>;
template Tensor<float> sigmoid(const Tensor<float>&);
template Tensor<double> sigmoid(const Tensor<double>&);
template Tensor<float> softmax(const Tensor<float>&);
template Tensor<double> softmax(const Tensor<double>&);

}  // namespace covidscreen::nn

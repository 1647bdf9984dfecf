#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "covidscreen/core/labels.hpp"
#include "covidscreen/nn/densenet.hpp"
#include "covidscreen/nn/layers.hpp"
#include "covidscreen/nn/model_spec.hpp"
#include "covidscreen/nn/pyramid_attention.hpp"

namespace covidscreen::nn {

// Frozen feature source for the CXR head. Outputs are probabilities in [0,1].
template <typename Scalar>
class AuxExtractor {
 public:
  virtual ~AuxExtractor() = default;
  virtual const std::string& name() const = 0;
  virtual int dim() const = 0;
  // (B, 3, H, W) -> (B, dim, 1, 1)
  virtual Tensor<Scalar> extract(const Tensor<Scalar>& x) = 0;
  // Persisted tensors, all without gradients.
  virtual void collect(const std::string& prefix, NamedTensors<Scalar>& out) = 0;
};

template <typename Scalar>
class ConstantAuxExtractor final : public AuxExtractor<Scalar> {
 public:
  ConstantAuxExtractor(std::string name, std::vector<double> values);

  const std::string& name() const override { return name_; }
  int dim() const override { return static_cast<int>(values_.size()); }
  Tensor<Scalar> extract(const Tensor<Scalar>& x) override;
  void collect(const std::string&, NamedTensors<Scalar>&) override {}

 private:
  std::string name_;
  std::vector<double> values_;
};

template <typename Scalar>
class Network;

// Wraps an auxiliary classifier network (backbone + attention + pooled linear
// head) and exposes its sigmoid outputs.
template <typename Scalar>
class NetworkAuxExtractor final : public AuxExtractor<Scalar> {
 public:
  explicit NetworkAuxExtractor(std::unique_ptr<Network<Scalar>> net);
  ~NetworkAuxExtractor() override;

  const std::string& name() const override;
  int dim() const override;
  Tensor<Scalar> extract(const Tensor<Scalar>& x) override;
  void collect(const std::string& prefix, NamedTensors<Scalar>& out) override;
  Network<Scalar>& network() { return *net_; }

 private:
  std::unique_ptr<Network<Scalar>> net_;
};

struct Prediction {
  // CT: one entry per class (COVID19, OTHER_PNEUMONIA, NORMAL).
  // CXR: {COVID19: p, NORMAL: 1 - p}.
  std::vector<std::pair<Label, double>> probabilities;
  Label predicted_label = Label::kNormal;
  int binary = 0;  // CXR only: 1 iff p(COVID19) >= 0.5
  double covid_score() const;
};

// One screening network. Depending on the spec kind:
//   ct : backbone -> attention -> batch-norm -> flatten -> [fc -> relu] -> fc(3)
//   cxr: backbone -> attention -> gap -> concat(aux...) -> fc -> relu -> fc(1)
//   aux: backbone -> attention -> gap -> [fc -> relu] -> fc(dim)
// The forward pass is split at the attention output, which is the feature
// map used for class activation maps.
template <typename Scalar>
class Network {
 public:
  // Auxiliary extractors are required for cxr specs (one per spec.aux entry,
  // in order); MissingAuxCheckpoint otherwise.
  explicit Network(const ModelSpec& spec,
                   std::vector<std::unique_ptr<AuxExtractor<Scalar>>> aux = {});
  ~Network();

  const ModelSpec& spec() const { return spec_; }
  void init(Rng& rng);

  // Logits (B, outputs, 1, 1).
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  // Accumulates gradients of all trainable tensors.
  void backward(const Tensor<Scalar>& grad_logits);

  // Split form. `features` caches any per-batch auxiliary outputs that `head`
  // consumes, so the two must be called on the same batch.
  Tensor<Scalar> features(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> head(const Tensor<Scalar>& feats, Mode mode);
  // Returns the gradient with respect to the feature map.
  Tensor<Scalar> head_backward(const Tensor<Scalar>& grad_logits);
  void features_backward(const Tensor<Scalar>& grad_feats);
  // Backbone output of the last recorded `features` pass, and the gradient
  // with respect to it given one for the feature map.
  const Tensor<Scalar>& last_backbone_output() const { return backbone_out_; }
  Tensor<Scalar> attention_backward(const Tensor<Scalar>& grad_feats);

  // Everything persisted in a checkpoint, in collection order. Frozen
  // auxiliary tensors and batch-norm statistics carry no gradient.
  NamedTensors<Scalar> tensors();
  // The subset the optimizer updates.
  NamedTensors<Scalar> trainable();
  // Attention and head parameters only.
  NamedTensors<Scalar> attention_and_head();

  // Concatenated head input of the last cxr forward pass, (B, D + 8, 1, 1).
  const Tensor<Scalar>& last_head_input() const { return head_input_; }

  std::vector<Prediction> predict(const Tensor<Scalar>& logits) const;
  // sigmoid or softmax per the spec.
  Tensor<Scalar> probabilities(const Tensor<Scalar>& logits) const;

  Index feature_channels() const { return backbone_.out_channels(); }
  Index feature_height() const;
  Index feature_width() const;
  std::vector<std::unique_ptr<AuxExtractor<Scalar>>>& aux() { return aux_; }

 private:
  void collect_head(NamedTensors<Scalar>& out);

  ModelSpec spec_;
  DenseNet<Scalar> backbone_;
  PyramidAttention<Scalar> attention_;
  // Head.
  BatchNorm2d<Scalar> head_norm_;  // ct only
  GlobalAvgPool<Scalar> pool_;     // cxr/aux only
  Linear<Scalar> fc1_;             // unused when hidden == 0
  ReLU<Scalar> relu_;
  Linear<Scalar> fc2_;
  std::vector<std::unique_ptr<AuxExtractor<Scalar>>> aux_;
  Tensor<Scalar> aux_context_;
  Tensor<Scalar> head_input_;
  Tensor<Scalar> backbone_out_;
  typename Tensor<Scalar>::Shape feature_shape_{};
};

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& logits);
// Row-wise softmax over the channel dimension of (B, K, 1, 1).
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits);

}  // namespace covidscreen::nn

#include "covidscreen/train/loss.hpp"

#include <algorithm>
#include <cmath>

#include "covidscreen/nn/network.hpp"

namespace covidscreen::train {

namespace {

template <typename Scalar>
void require_same(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeMismatch("loss inputs differ in shape: " + a.shape().str() + " vs " + b.shape().str());
  }
  if (a.empty()) throw ShapeMismatch("loss on an empty batch");
}

}  // namespace

template <typename Scalar>
double bce_loss(const Tensor<Scalar>& probs, const Tensor<Scalar>& targets, double eps) {
  require_same(probs, targets);
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(static_cast<double>(probs.data()[i]), eps, 1.0 - eps);
    const double y = static_cast<double>(targets.data()[i]);
    total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return total / static_cast<double>(probs.size());
}

template <typename Scalar>
double bce_with_logits(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets,
                       Tensor<Scalar>& grad, double eps) {
  require_same(logits, targets);
  const Tensor<Scalar> probs = nn::sigmoid(logits);
  grad = Tensor<Scalar>(logits.shape());
  const double inv_n = 1.0 / static_cast<double>(logits.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double raw = static_cast<double>(probs.data()[i]);
    const double p = std::clamp(raw, eps, 1.0 - eps);
    const double y = static_cast<double>(targets.data()[i]);
    total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    const bool clamped = raw < eps || raw > 1.0 - eps;
    grad.data()[i] = clamped ? Scalar(0) : static_cast<Scalar>((raw - y) * inv_n);
  }
  return total * inv_n;
}

template <typename Scalar>
double softmax_cross_entropy(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets,
                             Tensor<Scalar>& grad, double eps) {
  require_same(logits, targets);
  const Tensor<Scalar> probs = nn::softmax(logits);
  grad = Tensor<Scalar>(logits.shape());
  const double inv_b = 1.0 / static_cast<double>(logits.batch());
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double p = static_cast<double>(probs.data()[i]);
    const double y = static_cast<double>(targets.data()[i]);
    if (y != 0.0) total -= y * std::log(std::max(p, eps));
    grad.data()[i] = static_cast<Scalar>((p - y) * inv_b);
  }
  return total * inv_b;
}

template double bce_loss(const Tensor<float>&, const Tensor<float>&, double);
template double bce_loss(const Tensor<double>&, const Tensor<double>&, double);
template double bce_with_logits(const Tensor<float>&, const Tensor<float>&, Tensor<float>&, double);
template double bce_with_logits(const Tensor<double>&, const Tensor<double>&, Tensor<double>&, double);
template double softmax_cross_entropy(const Tensor<float>&, const Tensor<float>&, Tensor<float>&, double);
template double softmax_cross_entropy(const Tensor<double>&, const Tensor<double>&, Tensor<double>&, double);

}  // namespace covidscreen::train

#pragma once

#include "covidscreen/core/tensor.hpp"

namespace covidscreen::train {

inline constexpr double kProbClamp = 1e-7;

// Mean over batch and outputs of -[y ln p + (1 - y) ln(1 - p)], with p
// clamped into [eps, 1 - eps]. Throws ShapeMismatch.
template <typename Scalar>
double bce_loss(const Tensor<Scalar>& probs, const Tensor<Scalar>& targets, double eps = kProbClamp);


// BCE on sigmoid(logits). `grad` receives dLoss/dlogits; entries where the
// clamp is active get zero gradient, matching the clamped loss exactly.
template <typename Scalar>
double bce_with_logits(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets,
                       Tensor<Scalar>& grad, double eps = kProbClamp);

// Categorical cross-entropy on softmax(logits) over the channel axis, averaged
// over the batch. Targets are one-hot rows.
template <typename Scalar>
double softmax_cross_entropy(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets,
                             Tensor<Scalar>& grad, double eps = kProbClamp);

}  // namespace covidscreen::train

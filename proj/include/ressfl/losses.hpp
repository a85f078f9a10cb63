#pragma once

#include <span>

#include "ressfl/tensor.hpp"

namespace ressfl {

struct LossResult {
  double value = 0.0;
  Tensor grad;  // d value / d prediction
};

/// Mean softmax cross-entropy over the batch; logits [N, K].
LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Mean squared error over every element.
LossResult mse_loss(const Tensor& prediction, const Tensor& target);

}  // namespace ressfl

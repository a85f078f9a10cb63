#include "ressfl/losses.hpp"

#include <algorithm>
#include <cmath>

#include "ressfl/error.hpp"

namespace ressfl {

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross-entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  LossResult r{0.0, Tensor(logits.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ConfigError("cross-entropy: label " + std::to_string(labels[i]) + " out of range");
    }
    const double* z = logits.data().data() + i * k;
    const double zmax = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - zmax);
    const double log_sum = std::log(sum) + zmax;
    r.value += log_sum - z[labels[i]];
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(z[j] - log_sum);
      r.grad[i * k + j] = (p - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0)) / n;
    }
  }
  r.value /= static_cast<double>(n);
  if (!std::isfinite(r.value)) throw NumericError("cross-entropy loss is not finite");
  return r;
}

LossResult mse_loss(const Tensor& prediction, const Tensor& target) {
  require_same_shape(prediction, target, "mse loss");
  LossResult r{0.0, Tensor(prediction.shape())};
  const double inv = 1.0 / static_cast<double>(prediction.size());
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = prediction[i] - target[i];
    r.value += d * d;
    r.grad[i] = 2.0 * d * inv;
  }
  r.value *= inv;
  if (!std::isfinite(r.value)) throw NumericError("mse loss is not finite");
  return r;
}

}  // namespace ressfl

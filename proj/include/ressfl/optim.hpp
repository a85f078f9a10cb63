#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ressfl/layers.hpp"

namespace ressfl {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kSgd;
  double learning_rate = 0.05;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step_count = 0;
  std::vector<std::vector<double>> first;   // SGD momentum / Adam m
  std::vector<std::vector<double>> second;  // Adam v
};

/// w <- w - lr * buf,  buf <- momentum * buf + g.
void sgd_step(OptimizerState& state, std::span<const ParamRef> params);
/// Bias-corrected Adam.
void adam_step(OptimizerState& state, std::span<const ParamRef> params);

/// Thin owner of an OptimizerState. Frozen parameters keep their gradient
/// but are never written.
class Optimizer {
 public:
  static Optimizer sgd(double learning_rate, double momentum = 0.0);
  static Optimizer adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                        double epsilon = 1e-8);

  void step(std::span<const ParamRef> params);
  void set_learning_rate(double lr);
  double learning_rate() const noexcept { return state_.learning_rate; }
  const OptimizerState& state() const noexcept { return state_; }

 private:
  OptimizerState state_;
};

/// Step decay x0.2 at 50% and again at 80% of `total_epochs`; `epoch` is
/// zero-based.
double step_decay(double base_lr, int epoch, int total_epochs);

}  // namespace ressfl

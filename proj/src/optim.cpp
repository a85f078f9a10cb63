#include "ressfl/optim.hpp"

#include <cmath>

#include "ressfl/error.hpp"

namespace ressfl {

namespace {

void check_lr(double lr) {
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw ConfigError("learning rate must be positive, got " + std::to_string(lr));
  }
}

void ensure_buffers(std::vector<std::vector<double>>& buffers, std::span<const ParamRef> params) {
  if (buffers.empty()) {
    for (const auto& p : params) buffers.emplace_back(p.tensor->size(), 0.0);
    return;
  }
  if (buffers.size() != params.size()) {
    throw ShapeError("optimizer: parameter count changed from " + std::to_string(buffers.size()) +
                     " to " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (buffers[i].size() != params[i].tensor->size()) {
      throw ShapeError("optimizer: parameter " + std::to_string(i) + " size changed");
    }
  }
}

void check_grads(std::span<const ParamRef> params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = *params[i].tensor;
    if (t.grad().size() != t.size()) {
      throw ShapeError("optimizer: gradient of parameter " + std::to_string(i) +
                       " does not match its shape " + shape_str(t.shape()));
    }
  }
}

}  // namespace

void sgd_step(OptimizerState& state, std::span<const ParamRef> params) {
  if (state.kind != OptimizerKind::kSgd) throw StateError("sgd_step on a non-SGD optimizer");
  check_lr(state.learning_rate);
  check_grads(params);
  ensure_buffers(state.first, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].frozen) continue;
    auto w = params[i].tensor->data();
    auto g = params[i].tensor->grad();
    auto& buf = state.first[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      buf[j] = state.momentum * buf[j] + g[j];
      w[j] -= state.learning_rate * buf[j];
    }
  }
  ++state.step_count;
}

void adam_step(OptimizerState& state, std::span<const ParamRef> params) {
  if (state.kind != OptimizerKind::kAdam) throw StateError("adam_step on a non-Adam optimizer");
  check_lr(state.learning_rate);
  check_grads(params);
  ensure_buffers(state.first, params);
  ensure_buffers(state.second, params);
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].frozen) continue;
    auto w = params[i].tensor->data();
    auto g = params[i].tensor->grad();
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

Optimizer Optimizer::sgd(double learning_rate, double momentum) {
  check_lr(learning_rate);
  Optimizer o;
  o.state_.kind = OptimizerKind::kSgd;
  o.state_.learning_rate = learning_rate;
  o.state_.momentum = momentum;
  return o;
}

Optimizer Optimizer::adam(double learning_rate, double beta1, double beta2, double epsilon) {
  check_lr(learning_rate);
  Optimizer o;
  o.state_.kind = OptimizerKind::kAdam;
  o.state_.learning_rate = learning_rate;
  o.state_.beta1 = beta1;
  o.state_.beta2 = beta2;
  o.state_.epsilon = epsilon;
  return o;
}

void Optimizer::step(std::span<const ParamRef> params) {
  if (state_.kind == OptimizerKind::kSgd) {
    sgd_step(state_, params);
  } else {
    adam_step(state_, params);
  }
}

void Optimizer::set_learning_rate(double lr) {
  check_lr(lr);
  state_.learning_rate = lr;
}

double step_decay(double base_lr, int epoch, int total_epochs) {
  double lr = base_lr;
  if (epoch >= 0.5 * total_epochs) lr *= 0.2;
  if (epoch >= 0.8 * total_epochs) lr *= 0.2;
  return lr;
}

}  // namespace ressfl

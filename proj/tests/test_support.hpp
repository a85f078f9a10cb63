#pragma once

// Shared helpers for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ressfl/network.hpp"
#include "ressfl/rng.hpp"

namespace ressfl::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

/// Central differences of a scalar function over every element of `x`.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, std::vector<double>& x,
                                            double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

struct GradCheck {
  double input_error = 0.0;
  double worst_param_error = 0.0;
};

/// Checks backward() of `net` against finite differences of
/// L = sum(weights * net(x)) for the input and every parameter.
inline GradCheck check_network_gradients(Network net, Tensor x, Rng& rng, double h = 1e-5) {
  const Shape out_shape = net.output_shape(x.shape());
  const Tensor weights = random_tensor(out_shape, rng);
  auto loss = [&]() {
    const Tensor y = net.infer(x);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * weights[i];
    return s;
  };
  net.zero_grad();
  net.forward(x);
  const Tensor gx = net.backward(weights);

  GradCheck r;
  r.input_error = relative_error(gx.values(), numeric_gradient(loss, x.values(), h));
  for (auto& p : net.parameters()) {
    std::vector<double> analytic(p.tensor->grad().begin(), p.tensor->grad().end());
    const auto numeric = numeric_gradient(loss, p.tensor->values(), h);
    r.worst_param_error = std::max(r.worst_param_error, relative_error(analytic, numeric));
  }
  return r;
}

}  // namespace ressfl::testing

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ressfl/layers.hpp"

namespace ressfl {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Sequential stack of layers. Plain value type: copying a network copies
/// its parameters.
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<Layer> layers) : layers_(std::move(layers)) {}

  void add(Layer layer) { layers_.push_back(std::move(layer)); }
  void append(const Network& other);

  std::size_t size() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }
  Layer& layer(std::size_t i) { return layers_.at(i); }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  std::vector<Layer>& layers() noexcept { return layers_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::size_t weighted_count() const;

  Tensor forward(const Tensor& input);
  Tensor infer(const Tensor& input) const;
  /// Propagates `grad_output` through the cached forward pass, accumulating
  /// parameter gradients. Returns the gradient w.r.t. the network input.
  Tensor backward(const Tensor& grad_output);

  Shape output_shape(const Shape& input) const;

  std::vector<ParamRef> parameters();
  std::size_t parameter_count() const;
  /// Parameters named "<prefix><layer index>.<param>".
  std::vector<NamedTensor> named_parameters(const std::string& prefix = "") const;
  /// Copies values from `source` by name; throws ShapeError naming the
  /// offending tensor, or ConfigError when a name is missing.
  void load_parameters(const std::vector<NamedTensor>& source, const std::string& prefix = "");

  /// Flat copy of every parameter value, in parameters() order.
  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

  void zero_grad();
  void clear_cache();
  void set_frozen(bool frozen);
  void init_kaiming(Rng& rng);

 private:
  std::vector<Layer> layers_;
};

/// Sum of per-layer FLOPs along the forward path.
std::uint64_t count_flops(const Network& network, const Shape& input_shape);

}  // namespace ressfl

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ressfl/rng.hpp"
#include "ressfl/tensor.hpp"

namespace ressfl {

enum class LayerKind {
  kDense,
  kConv2D,
  kConvTranspose2D,
  kReLU,
  kSigmoid,
  kMaxPool2x2,
  kFlatten,
  /// relu(x + conv(relu(conv(x)))), both convs k3/s1/p1, channel preserving.
  kResidual,
};

std::string to_string(LayerKind kind);

struct ConvHyper {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Mutable view of one trainable tensor.
struct ParamRef {
  Tensor* tensor = nullptr;
  bool frozen = false;
};

/// One layer of a sequential network. Shapes include the batch dimension.
///
/// `forward` caches what `backward` needs; `infer` is the cache-free const
/// path. `backward` accumulates parameter gradients and returns the input
/// gradient; it consumes the cache, so a second call without a fresh forward
/// is an error.
class Layer {
 public:
  static Layer dense(std::size_t in_features, std::size_t out_features);
  static Layer conv2d(const ConvHyper& hyper);
  /// Weight layout [in, out, k, k]; output size (h-1)*s - 2p + k.
  static Layer conv_transpose2d(const ConvHyper& hyper);
  static Layer relu();
  static Layer sigmoid();
  static Layer maxpool2x2();
  static Layer flatten();
  static Layer residual(std::size_t channels);

  LayerKind kind() const noexcept { return kind_; }
  const ConvHyper& hyper() const noexcept { return hyper_; }
  bool weighted() const noexcept { return !params_.empty(); }
  std::string describe() const;

  Shape output_shape(const Shape& input) const;
  Tensor forward(const Tensor& input);
  Tensor infer(const Tensor& input) const;
  Tensor backward(const Tensor& grad_output);
  bool has_cache() const noexcept { return cached_; }
  void clear_cache();

  /// Kaiming-uniform (fan-in) weights, zero bias. The second conv of a
  /// residual branch starts at zero so deep stacks begin near identity.
  void init_kaiming(Rng& rng);

  std::vector<Tensor>& params() noexcept { return params_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }
  /// Parameter names relative to the layer ("weight", "bias", ...).
  std::vector<std::string> param_names() const;

  bool frozen() const noexcept { return frozen_; }
  void set_frozen(bool frozen) noexcept { frozen_ = frozen; }

  /// Multiply-add counted as 2; activations 1 per element.
  std::uint64_t flops(const Shape& input) const;

 private:
  explicit Layer(LayerKind kind) : kind_(kind) {}
  struct Cache {
    Shape in_shape;
    std::vector<std::vector<double>> slots;
    std::vector<std::size_t> argmax;
  };

  Tensor run(const Tensor& input, Cache* cache) const;
  void check_input(const Shape& input) const;

  LayerKind kind_;
  ConvHyper hyper_;
  std::vector<Tensor> params_;
  bool frozen_ = false;

  bool cached_ = false;
  Cache cache_;
};

}  // namespace ressfl

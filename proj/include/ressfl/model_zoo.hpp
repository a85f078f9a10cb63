#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ressfl/network.hpp"

namespace ressfl {

inline constexpr std::string_view kDefaultArch = "conv8-pool-conv16-pool-conv32-fc";
inline constexpr std::size_t kDefaultCutLayer = 2;
inline constexpr std::size_t kDefaultInversionWidth = 8;

/// One token of an architecture string `conv<C>[k<K>][s<S>] | pool | fc[<N>]`
/// joined by '-'. A bare trailing `fc` means "num_classes outputs".
struct ArchToken {
  enum class Kind { kConv, kPool, kFc } kind;
  std::size_t channels = 0;  // conv out channels / fc outputs (0 = num_classes)
  std::size_t kernel = 3;
  std::size_t stride = 1;
};

std::vector<ArchToken> parse_arch(std::string_view arch);

/// Bottleneck pair written "C<x>-S<y>": channel size x, stride y.
struct BottleneckConfig {
  std::size_t channels = 8;
  std::size_t stride = 1;

  static BottleneckConfig parse(std::string_view text);
  std::string str() const;
  friend bool operator==(const BottleneckConfig&, const BottleneckConfig&) = default;
};

/// Classifier split at `cut_layer` weighted layers. The client part also
/// holds the non-weighted layers (ReLU/pool) that follow its last weighted
/// layer, plus the bottleneck pair when present.
struct SplitModel {
  std::string arch;
  std::size_t cut_layer = kDefaultCutLayer;
  Shape input_shape;  // [C, H, W]
  std::size_t num_classes = 10;
  std::uint64_t seed = 0;
  std::optional<BottleneckConfig> bottleneck;
  Network client;
  Network server;

  /// Per-sample activation shape [C, h, w] sent to the server.
  Shape activation_shape() const;
  /// Client followed by server as one network.
  Network composed() const;
};

/// Builds and initialises the unsplit network; initialisation does not
/// depend on where it is later cut.
Network build_classifier(std::string_view arch, const Shape& input_shape, std::size_t num_classes,
                         std::uint64_t seed);

SplitModel build_split_classifier(std::string_view arch, std::size_t cut_layer,
                                  const Shape& input_shape, std::size_t num_classes,
                                  std::uint64_t seed);

/// Appends l_in (channels -> x, k3, stride y, pad 1) and l_out (x -> channels,
/// k3, stride 1, pad 1), each followed by ReLU, to the client part. A server
/// Dense whose fan-in no longer matches is re-initialised for the new size.
SplitModel insert_bottleneck(SplitModel model, const BottleneckConfig& cfg);

enum class InversionTier { kL0 = 0, kL1 = 1, kL2 = 2, kL3 = 3 };

InversionTier parse_tier(std::string_view text);
std::string to_string(InversionTier tier);
std::size_t tier_width(InversionTier tier, std::size_t base_width);
std::size_t tier_residual_blocks(InversionTier tier);

/// Decoder from `activation_shape` [C, h, w] to `image_shape` [C, H, W]:
/// an input conv, then two plain convs (L0) or residual blocks (2/4/6 at
/// width x1/x2/x4 for L1/L2/L3), then stride-2 transposed convs up to the
/// image size and a Sigmoid head.
Network build_inversion_model(InversionTier tier, const Shape& activation_shape,
                              const Shape& image_shape, std::size_t base_width,
                              std::uint64_t seed);

}  // namespace ressfl

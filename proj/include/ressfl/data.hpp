#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ressfl/network.hpp"
#include "ressfl/tensor.hpp"

namespace ressfl {

/// Images [N, C, H, W] in [0, 1] with integer labels in [0, num_classes).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  /// Per-sample image shape [C, H, W].
  Shape image_shape() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Throws ConfigError when labels or pixels violate the invariants.
  void validate() const;
};

/// Classic MNIST IDX files (big-endian, magic 0x803 images / 0x801 labels).
/// Pixel bytes are scaled by 1/255.
Dataset load_idx_dataset(const std::filesystem::path& images_path,
                         const std::filesystem::path& labels_path);
void save_idx_dataset(const Dataset& data, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path);

/// Class-conditional oriented gratings with per-sample phase, contrast,
/// a random bright/dark blob and pixel noise. Labels are assigned
/// round-robin. Deterministic per seed.
Dataset synth_dataset(std::size_t num_samples, int num_classes, const Shape& image_shape,
                      std::uint64_t seed);

struct ClientPartition {
  std::vector<std::vector<std::size_t>> shards;
};

/// Seeded shuffle then contiguous shards whose sizes differ by at most 1.
ClientPartition partition_clients(std::size_t num_samples, std::size_t num_clients,
                                  std::uint64_t seed);

struct TrainValSplit {
  Dataset train;
  Dataset validation;
};
/// Seeded split; the validation part doubles as the server's auxiliary set.
TrainValSplit split_train_validation(const Dataset& data, double validation_fraction,
                                     std::uint64_t seed);

/// Named parameter tensors plus string metadata.
struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::map<std::string, std::string> metadata;

  const Tensor& tensor(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout (little-endian): "RSFL", u32 version, u32 tensor count; per tensor
/// u16 name length, UTF-8 name, u8 rank, u32 dims, raw f64 values; then
/// u32 metadata count with (u16 len, key, u16 len, value) pairs; trailing
/// CRC32 of everything before it.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes to a sibling temp file then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace ressfl

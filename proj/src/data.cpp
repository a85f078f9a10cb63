#include "ressfl/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ressfl/error.hpp"
#include "ressfl/rng.hpp"

namespace ressfl {

namespace fs = std::filesystem;

Shape Dataset::image_shape() const {
  const Shape& s = images.shape();
  return Shape(s.begin() + 1, s.end());
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.num_classes = num_classes;
  out.images = images.gather_batch(indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  return out;
}

void Dataset::validate() const {
  if (images.rank() != 4) throw ConfigError("dataset images must be [N,C,H,W], got " + shape_str(images.shape()));
  if (images.dim(0) != labels.size()) {
    throw ConfigError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                      std::to_string(labels.size()) + " labels");
  }
  if (num_classes < 1) throw ConfigError("dataset num_classes must be >= 1");
  for (int l : labels) {
    if (l < 0 || l >= num_classes) {
      throw ConfigError("label " + std::to_string(l) + " outside [0," + std::to_string(num_classes) + ")");
    }
  }
  for (double v : images.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("pixel value outside [0,1]");
  }
}

// ---------------------------------------------------------------- files

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoError::Kind::kOpen, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoError::Kind::kWrite, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError(IoError::Kind::kWrite, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError(IoError::Kind::kWrite, "cannot rename onto " + path.string());
  }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------- IDX

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

}  // namespace

Dataset load_idx_dataset(const fs::path& images_path, const fs::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  if (img.size() < 4 || read_be32(img, 0) != kIdxImages) {
    throw IoError(IoError::Kind::kBadMagic, images_path.string() + ": not an IDX image file");
  }
  if (lab.size() < 4 || read_be32(lab, 0) != kIdxLabels) {
    throw IoError(IoError::Kind::kBadMagic, labels_path.string() + ": not an IDX label file");
  }
  if (img.size() < 16) throw IoError(IoError::Kind::kTruncated, images_path.string() + ": truncated header");
  if (lab.size() < 8) throw IoError(IoError::Kind::kTruncated, labels_path.string() + ": truncated header");

  const std::size_t n = read_be32(img, 4), rows = read_be32(img, 8), cols = read_be32(img, 12);
  const std::size_t n_labels = read_be32(lab, 4);
  if (img.size() < 16 + n * rows * cols) {
    throw IoError(IoError::Kind::kTruncated, images_path.string() + ": truncated pixel data");
  }
  if (lab.size() < 8 + n_labels) throw IoError(IoError::Kind::kTruncated, labels_path.string() + ": truncated labels");
  if (n != n_labels) {
    throw IoError(IoError::Kind::kCountMismatch,
                  "image count " + std::to_string(n) + " != label count " + std::to_string(n_labels));
  }
  if (n == 0 || rows == 0 || cols == 0) throw IoError(IoError::Kind::kTruncated, "empty IDX dataset");

  Dataset d;
  d.images = Tensor({n, 1, rows, cols});
  auto& px = d.images.values();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = img[16 + i] / 255.0;
  d.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.num_classes = std::max(10, max_label + 1);
  return d;
}

void save_idx_dataset(const Dataset& data, const fs::path& images_path, const fs::path& labels_path) {
  const Shape s = data.image_shape();
  if (s.size() != 3 || s[0] != 1) throw ShapeError("IDX export needs single-channel images, got " + shape_str(s));
  std::vector<std::uint8_t> img, lab;
  put_be32(img, kIdxImages);
  put_be32(img, static_cast<std::uint32_t>(data.size()));
  put_be32(img, static_cast<std::uint32_t>(s[1]));
  put_be32(img, static_cast<std::uint32_t>(s[2]));
  for (double v : data.images.values()) {
    img.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  put_be32(lab, kIdxLabels);
  put_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) lab.push_back(static_cast<std::uint8_t>(l));
  write_file_atomic(images_path, img);
  write_file_atomic(labels_path, lab);
}

// ---------------------------------------------------------------- synthetic

Dataset synth_dataset(std::size_t num_samples, int num_classes, const Shape& image_shape, std::uint64_t seed) {
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (num_samples < static_cast<std::size_t>(num_classes)) {
    throw ConfigError("num_samples must be >= num_classes");
  }
  if (image_shape.size() != 3) throw ShapeError("image shape must be [C,H,W], got " + shape_str(image_shape));
  const std::size_t C = image_shape[0], H = image_shape[1], W = image_shape[2];
  constexpr double kTwoPi = 2.0 * std::numbers::pi;

  // Orientation and spatial frequency per class; channel tint per class.
  struct ClassPattern {
    double angle, freq;
    std::vector<double> tint;
  };
  Rng class_rng = Rng::derive(seed, "synth-classes");
  std::vector<ClassPattern> patterns(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    auto& p = patterns[static_cast<std::size_t>(c)];
    p.angle = std::numbers::pi * (c + 0.25 * class_rng.uniform()) / num_classes;
    p.freq = 1.5 + (c % 3) + 0.3 * class_rng.uniform();
    for (std::size_t ch = 0; ch < C; ++ch) p.tint.push_back(C == 1 ? 1.0 : class_rng.uniform(0.5, 1.0));
  }

  Dataset d;
  d.num_classes = num_classes;
  d.images = Tensor({num_samples, C, H, W});
  d.labels.resize(num_samples);
  Rng rng = Rng::derive(seed, "synth-samples");
  auto& px = d.images.values();
  const double scale = static_cast<double>(std::max(H, W));
  for (std::size_t n = 0; n < num_samples; ++n) {
    const int label = static_cast<int>(n % static_cast<std::size_t>(num_classes));
    d.labels[n] = label;
    const auto& p = patterns[static_cast<std::size_t>(label)];
    const double phase = rng.uniform(0.0, kTwoPi);
    const double contrast = rng.uniform(0.25, 0.4);
    const double bx = rng.uniform(0.0, static_cast<double>(W)), by = rng.uniform(0.0, static_cast<double>(H));
    const double blob = rng.uniform(-0.3, 0.3);
    const double radius = rng.uniform(1.5, 3.0);
    const double ca = std::cos(p.angle), sa = std::sin(p.angle);
    for (std::size_t ch = 0; ch < C; ++ch) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double u = (ca * x + sa * y) / scale;
          const double dx = x - bx, dy = y - by;
          double v = 0.5 + contrast * p.tint[ch] * std::sin(kTwoPi * p.freq * u + phase) +
                     blob * std::exp(-(dx * dx + dy * dy) / (2 * radius * radius)) + 0.04 * rng.normal();
          px[((n * C + ch) * H + y) * W + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------- partition

ClientPartition partition_clients(std::size_t num_samples, std::size_t num_clients, std::uint64_t seed) {
  if (num_clients < 1) throw ConfigError("num_clients must be >= 1");
  if (num_clients > num_samples) {
    throw ConfigError("num_clients (" + std::to_string(num_clients) + ") exceeds num_samples (" +
                      std::to_string(num_samples) + ")");
  }
  std::vector<std::size_t> order(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) order[i] = i;
  Rng rng = Rng::derive(seed, "partition");
  rng.shuffle(order);

  ClientPartition part;
  part.shards.resize(num_clients);
  const std::size_t base = num_samples / num_clients, extra = num_samples % num_clients;
  std::size_t at = 0;
  for (std::size_t c = 0; c < num_clients; ++c) {
    const std::size_t len = base + (c < extra ? 1 : 0);
    part.shards[c].assign(order.begin() + static_cast<std::ptrdiff_t>(at),
                          order.begin() + static_cast<std::ptrdiff_t>(at + len));
    std::sort(part.shards[c].begin(), part.shards[c].end());
    at += len;
  }
  return part;
}

TrainValSplit split_train_validation(const Dataset& data, double validation_fraction, std::uint64_t seed) {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must be in (0,1)");
  }
  const std::size_t n = data.size();
  const auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n)));
  if (n_val == 0 || n_val >= n) throw ConfigError("dataset too small for a train/validation split");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::derive(seed, "train-val-split");
  rng.shuffle(order);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {data.subset(train), data.subset(val)};
}

// ---------------------------------------------------------------- checkpoint

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return nt.tensor;
  }
  throw ConfigError("checkpoint has no tensor '" + name + "'");
}

namespace {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    bytes.insert(bytes.end(), raw, raw + sizeof(T));
  }
  void put_string(const std::string& s) {
    if (s.size() > 0xFFFF) throw ConfigError("checkpoint string longer than 65535 bytes");
    put(static_cast<std::uint16_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + at_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    at_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::string get_string() {
    const auto len = get<std::uint16_t>();
    need(len);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + at_), len);
    at_ += len;
    return s;
  }
  std::size_t position() const { return at_; }
  std::size_t remaining() const { return bytes_.size() - at_; }

 private:
  void need(std::size_t n) const {
    if (at_ + n > bytes_.size()) throw IoError(IoError::Kind::kTruncated, "checkpoint truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t at_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes = {'R', 'S', 'F', 'L'};
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.put_string(name);
    if (t.rank() > 255) throw ShapeError("tensor rank too large for checkpoint");
    w.put(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put(static_cast<std::uint32_t>(d));
    for (double v : t.values()) w.put(v);
  }
  w.put(static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    w.put_string(k);
    w.put_string(v);
  }
  w.put(crc32_of(w.bytes));
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw IoError(IoError::Kind::kTruncated, "checkpoint truncated");
  if (std::memcmp(bytes.data(), "RSFL", 4) != 0) throw IoError(IoError::Kind::kBadMagic, "not an RSFL checkpoint");
  Reader r(bytes.subspan(4));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError(IoError::Kind::kVersionMismatch, "checkpoint version " + std::to_string(version) +
                                                       " unsupported (expected " +
                                                       std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.get<std::uint32_t>();
      if (d == 0) throw IoError(IoError::Kind::kChecksum, "checkpoint tensor '" + name + "' has a zero dim");
      numel *= d;
    }
    if (numel * sizeof(double) > r.remaining()) throw IoError(IoError::Kind::kTruncated, "checkpoint truncated");
    std::vector<double> values(numel);
    for (auto& v : values) v = r.get<double>();
    ckpt.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  const auto meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < meta; ++i) {
    std::string k = r.get_string();
    ckpt.metadata[std::move(k)] = r.get_string();
  }
  const std::size_t body = 4 + r.position();
  const auto stored = r.get<std::uint32_t>();
  if (r.remaining() != 0) throw IoError(IoError::Kind::kChecksum, "trailing bytes after checkpoint checksum");
  if (stored != crc32_of(bytes.first(body))) throw IoError(IoError::Kind::kChecksum, "checkpoint checksum mismatch");
  return ckpt;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const IoError& e) {
    throw IoError(e.kind(), path.string() + ": " + e.what());
  }
}

}  // namespace ressfl

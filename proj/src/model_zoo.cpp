#include "ressfl/model_zoo.hpp"

#include <cctype>
#include <charconv>

#include "ressfl/error.hpp"

namespace ressfl {

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Reads digits at `pos`, advancing it. Returns nullopt when there are none.
std::optional<std::size_t> read_number(std::string_view s, std::size_t& pos) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data() + pos, s.data() + s.size(), v);
  if (ec != std::errc() || ptr == s.data() + pos) return std::nullopt;
  pos = static_cast<std::size_t>(ptr - s.data());
  return v;
}

[[noreturn]] void bad_token(std::string_view token, std::string_view arch) {
  throw ConfigError("invalid architecture token '" + std::string(token) + "' in '" +
                    std::string(arch) + "'");
}

Shape batched(const Shape& s) {
  Shape b{1};
  b.insert(b.end(), s.begin(), s.end());
  return b;
}

std::vector<Layer> classifier_layers(std::string_view arch, const Shape& input_shape,
                                     std::size_t num_classes) {
  if (input_shape.size() != 3) {
    throw ShapeError("classifier input shape must be [C,H,W], got " + shape_str(input_shape));
  }
  const auto tokens = parse_arch(arch);
  std::vector<Layer> layers;
  Shape cur = batched(input_shape);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto& tok = tokens[t];
    const bool last = t + 1 == tokens.size();
    std::size_t appended = layers.size();
    switch (tok.kind) {
      case ArchToken::Kind::kConv: {
        if (cur.size() != 4) throw ConfigError("conv after fc in '" + std::string(arch) + "'");
        layers.push_back(Layer::conv2d({cur[1], tok.channels, tok.kernel, tok.stride, tok.kernel / 2}));
        layers.push_back(Layer::relu());
        break;
      }
      case ArchToken::Kind::kPool:
        layers.push_back(Layer::maxpool2x2());
        break;
      case ArchToken::Kind::kFc: {
        if (cur.size() != 2) {
          layers.push_back(Layer::flatten());
          cur = layers.back().output_shape(cur);
          ++appended;
        }
        std::size_t out = tok.channels == 0 ? num_classes : tok.channels;
        if (last && out != num_classes) {
          throw ConfigError("final fc must have num_classes=" + std::to_string(num_classes) +
                            " outputs");
        }
        layers.push_back(Layer::dense(cur[1], out));
        if (!last) layers.push_back(Layer::relu());
        break;
      }
    }
    for (std::size_t i = appended; i < layers.size(); ++i) cur = layers[i].output_shape(cur);
  }
  if (tokens.back().kind != ArchToken::Kind::kFc) {
    throw ConfigError("architecture '" + std::string(arch) + "' must end with fc");
  }
  return layers;
}

}  // namespace

std::vector<ArchToken> parse_arch(std::string_view arch) {
  if (arch.empty()) throw ConfigError("empty architecture string");
  std::vector<ArchToken> tokens;
  for (auto tok : split(arch, '-')) {
    if (tok == "pool") {
      tokens.push_back({ArchToken::Kind::kPool});
      continue;
    }
    if (tok.starts_with("conv")) {
      std::size_t pos = 4;
      ArchToken t{ArchToken::Kind::kConv};
      auto c = read_number(tok, pos);
      if (!c || *c == 0) bad_token(tok, arch);
      t.channels = *c;
      while (pos < tok.size()) {
        const char key = tok[pos++];
        auto v = read_number(tok, pos);
        if (!v || *v == 0) bad_token(tok, arch);
        if (key == 'k') {
          t.kernel = *v;
        } else if (key == 's') {
          t.stride = *v;
        } else {
          bad_token(tok, arch);
        }
      }
      tokens.push_back(t);
      continue;
    }
    if (tok.starts_with("fc")) {
      std::size_t pos = 2;
      ArchToken t{ArchToken::Kind::kFc};
      if (pos < tok.size()) {
        auto n = read_number(tok, pos);
        if (!n || *n == 0 || pos != tok.size()) bad_token(tok, arch);
        t.channels = *n;
      }
      tokens.push_back(t);
      continue;
    }
    bad_token(tok, arch);
  }
  return tokens;
}

BottleneckConfig BottleneckConfig::parse(std::string_view text) {
  auto fail = [&] {
    throw ConfigError("invalid bottleneck '" + std::string(text) + "', expected C<x>-S<y>");
  };
  const auto parts = split(text, '-');
  if (parts.size() != 2 || parts[0].size() < 2 || parts[1].size() < 2) fail();
  auto up = [](char c) { return static_cast<char>(std::toupper(static_cast<unsigned char>(c))); };
  if (up(parts[0][0]) != 'C' || up(parts[1][0]) != 'S') fail();
  std::size_t p0 = 1, p1 = 1;
  auto c = read_number(parts[0], p0);
  auto s = read_number(parts[1], p1);
  if (!c || !s || p0 != parts[0].size() || p1 != parts[1].size() || *c == 0) fail();
  if (*s != 1 && *s != 2) throw ConfigError("bottleneck stride must be 1 or 2");
  return {*c, *s};
}

std::string BottleneckConfig::str() const {
  return "C" + std::to_string(channels) + "-S" + std::to_string(stride);
}

Shape SplitModel::activation_shape() const {
  Shape s = client.output_shape(batched(input_shape));
  return Shape(s.begin() + 1, s.end());
}

Network SplitModel::composed() const {
  Network n = client;
  n.append(server);
  return n;
}

Network build_classifier(std::string_view arch, const Shape& input_shape, std::size_t num_classes,
                         std::uint64_t seed) {
  Network net(classifier_layers(arch, input_shape, num_classes));
  Rng rng = Rng::derive(seed, "classifier");
  net.init_kaiming(rng);
  return net;
}

SplitModel build_split_classifier(std::string_view arch, std::size_t cut_layer,
                                  const Shape& input_shape, std::size_t num_classes,
                                  std::uint64_t seed) {
  Network full = build_classifier(arch, input_shape, num_classes, seed);
  const std::size_t total = full.weighted_count();
  if (cut_layer < 1 || cut_layer >= total) {
    throw ConfigError("cut_layer " + std::to_string(cut_layer) + " out of range [1, " +
                      std::to_string(total - 1) + "] for '" + std::string(arch) + "'");
  }
  // Split right before the (cut+1)-th weighted layer, keeping a Flatten
  // that feeds it on the server side.
  std::size_t seen = 0, split_at = 0;
  for (std::size_t i = 0; i < full.size(); ++i) {
    if (full.layer(i).weighted() && seen++ == cut_layer) {
      split_at = i;
      break;
    }
  }
  if (split_at > 0 && full.layer(split_at - 1).kind() == LayerKind::kFlatten) --split_at;

  SplitModel m;
  m.arch = std::string(arch);
  m.cut_layer = cut_layer;
  m.input_shape = input_shape;
  m.num_classes = num_classes;
  m.seed = seed;
  auto& layers = full.layers();
  m.client = Network(std::vector<Layer>(layers.begin(), layers.begin() + split_at));
  m.server = Network(std::vector<Layer>(layers.begin() + split_at, layers.end()));
  return m;
}

SplitModel insert_bottleneck(SplitModel model, const BottleneckConfig& cfg) {
  if (model.bottleneck) throw ConfigError("model already has a bottleneck " + model.bottleneck->str());
  if (cfg.stride != 1 && cfg.stride != 2) throw ConfigError("bottleneck stride must be 1 or 2");
  const Shape act = model.activation_shape();
  if (act.size() != 3) {
    throw ShapeError("bottleneck needs a spatial activation [C,H,W], got " + shape_str(act));
  }
  const std::size_t channels = act[0];
  if (cfg.channels < 1 || cfg.channels > channels) {
    throw ConfigError("bottleneck channels " + std::to_string(cfg.channels) +
                      " must be in [1, " + std::to_string(channels) + "]");
  }
  Layer l_in = Layer::conv2d({channels, cfg.channels, 3, cfg.stride, 1});
  Layer l_out = Layer::conv2d({cfg.channels, channels, 3, 1, 1});
  const Shape mid = l_in.output_shape(batched(act));
  if (mid[2] < 1 || mid[3] < 1) throw ShapeError("bottleneck output spatial dims < 1");

  Rng rng = Rng::derive(model.seed, "bottleneck");
  l_in.init_kaiming(rng);
  l_out.init_kaiming(rng);
  model.client.add(std::move(l_in));
  model.client.add(Layer::relu());
  model.client.add(std::move(l_out));
  model.client.add(Layer::relu());
  model.bottleneck = cfg;

  // Re-validate the server for the (possibly smaller) activation.
  Rng fix = Rng::derive(model.seed, "server-refit");
  Shape s = batched(model.activation_shape());
  for (auto& layer : model.server.layers()) {
    if (layer.kind() == LayerKind::kDense && s.size() == 2 && s[1] != layer.hyper().in_channels) {
      layer = Layer::dense(s[1], layer.hyper().out_channels);
      layer.init_kaiming(fix);
    }
    s = layer.output_shape(s);
  }
  return model;
}

InversionTier parse_tier(std::string_view text) {
  if (text == "L0" || text == "l0") return InversionTier::kL0;
  if (text == "L1" || text == "l1") return InversionTier::kL1;
  if (text == "L2" || text == "l2") return InversionTier::kL2;
  if (text == "L3" || text == "l3") return InversionTier::kL3;
  throw ConfigError("unknown inversion tier '" + std::string(text) + "'");
}

std::string to_string(InversionTier tier) { return "L" + std::to_string(static_cast<int>(tier)); }

std::size_t tier_width(InversionTier tier, std::size_t base_width) {
  static constexpr std::size_t kMult[] = {1, 1, 2, 4};
  return base_width * kMult[static_cast<int>(tier)];
}

std::size_t tier_residual_blocks(InversionTier tier) {
  static constexpr std::size_t kBlocks[] = {0, 2, 4, 6};
  return kBlocks[static_cast<int>(tier)];
}

Network build_inversion_model(InversionTier tier, const Shape& activation_shape,
                              const Shape& image_shape, std::size_t base_width,
                              std::uint64_t seed) {
  if (activation_shape.size() != 3 || image_shape.size() != 3) {
    throw ShapeError("inversion model needs [C,h,w] activation and [C,H,W] image shapes, got " +
                     shape_str(activation_shape) + " and " + shape_str(image_shape));
  }
  if (base_width < 1) throw ConfigError("inversion base width must be >= 1");
  const std::size_t h = activation_shape[1], w = activation_shape[2];
  const std::size_t H = image_shape[1], W = image_shape[2];
  const bool divisible = h >= 1 && w >= 1 && H % h == 0 && W % w == 0;
  const std::size_t factor = divisible ? H / h : 0;
  const bool pow2 = factor >= 1 && (factor & (factor - 1)) == 0;
  if (!divisible || factor != W / w || !pow2) {
    throw ShapeError("cannot upsample activation " + shape_str(activation_shape) + " to image " +
                     shape_str(image_shape) + " with stride-2 stages");
  }
  std::size_t stages = 0;
  while ((std::size_t{1} << stages) < factor) ++stages;

  const std::size_t width = tier_width(tier, base_width);
  Network net;
  net.add(Layer::conv2d({activation_shape[0], width, 3, 1, 1}));
  net.add(Layer::relu());
  if (tier == InversionTier::kL0) {
    net.add(Layer::conv2d({width, width, 3, 1, 1}));
    net.add(Layer::relu());
  } else {
    for (std::size_t b = 0; b < tier_residual_blocks(tier); ++b) net.add(Layer::residual(width));
  }
  if (stages == 0) {
    net.add(Layer::conv_transpose2d({width, image_shape[0], 3, 1, 1}));
  } else {
    for (std::size_t s = 0; s + 1 < stages; ++s) {
      net.add(Layer::conv_transpose2d({width, width, 4, 2, 1}));
      net.add(Layer::relu());
    }
    net.add(Layer::conv_transpose2d({width, image_shape[0], 4, 2, 1}));
  }
  net.add(Layer::sigmoid());

  Rng rng = Rng::derive(seed, "inversion-" + to_string(tier));
  net.init_kaiming(rng);
  return net;
}

}  // namespace ressfl

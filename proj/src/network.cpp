#include "ressfl/network.hpp"

#include <unordered_map>

#include "ressfl/error.hpp"

namespace ressfl {

void Network::append(const Network& other) {
  layers_.insert(layers_.end(), other.layers_.begin(), other.layers_.end());
}

std::size_t Network::weighted_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weighted() ? 1 : 0;
  return n;
}

Tensor Network::forward(const Tensor& input) {
  Tensor x = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(x);
    ensure_finite(x, "output of layer " + std::to_string(i) + " " + layers_[i].describe());
  }
  return x;
}

Tensor Network::infer(const Tensor& input) const {
  Tensor x = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].infer(x);
    ensure_finite(x, "output of layer " + std::to_string(i) + " " + layers_[i].describe());
  }
  return x;
}

Tensor Network::backward(const Tensor& grad_output) {
  if (layers_.empty()) return grad_output;
  Tensor g = grad_output;
  for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i].backward(g);
  return g;
}

Shape Network::output_shape(const Shape& input) const {
  Shape s = input;
  for (const auto& l : layers_) s = l.output_shape(s);
  return s;
}

std::vector<ParamRef> Network::parameters() {
  std::vector<ParamRef> out;
  for (auto& l : layers_)
    for (auto& p : l.params()) out.push_back(ParamRef{&p, l.frozen()});
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_)
    for (const auto& p : l.params()) n += p.size();
  return n;
}

std::vector<NamedTensor> Network::named_parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto names = layers_[i].param_names();
    const auto& params = layers_[i].params();
    for (std::size_t j = 0; j < params.size(); ++j) {
      Tensor t(params[j].shape(), params[j].values());
      out.push_back({prefix + std::to_string(i) + "." + names[j], std::move(t)});
    }
  }
  return out;
}

void Network::load_parameters(const std::vector<NamedTensor>& source, const std::string& prefix) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& nt : source) by_name[nt.name] = &nt.tensor;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto names = layers_[i].param_names();
    auto& params = layers_[i].params();
    for (std::size_t j = 0; j < params.size(); ++j) {
      const std::string name = prefix + std::to_string(i) + "." + names[j];
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ConfigError("missing parameter tensor '" + name + "'");
      if (it->second->shape() != params[j].shape()) {
        throw ShapeError("parameter tensor '" + name + "' has shape " +
                         shape_str(it->second->shape()) + " but the model expects " +
                         shape_str(params[j].shape()));
      }
      params[j].values() = it->second->values();
    }
  }
}

std::vector<Tensor> Network::snapshot() const {
  std::vector<Tensor> out;
  for (const auto& l : layers_)
    for (const auto& p : l.params()) out.emplace_back(p.shape(), p.values());
  return out;
}

void Network::restore(const std::vector<Tensor>& values) {
  std::size_t k = 0;
  for (auto& l : layers_)
    for (auto& p : l.params()) {
      if (k >= values.size() || values[k].shape() != p.shape()) {
        throw ShapeError("restore: parameter " + std::to_string(k) + " shape mismatch");
      }
      p.values() = values[k++].values();
    }
  if (k != values.size()) throw ShapeError("restore: parameter count mismatch");
}

void Network::zero_grad() {
  for (auto& l : layers_)
    for (auto& p : l.params()) p.zero_grad();
}

void Network::clear_cache() {
  for (auto& l : layers_) l.clear_cache();
}

void Network::set_frozen(bool frozen) {
  for (auto& l : layers_) l.set_frozen(frozen);
}

void Network::init_kaiming(Rng& rng) {
  for (auto& l : layers_) l.init_kaiming(rng);
}

std::uint64_t count_flops(const Network& network, const Shape& input_shape) {
  std::uint64_t total = 0;
  Shape s = input_shape;
  for (const auto& l : network.layers()) {
    total += l.flops(s);
    s = l.output_shape(s);
  }
  return total;
}

}  // namespace ressfl

#include "ressfl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "ressfl/error.hpp"

namespace ressfl {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_dims(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_dims(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_dims(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
}

std::span<double> Tensor::grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), 0.0);
  return grad_;
}

void Tensor::zero_grad() { grad_.assign(data_.size(), 0.0); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

std::size_t Tensor::row_size() const {
  if (shape_.empty()) throw ShapeError("scalar tensor has no batch dimension");
  return data_.size() / shape_[0];
}

Tensor Tensor::slice_batch(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin >= end || end > shape_[0]) {
    throw ShapeError("bad batch slice [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") of " + shape_str(shape_));
  }
  const std::size_t row = row_size();
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<double>(data_.begin() + begin * row,
                                                  data_.begin() + end * row));
}

Tensor Tensor::gather_batch(std::span<const std::size_t> rows) const {
  if (shape_.empty() || rows.empty()) throw ShapeError("empty gather");
  const std::size_t row = row_size();
  Shape s = shape_;
  s[0] = rows.size();
  std::vector<double> out;
  out.reserve(rows.size() * row);
  for (auto r : rows) {
    if (r >= shape_[0]) {
      throw ShapeError("gather row " + std::to_string(r) + " out of range for " +
                       shape_str(shape_));
    }
    out.insert(out.end(), data_.begin() + r * row, data_.begin() + (r + 1) * row);
  }
  return Tensor(std::move(s), std::move(out));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void ensure_finite(const Tensor& t, std::string_view where) {
  if (!t.all_finite()) {
    throw NumericError("non-finite value in " + std::string(where) + " " +
                       shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

Tensor concat_batch(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape s = parts.front().shape();
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.rank() != s.size() ||
        !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat: incompatible shapes " + shape_str(s) + " and " +
                       shape_str(p.shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  s[0] = rows;
  return Tensor(std::move(s), std::move(out));
}

}  // namespace ressfl

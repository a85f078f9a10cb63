#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ressfl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer of the
/// same shape. Batch dimension, when present, is first.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool has_grad() const noexcept { return !grad_.empty(); }
  /// Allocates a zeroed gradient buffer if none exists.
  std::span<double> grad();
  std::span<const double> grad() const noexcept { return grad_; }
  void zero_grad();
  void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }

  /// Same data viewed under a new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  /// Rows [begin, end) of the leading (batch) dimension.
  Tensor slice_batch(std::size_t begin, std::size_t end) const;
  /// Gather rows of the leading dimension.
  Tensor gather_batch(std::span<const std::size_t> rows) const;
  /// Elements per row of the leading dimension.
  std::size_t row_size() const;

  /// True when every element is finite.
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
};

/// Throws NumericError naming `where` if the tensor contains NaN/Inf.
void ensure_finite(const Tensor& t, std::string_view where);

/// Throws ShapeError unless the shapes agree.
void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what);

/// Concatenates tensors along the leading dimension.
Tensor concat_batch(std::span<const Tensor> parts);

}  // namespace ressfl

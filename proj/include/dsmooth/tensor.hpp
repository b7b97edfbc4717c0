#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dsmooth/errors.hpp"

namespace dsmooth {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. Every extent is at least 1.
class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_extents();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_extents();
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

  [[nodiscard]] std::span<double> data() noexcept { return data_; }
  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Elements of the i-th slice along the leading axis.
  [[nodiscard]] std::span<const double> row(std::size_t i) const {
    const std::size_t stride = data_.size() / shape_.front();
    return std::span<const double>(data_).subspan(i * stride, stride);
  }
  [[nodiscard]] std::span<double> row(std::size_t i) {
    const std::size_t stride = data_.size() / shape_.front();
    return std::span<double>(data_).subspan(i * stride, stride);
  }

  [[nodiscard]] Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  void fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void validate_extents() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have at least one axis");
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Prepends a batch axis of size `batch` to a per-example shape.
inline Shape batched(std::size_t batch, const Shape& example) {
  Shape s{batch};
  s.insert(s.end(), example.begin(), example.end());
  return s;
}

/// Per-example shape of a batched tensor.
inline Shape example_shape(const Tensor& t) { return Shape(t.shape().begin() + 1, t.shape().end()); }

}  // namespace dsmooth

#include "higfa/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "higfa/error.hpp"

namespace higfa::nd {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : values_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (element_count(shape_) != values_.size()) {
    throw ShapeError("tensor shape " + to_string(shape_) + " needs " +
                     std::to_string(element_count(shape_)) + " values, got " +
                     std::to_string(values_.size()));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values_) v = dist(rng);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (values_.size() != 1) {
    throw ShapeError("item() on tensor of shape " + to_string(shape_));
  }
  return values_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (element_count(shape) != values_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), values_);
}

Tensor Tensor::row(std::size_t r) const {
  if (rank() != 2 || r >= shape_[0]) {
    throw ShapeError("row " + std::to_string(r) + " of shape " + to_string(shape_));
  }
  const std::size_t cols = shape_[1];
  return Tensor(Shape{cols}, std::vector<double>(values_.begin() + static_cast<std::ptrdiff_t>(r * cols),
                                                 values_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols)));
}

void Tensor::set_row(std::size_t r, std::span<const double> values) {
  if (rank() != 2 || r >= shape_[0] || values.size() != shape_[1]) {
    throw ShapeError("set_row " + std::to_string(r) + " of shape " + to_string(shape_));
  }
  std::copy(values.begin(), values.end(), values_.begin() + static_cast<std::ptrdiff_t>(r * shape_[1]));
}

Tensor Tensor::grad() const {
  if (!grad_) throw Error("tensor has no gradient");
  return Tensor(shape_, *grad_);
}

void Tensor::set_grad(std::vector<double> grad) {
  if (grad.size() != values_.size()) {
    throw ShapeError("gradient size " + std::to_string(grad.size()) + " does not match shape " +
                     to_string(shape_));
  }
  grad_ = std::move(grad);
}

bool Tensor::all_finite() const noexcept {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace higfa::nd

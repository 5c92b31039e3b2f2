#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "higfa/random.hpp"

namespace higfa::nd {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles.
///
/// A tensor is a plain value: copying it copies the data. The optional
/// gradient buffer is filled in by Tape::backward for leaves that were
/// created with requires_grad set.
class Tensor {
 public:
  /// Rank-0 tensor holding 0.
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor identity(std::size_t n);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const double* data() const noexcept { return values_.data(); }
  double* data() noexcept { return values_.data(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  /// Element access for rank-2 tensors.
  double operator()(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }

  /// Value of a single-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  /// Row r of a rank-2 tensor as a rank-1 tensor.
  Tensor row(std::size_t r) const;
  void set_row(std::size_t r, std::span<const double> values);

  bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool on = true) noexcept {
    requires_grad_ = on;
    return *this;
  }

  bool has_grad() const noexcept { return grad_.has_value(); }
  /// Gradient as a tensor of the same shape. Throws when absent.
  Tensor grad() const;
  void set_grad(std::vector<double> grad);
  void clear_grad() noexcept { grad_.reset(); }

  bool all_finite() const noexcept;

 private:
  Shape shape_;
  std::vector<double> values_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

/// True when shapes match and every element has the same bit pattern.
bool bitwise_equal(const Tensor& a, const Tensor& b);

/// Largest absolute elementwise difference. Shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace higfa::nd

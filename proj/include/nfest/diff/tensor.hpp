// Dense row-major tensors and learnable parameters.
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nfest::diff {

using Shape = std::vector<std::size_t>;

/// Thrown when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when an operand lies outside an operation's domain (log of a
/// non-positive entry, fully masked softmax row, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::string to_string(const Shape& shape);
std::size_t num_elements(const Shape& shape);

/// A dense n-dimensional array of doubles in row-major order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Rank-2 element access.
  double at(std::size_t row, std::size_t col) const {
    return data_[row * shape_.back() + col];
  }
  double& at(std::size_t row, std::size_t col) {
    return data_[row * shape_.back() + col];
  }

  /// Only the last axis is kept; leading axes are folded into rows.
  std::size_t rows() const noexcept {
    return shape_.empty() ? 0 : data_.size() / shape_.back();
  }
  std::size_t cols() const noexcept {
    return shape_.empty() ? 0 : shape_.back();
  }

  double item() const;
  Tensor reshaped(Shape shape) const;
  void fill(double value);

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// A named learnable tensor with a persistent gradient buffer. Gradients
/// accumulate across backward passes until zero_grad() is called.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor value_)
      : name(std::move(name_)), value(std::move(value_)),
        grad(value.shape()) {}

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad.fill(0.0); }
};

}  // namespace nfest::diff

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace acia {

using Scalar = double;
using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor. A rank-0 tensor (empty shape) holds one scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = 0);
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor scalar(Scalar v) { return Tensor(Shape{}, v); }
  static Tensor from(std::initializer_list<Scalar> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  Scalar& at(int i, int j) { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  Scalar at(int i, int j) const { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  Scalar& at(int c, int h, int w) {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }
  Scalar at(int c, int h, int w) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }

  Scalar item() const;
  Tensor reshaped(Shape shape) const;
  void fill(Scalar v);
  // this += alpha * other (shapes must match)
  void add_(const Tensor& other, Scalar alpha = 1);
  void scale_(Scalar alpha);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  Scalar sum() const;
  Scalar max_abs() const;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

}  // namespace acia

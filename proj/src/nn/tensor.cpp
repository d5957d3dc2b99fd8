#include "acia/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace acia {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::from(std::initializer_list<Scalar> values) {
  return Tensor(Shape{static_cast<int>(values.size())}, std::vector<Scalar>(values));
}

Scalar Tensor::item() const {
  if (data_.size() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(Scalar v) {
  for (auto& x : data_) x = v;
}

void Tensor::add_(const Tensor& other, Scalar alpha) {
  if (other.data_.size() != data_.size()) {
    throw std::invalid_argument("add_: shape " + shape_str(shape_) + " vs " + shape_str(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * other.data_[i];
}

void Tensor::scale_(Scalar alpha) {
  for (auto& x : data_) x *= alpha;
}

bool Tensor::all_finite() const {
  for (Scalar x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

Scalar Tensor::sum() const {
  Scalar s = 0;
  for (Scalar x : data_) s += x;
  return s;
}

Scalar Tensor::max_abs() const {
  Scalar m = 0;
  for (Scalar x : data_) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace acia

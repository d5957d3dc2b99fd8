#include "acia/model_state.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace acia {

const nn::Var& ModelState::add(const std::string& name, Tensor init) {
  auto [it, inserted] = params_.emplace(name, nn::Var(std::move(init), true));
  if (!inserted) throw std::invalid_argument("duplicate parameter name: " + name);
  return it->second;
}

const nn::Var& ModelState::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

nn::Var& ModelState::get_mut(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::vector<std::string> ModelState::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ModelState::numel(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) {
    if (name.compare(0, prefix.size(), prefix) == 0) n += v.value().numel();
  }
  return n;
}

ModelState ModelState::clone() const {
  ModelState out;
  for (const auto& [name, v] : params_) out.params_.emplace(name, nn::Var(v.value(), v.requires_grad()));
  out.step = step;
  return out;
}

void ModelState::zero_grad() {
  for (auto& [_, v] : params_) v.zero_grad();
}

void ModelState::set_requires_grad(const std::string& prefix, bool on) {
  for (auto& [name, v] : params_) {
    if (name.compare(0, prefix.size(), prefix) == 0) v.node()->requires_grad = on;
  }
}

bool ModelState::same_layout(const ModelState& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
  }
  return true;
}

bool ModelState::bitwise_equal(const ModelState& other) const {
  if (!same_layout(other)) return false;
  auto b = other.params_.begin();
  for (auto a = params_.begin(); a != params_.end(); ++a, ++b) {
    const auto& x = a->second.value();
    const auto& y = b->second.value();
    if (std::memcmp(x.ptr(), y.ptr(), x.numel() * sizeof(Scalar)) != 0) return false;
  }
  return true;
}

Tensor he_uniform(Shape shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / fan_in);
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor fan_in_uniform(Shape shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

}  // namespace acia

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "acia/autograd.hpp"
#include "acia/rng.hpp"

namespace acia {

// Named learnable parameters of the detector and alignment heads plus a step
// counter. Student and teacher are two instances with identical name sets.
class ModelState {
 public:
  using Map = std::map<std::string, nn::Var>;

  // Registers a parameter; throws if the name is taken.
  const nn::Var& add(const std::string& name, Tensor init);
  const nn::Var& get(const std::string& name) const;
  nn::Var& get_mut(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const Map& params() const { return params_; }
  std::vector<std::string> names() const;
  // Sum of element counts over parameters whose name starts with prefix.
  std::size_t numel(const std::string& prefix = "") const;

  // Deep copy with fresh graph nodes (no shared storage or history).
  ModelState clone() const;
  void zero_grad();
  // Parameters matching prefix stop (or resume) receiving gradients.
  void set_requires_grad(const std::string& prefix, bool on);

  bool same_layout(const ModelState& other) const;
  bool bitwise_equal(const ModelState& other) const;

  std::int64_t step = 0;

 private:
  Map params_;
};

// Uniform(-b, b) with b = sqrt(6 / fan_in) (He init for ReLU-family layers).
Tensor he_uniform(Shape shape, int fan_in, Rng& rng);
// Uniform(-b, b) with b = 1 / sqrt(fan_in).
Tensor fan_in_uniform(Shape shape, int fan_in, Rng& rng);
Tensor normal_init(Shape shape, double stddev, Rng& rng);

}  // namespace acia

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "acia/autograd.hpp"
#include "acia/rng.hpp"

namespace acia::testing {

using LossFn = std::function<nn::Var(const std::vector<nn::Var>&)>;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// ||analytic - s*numeric|| / max(||analytic||, ||s*numeric||) over all inputs,
// numeric from central differences. s = -lambda checks a path through a GRL.
inline double gradcheck(const LossFn& f, const std::vector<Tensor>& inputs, double eps = 1e-6, double s = 1.0) {
  std::vector<nn::Var> vars;
  for (const auto& t : inputs) vars.emplace_back(t, true);
  f(vars).backward();
  double diff = 0, na = 0, nn_ = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = vars[k].grad();
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      auto eval = [&](double delta) {
        std::vector<nn::Var> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor t = inputs[j];
          if (j == k) t[i] += delta;
          probe.emplace_back(std::move(t), false);
        }
        return f(probe).item();
      };
      const double numeric = s * (eval(eps) - eval(-eps)) / (2 * eps);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn_ += numeric * numeric;
    }
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn_), 1e-12});
  return std::sqrt(diff) / denom;
}

}  // namespace acia::testing

#pragma once

// Helpers shared by the test executables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "alpkd/ops.hpp"
#include "alpkd/tensor.hpp"

namespace alpkd::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0,
                            bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

// Collapses any tensor to a scalar through fixed random weights, so every
// output element reaches the loss with a distinct nonzero coefficient.
inline Tensor weighted_sum(const Tensor& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  const auto w = random_tensor(x.shape(), rng, 1.0, false);
  return ops::sum(ops::mul(x, w));
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "input i, element e: analytic a vs numeric n"
};

// Central differences with step eps on every element of every input,
// compared to the tape's gradients. Relative error is
// |a - n| / max(|a|, |n|, floor); the floor keeps structurally zero
// entries (both sides exactly 0 or at rounding level) from dividing by 0.
inline GradCheck check_gradients(std::vector<Tensor> inputs, const std::function<Tensor()>& f,
                                 double eps = 1e-5, double floor = 1e-7) {
  for (auto& t : inputs) t.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  GradCheck out;
  NoGradGuard guard;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto data = inputs[i].data();
    for (std::size_t e = 0; e < data.size(); ++e) {
      const double saved = data[e];
      data[e] = saved + eps;
      const double up = f().item();
      data[e] = saved - eps;
      const double down = f().item();
      data[e] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i][e];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.checked;
      if (rel > out.max_rel_error || std::isnan(rel)) {
        out.max_rel_error = std::isnan(rel) ? INFINITY : rel;
        out.worst = "input " + std::to_string(i) + ", element " + std::to_string(e) +
                    ": analytic " + std::to_string(a) + " vs numeric " + std::to_string(numeric);
      }
    }
  }
  return out;
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace alpkd::testing

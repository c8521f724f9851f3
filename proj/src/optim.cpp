#include "alpkd/optim.hpp"

#include <cmath>

#include "alpkd/errors.hpp"

namespace alpkd {

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, AdamOptions adam)
    : kind_(kind), lr_(learning_rate), adam_(adam) {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be finite and >= 0");
  }
}

void Optimizer::step(std::vector<Tensor>& params) {
  ++t_;
  if (kind_ == OptimizerKind::Sgd) {
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      auto w = p.data();
      auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
    }
    return;
  }

  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].numel(), 0.0);
      v_[i].assign(params[i].numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) {
    throw ConfigError("optimizer parameter list changed size between steps");
  }
  const double t = static_cast<double>(t_);
  const double c1 = 1.0 - std::pow(adam_.beta1, t);
  const double c2 = 1.0 - std::pow(adam_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) continue;
    auto w = p.data();
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = adam_.beta1 * m[k] + (1.0 - adam_.beta1) * g[k];
      v[k] = adam_.beta2 * v[k] + (1.0 - adam_.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      w[k] -= lr_ * mhat / (std::sqrt(vhat) + adam_.eps);
    }
  }
}

void Optimizer::zero_grad(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace alpkd

#pragma once

#include <cstddef>
#include <vector>

#include "alpkd/tensor.hpp"

namespace alpkd {

enum class OptimizerKind { Adam, Sgd };

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Applies one update to every parameter that carries a gradient. Parameters
// without a gradient buffer are left untouched. Moment buffers are keyed by
// position in the parameter list, so the list must be stable across steps.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, AdamOptions adam = {});

  void step(std::vector<Tensor>& params);
  static void zero_grad(std::vector<Tensor>& params);

  OptimizerKind kind() const { return kind_; }
  double learning_rate() const { return lr_; }
  std::size_t steps_taken() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_;
  AdamOptions adam_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace alpkd

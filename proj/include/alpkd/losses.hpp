#pragma once

// Distillation objectives. Batch reduction is the mean, layer reduction the
// sum. Teacher-side tensors are always detached before use.

#include <span>
#include <vector>

#include "alpkd/alignment.hpp"
#include "alpkd/fusion.hpp"
#include "alpkd/tensor.hpp"

namespace alpkd {

struct LossWeights {
  double beta = 1.0;
  double eta = 0.0;
  double lambda = 0.0;
  double temperature = 1.0;

  // beta = 1 - eta - lambda; a rounding residue within 1e-12 of zero is
  // clamped to zero. Throws ConfigError when beta < 0 or T < 1.
  static LossWeights from(double eta, double lambda, double temperature);
  void validate() const;
};

struct LossBreakdown {
  double l_ce = 0.0;
  double l_kd = 0.0;
  double l_hidden = 0.0;
  double total = 0.0;
  std::vector<double> per_layer_hidden;  // one entry per participating student layer
};

// Mean over rows of -log softmax(logits)[label].
Tensor ce_loss(const Tensor& logits, std::span<const int> labels);

// Mean over rows of -sum_w p_T(w) log p_S(w), both softened by T. The
// optional T^2 factor rescales gradients to the T=1 magnitude.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature,
               bool t_squared_scaling = false);

struct HiddenLoss {
  Tensor loss;
  std::vector<double> per_layer;
  std::vector<FusionResult> fusions;  // ALP/CKD only, one per participating layer
};

// Sum over participating layers of the batch-mean squared distance between
// L2-normalized student and teacher CLS states. Plan must be PKD_SKIP.
HiddenLoss pkd_loss(std::span<const Tensor> student_cls, const AlignmentPlan& plan,
                    std::span<const Tensor> teacher_cls);

// Sum over participating layers of MSE(h_S^j, C^j), where C^j fuses A(j)
// with `method`. Plan must be bucketed or full-span.
HiddenLoss alp_loss(std::span<const Tensor> student_cls, const AlignmentPlan& plan,
                    std::span<const Tensor> teacher_cls, const FusionMethod& method);

struct TotalLoss {
  Tensor total;
  LossBreakdown breakdown;
};

// beta * ce + eta * kd + lambda * hidden. Undefined components, or components
// whose weight is zero, are left out of the graph and reported as 0.
TotalLoss total_loss(const Tensor& ce, const Tensor& kd, const Tensor& hidden,
                     const LossWeights& weights);

}  // namespace alpkd

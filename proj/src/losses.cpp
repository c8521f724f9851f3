#include "alpkd/losses.hpp"

#include <cmath>

#include "alpkd/errors.hpp"
#include "alpkd/ops.hpp"

namespace alpkd {

namespace {

Tensor constant(const Tensor& t) { return t.requires_grad() ? t.detach() : t; }

void check_layers(std::span<const Tensor> student_cls, const AlignmentPlan& plan,
                  std::span<const Tensor> teacher_cls) {
  if (student_cls.size() != plan.student_layers) {
    throw ConfigError("plan expects " + std::to_string(plan.student_layers) +
                      " student layers, got " + std::to_string(student_cls.size()));
  }
  if (teacher_cls.size() != plan.teacher_layers) {
    throw ConfigError("plan expects " + std::to_string(plan.teacher_layers) +
                      " teacher layers, got " + std::to_string(teacher_cls.size()));
  }
  if (plan.participating().empty()) {
    throw ConfigError("alignment plan has no participating student layer");
  }
}

}  // namespace

LossWeights LossWeights::from(double eta, double lambda, double temperature) {
  LossWeights w;
  w.eta = eta;
  w.lambda = lambda;
  w.temperature = temperature;
  w.beta = 1.0 - eta - lambda;
  if (w.beta < 0.0 && w.beta > -1e-12) w.beta = 0.0;
  w.validate();
  return w;
}

void LossWeights::validate() const {
  if (!(eta >= 0.0) || !(lambda >= 0.0)) throw ConfigError("eta and lambda must be >= 0");
  if (!(beta >= 0.0)) {
    throw ConfigError("beta = 1 - eta - lambda is negative (eta=" + std::to_string(eta) +
                      ", lambda=" + std::to_string(lambda) + ")");
  }
  if (!(temperature >= 1.0)) throw ConfigError("temperature must be >= 1");
}

Tensor ce_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw InputError("ce_loss: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const auto classes = logits.dim(1);
  std::vector<double> onehot(logits.numel(), 0.0);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw InputError("ce_loss: label " + std::to_string(labels[r]) + " outside 0.." +
                       std::to_string(classes - 1));
    }
    onehot[r * classes + static_cast<std::size_t>(labels[r])] = 1.0;
  }
  return ops::cross_entropy_with_soft_targets(logits,
                                              Tensor::from(logits.shape(), std::move(onehot)));
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature,
               bool t_squared_scaling) {
  if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 2) {
    throw InputError("kd_loss: shape mismatch " + shape_str(student_logits.shape()) + " vs " +
                     shape_str(teacher_logits.shape()));
  }
  if (!(temperature >= 1.0)) throw ConfigError("kd_loss: temperature must be >= 1");
  Tensor targets;
  {
    NoGradGuard guard;
    targets = ops::softmax(ops::scale(constant(teacher_logits), 1.0 / temperature), 1);
  }
  Tensor loss = ops::cross_entropy_with_soft_targets(
      ops::scale(student_logits, 1.0 / temperature), targets);
  return t_squared_scaling ? ops::scale(loss, temperature * temperature) : loss;
}

HiddenLoss pkd_loss(std::span<const Tensor> student_cls, const AlignmentPlan& plan,
                    std::span<const Tensor> teacher_cls) {
  if (plan.strategy != AlignStrategy::PkdSkip) {
    throw ConfigError(std::string("pkd_loss needs a PKD_SKIP plan, got ") +
                      to_string(plan.strategy));
  }
  check_layers(student_cls, plan, teacher_cls);
  HiddenLoss out;
  for (auto j : plan.participating()) {
    const auto& s = student_cls[j - 1];
    const auto& t = teacher_cls[plan.at(j).front() - 1];
    if (s.shape() != t.shape()) {
      throw DimensionError("pkd_loss: student " + shape_str(s.shape()) + " vs teacher " +
                           shape_str(t.shape()));
    }
    const double d = static_cast<double>(s.dim(1));
    Tensor term = ops::scale(
        ops::mse(ops::l2_normalize_rows(s), ops::l2_normalize_rows(constant(t))), d);
    out.per_layer.push_back(term.item());
    out.loss = out.loss.defined() ? ops::add(out.loss, term) : term;
  }
  return out;
}

HiddenLoss alp_loss(std::span<const Tensor> student_cls, const AlignmentPlan& plan,
                    std::span<const Tensor> teacher_cls, const FusionMethod& method) {
  if (plan.strategy == AlignStrategy::PkdSkip) {
    throw ConfigError("alp_loss needs a bucketed or full-span plan, got PKD_SKIP");
  }
  check_layers(student_cls, plan, teacher_cls);
  HiddenLoss out;
  for (auto j : plan.participating()) {
    std::vector<Tensor> states;
    for (auto k : plan.at(j)) states.push_back(constant(teacher_cls[k - 1]));
    FusionResult fr = method.fuse(j, student_cls[j - 1], states);
    Tensor term = ops::mse(student_cls[j - 1], fr.fused);
    out.per_layer.push_back(term.item());
    out.loss = out.loss.defined() ? ops::add(out.loss, term) : term;
    out.fusions.push_back(std::move(fr));
  }
  return out;
}

TotalLoss total_loss(const Tensor& ce, const Tensor& kd, const Tensor& hidden,
                     const LossWeights& weights) {
  weights.validate();
  TotalLoss out;
  auto accumulate = [&](const Tensor& part, double w, double& slot) {
    if (!part.defined() || w == 0.0) return;
    slot = part.item();
    Tensor term = ops::scale(part, w);
    out.total = out.total.defined() ? ops::add(out.total, term) : term;
  };
  accumulate(ce, weights.beta, out.breakdown.l_ce);
  accumulate(kd, weights.eta, out.breakdown.l_kd);
  accumulate(hidden, weights.lambda, out.breakdown.l_hidden);
  if (!out.total.defined()) out.total = Tensor::scalar(0.0);
  out.breakdown.total = out.total.item();
  return out;
}

}  // namespace alpkd

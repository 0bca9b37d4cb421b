#include "mbias/optim.hpp"

#include <cmath>

#include "mbias/errors.hpp"

namespace mbias {

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, double weight_decay, std::size_t size)
    : kind_(kind), lr_(learning_rate), weight_decay_(weight_decay), scratch_(size, 0.0) {
  if (learning_rate < 0.0) throw ContractViolation("learning rate must be non-negative");
  if (weight_decay < 0.0) throw ContractViolation("weight decay must be non-negative");
  if (kind_ == OptimizerKind::kAdam) {
    m_.assign(size, 0.0);
    v_.assign(size, 0.0);
  }
}

void Optimizer::step(std::span<double> theta, std::span<const double> grad) {
  if (theta.size() != scratch_.size() || grad.size() != scratch_.size())
    throw ContractViolation("Optimizer::step: size mismatch");
  ++steps_;
  for (std::size_t i = 0; i < theta.size(); ++i) scratch_[i] = grad[i] + weight_decay_ * theta[i];
  if (kind_ == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr_ * scratch_[i];
    return;
  }
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(beta1_, t);
  const double c2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = scratch_[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    theta[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

nlohmann::json Optimizer::describe() const {
  nlohmann::json j = {{"type", kind_ == OptimizerKind::kSgd ? "sgd" : "adam"},
                      {"learning_rate", lr_},
                      {"weight_decay", weight_decay_},
                      {"steps", steps_}};
  if (kind_ == OptimizerKind::kAdam) {
    j["beta1"] = beta1_;
    j["beta2"] = beta2_;
    j["eps"] = eps_;
  }
  return j;
}

}  // namespace mbias

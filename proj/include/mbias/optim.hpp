#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <json.hpp>

namespace mbias {

enum class OptimizerKind { kSgd, kAdam };

/// Plain SGD or Adam (beta1 0.9, beta2 0.999, eps 1e-8). Weight decay is an
/// L2 term added to the gradient before the update.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, double weight_decay, std::size_t size);

  void step(std::span<double> theta, std::span<const double> grad);

  OptimizerKind kind() const { return kind_; }
  std::size_t steps() const { return steps_; }
  nlohmann::json describe() const;

 private:
  OptimizerKind kind_;
  double lr_;
  double weight_decay_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::size_t steps_ = 0;
  std::vector<double> m_;
  std::vector<double> v_;
  std::vector<double> scratch_;
};

}  // namespace mbias

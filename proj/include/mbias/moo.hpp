#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mbias/data.hpp"
#include "mbias/model.hpp"

namespace mbias {

/// Small dense symmetric matrix (the N x N Gram matrix of group gradients).
struct Gram {
  std::size_t n = 0;
  std::vector<double> data;

  Gram() = default;
  explicit Gram(std::size_t n_) : n(n_), data(n_ * n_, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * n + j]; }

  /// w^T M w
  double quadratic(std::span<const double> w) const;
  /// M w
  std::vector<double> apply(std::span<const double> w) const;
};

/// Rows are flattened per-group gradients, all the same length.
using GradRows = std::vector<std::vector<double>>;

Gram gram_matrix(const GradRows& grads);

std::vector<double> softmax(std::span<const double> logits);

/// sum_n w_n * g_n
std::vector<double> combine_gradients(const GradRows& grads, std::span<const double> weights);

/// ||sum_n w_n g_n||^2 computed through the Gram matrix.
double pareto_residual(std::span<const double> weights, const Gram& gram);

// ---------------------------------------------------------------------------
// Per-group losses
// ---------------------------------------------------------------------------

struct GroupLosses {
  std::vector<double> losses;  // L_n, one per sub-batch
  GradRows grads;              // dL_n/dtheta, one row per sub-batch (empty if not requested)
};

/// Mean cross-entropy of every sub-batch, each recorded on its own tape.
GroupLosses compute_group_losses(const Parameters& params, const Split& split,
                                 const std::vector<std::vector<std::size_t>>& batches, bool with_gradients = true);

/// Gradient of sum_n w_n L_n recorded on a single tape (the one-backward route).
std::vector<double> weighted_loss_gradient(const Parameters& params, const Split& split,
                                           const std::vector<std::vector<std::size_t>>& batches,
                                           std::span<const double> weights);

/// theta <- theta - eta1 * sum_n weights_n g_n. Throws NumericError naming the
/// group when a gradient row is not finite.
void theta_step(Parameters& params, const GradRows& grads, std::span<const double> weights, double eta1);

// ---------------------------------------------------------------------------
// Group-scaling parameter
// ---------------------------------------------------------------------------

struct ScalingState {
  std::vector<double> alpha;  // logits; weights are softmax(alpha)
  double lambda = 0.0;

  /// alpha = (1/N) 1, lambda = 0.
  static ScalingState uniform(std::size_t n);
  std::vector<double> weights() const { return softmax(alpha); }
};

/// L_alpha = sigma(alpha)^T L + c * lambda * sigma(alpha)^T M sigma(alpha),
/// with L and M constants.
double alpha_objective(std::span<const double> alpha, std::span<const double> losses, const Gram& gram, double lambda,
                       double c);

/// Gradient of alpha_objective through the softmax Jacobian
/// J = diag(s) - s s^T:  J L + 2 c lambda J M s.
std::vector<double> alpha_objective_gradient(std::span<const double> alpha, std::span<const double> losses,
                                             const Gram& gram, double lambda, double c);

/// alpha <- alpha - eta2 * grad, lambda <- lambda + eta2 * residual, both read
/// at the pre-update alpha. Returns the residual used for the lambda step.
double alpha_lambda_step(ScalingState& state, std::span<const double> losses, const Gram& gram, double eta2, double c);

// ---------------------------------------------------------------------------
// MGDA
// ---------------------------------------------------------------------------

struct MgdaOptions {
  std::size_t max_iterations = 2000;
  double tolerance = 1e-14;  // stop when the Frank-Wolfe duality gap falls below this
};

/// Weighting on the simplex minimizing w^T M w. N = 2 uses the closed form;
/// larger N runs Frank-Wolfe with away steps, every line search being the
/// two-point closed form.
std::vector<double> mgda_solve(const Gram& gram, const MgdaOptions& options = {});

/// min over a in [0,1] of ||a u + (1-a) v||^2 given u.u, u.v, v.v; returns a.
double min_norm_two_point(double uu, double uv, double vv);

// ---------------------------------------------------------------------------
// Weight controller shared by the main method and its ablation arms
// ---------------------------------------------------------------------------

enum class ScalingRule {
  kParetoLagrangian,  // full method: loss term + lambda-weighted residual
  kLossOnly,          // alpha descent on the loss term only (c = 0)
  kFixed,             // sigma(alpha) stays uniform
  kMgda,              // sigma replaced by the MGDA solution at each joint step
};

struct JointStep {
  std::size_t iter = 0;
  std::vector<double> sigma;        // weights before the update
  std::vector<double> sigma_delta;  // change applied at this step
  double lambda = 0.0;              // multiplier after the update
  std::vector<double> losses;
  double residual = 0.0;  // at the pre-update weights
  double penalty = 0.0;   // c * lambda_before * residual
};

class ScalingController {
 public:
  ScalingController(ScalingRule rule, std::size_t num_groups, double eta2, double c);

  const std::vector<double>& weights() const { return sigma_; }
  const ScalingState& state() const { return state_; }
  ScalingRule rule() const { return rule_; }

  /// One joint-step update from this iteration's losses and gradient Gram.
  JointStep update(std::size_t iter, std::span<const double> losses, const Gram& gram);

 private:
  ScalingRule rule_;
  ScalingState state_;
  std::vector<double> sigma_;
  double eta2_;
  double c_;
};

}  // namespace mbias

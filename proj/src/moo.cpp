#include "mbias/moo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mbias/errors.hpp"

namespace mbias {

double Gram::quadratic(std::span<const double> w) const {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) row += data[i * n + j] * w[j];
    s += w[i] * row;
  }
  return s;
}

std::vector<double> Gram::apply(std::span<const double> w) const {
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += data[i * n + j] * w[j];
  return out;
}

Gram gram_matrix(const GradRows& grads) {
  Gram m(grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i)
    for (std::size_t j = i; j < grads.size(); ++j) {
      if (grads[i].size() != grads[j].size()) throw ContractViolation("gram_matrix: gradient rows differ in length");
      const double v = std::inner_product(grads[i].begin(), grads[i].end(), grads[j].begin(), 0.0);
      m(i, j) = v;
      m(j, i) = v;
    }
  return m;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) return {};
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

std::vector<double> combine_gradients(const GradRows& grads, std::span<const double> weights) {
  if (grads.size() != weights.size() || grads.empty())
    throw ContractViolation("combine_gradients: need one weight per gradient row");
  std::vector<double> out(grads[0].size(), 0.0);
  for (std::size_t n = 0; n < grads.size(); ++n) {
    if (grads[n].size() != out.size()) throw ContractViolation("combine_gradients: ragged gradient rows");
    const double w = weights[n];
    for (std::size_t p = 0; p < out.size(); ++p) out[p] += w * grads[n][p];
  }
  return out;
}

double pareto_residual(std::span<const double> weights, const Gram& gram) {
  if (weights.size() != gram.n) throw ContractViolation("pareto_residual: weight/Gram size mismatch");
  return std::max(0.0, gram.quadratic(weights));
}

// ---------------------------------------------------------------------------

GroupLosses compute_group_losses(const Parameters& params, const Split& split,
                                 const std::vector<std::vector<std::size_t>>& batches, bool with_gradients) {
  GroupLosses out;
  out.losses.reserve(batches.size());
  for (std::size_t n = 0; n < batches.size(); ++n) {
    const auto& idx = batches[n];
    if (idx.empty()) throw ContractViolation("compute_group_losses: sub-batch " + std::to_string(n) + " is empty");
    ad::Tape tape(params.flat());
    const auto targets = split.gather_targets(idx);
    auto loss = tape.nll_loss(tape.log_softmax(forward(params, split.gather(idx), tape)), targets);
    out.losses.push_back(loss.value().item());
    if (with_gradients) out.grads.push_back(tape.backward(loss));
  }
  return out;
}

std::vector<double> weighted_loss_gradient(const Parameters& params, const Split& split,
                                           const std::vector<std::vector<std::size_t>>& batches,
                                           std::span<const double> weights) {
  if (batches.size() != weights.size()) throw ContractViolation("weighted_loss_gradient: one weight per batch");
  ad::Tape tape(params.flat());
  std::vector<ad::Var> losses;
  for (const auto& idx : batches) {
    if (idx.empty()) throw ContractViolation("weighted_loss_gradient: empty sub-batch");
    const auto targets = split.gather_targets(idx);
    losses.push_back(tape.nll_loss(tape.log_softmax(forward(params, split.gather(idx), tape)), targets));
  }
  return tape.backward(tape.weighted_sum(losses, weights));
}

void theta_step(Parameters& params, const GradRows& grads, std::span<const double> weights, double eta1) {
  for (std::size_t n = 0; n < grads.size(); ++n)
    for (double g : grads[n])
      if (!std::isfinite(g)) throw NumericError("non-finite gradient for group " + std::to_string(n), n);
  const auto step = combine_gradients(grads, weights);
  auto theta = params.flat();
  if (step.size() != theta.size()) throw ContractViolation("theta_step: gradient length does not match parameters");
  for (std::size_t p = 0; p < theta.size(); ++p) theta[p] -= eta1 * step[p];
}

// ---------------------------------------------------------------------------

ScalingState ScalingState::uniform(std::size_t n) {
  ScalingState s;
  s.alpha.assign(n, n ? 1.0 / static_cast<double>(n) : 0.0);
  s.lambda = 0.0;
  return s;
}

double alpha_objective(std::span<const double> alpha, std::span<const double> losses, const Gram& gram, double lambda,
                       double c) {
  const auto s = softmax(alpha);
  double lin = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) lin += s[i] * losses[i];
  return lin + c * lambda * gram.quadratic(s);
}

std::vector<double> alpha_objective_gradient(std::span<const double> alpha, std::span<const double> losses,
                                             const Gram& gram, double lambda, double c) {
  const std::size_t n = alpha.size();
  if (losses.size() != n || gram.n != n) throw ContractViolation("alpha_objective_gradient: size mismatch");
  const auto s = softmax(alpha);
  // d/ds of the objective, then pull back through J = diag(s) - s s^T.
  auto ds = gram.apply(s);
  for (std::size_t i = 0; i < n; ++i) ds[i] = losses[i] + 2.0 * c * lambda * ds[i];
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += s[i] * ds[i];
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = s[i] * (ds[i] - mean);
  return g;
}

double alpha_lambda_step(ScalingState& state, std::span<const double> losses, const Gram& gram, double eta2, double c) {
  const auto s = state.weights();
  const double residual = pareto_residual(s, gram);
  if (state.alpha.size() > 1) {
    const auto g = alpha_objective_gradient(state.alpha, losses, gram, state.lambda, c);
    for (std::size_t i = 0; i < g.size(); ++i) state.alpha[i] -= eta2 * g[i];
  }
  state.lambda += eta2 * residual;
  return residual;
}

// ---------------------------------------------------------------------------

double min_norm_two_point(double uu, double uv, double vv) {
  const double denom = uu - 2.0 * uv + vv;
  if (!(denom > 1e-300)) return 0.5;
  return std::clamp((vv - uv) / denom, 0.0, 1.0);
}

std::vector<double> mgda_solve(const Gram& gram, const MgdaOptions& options) {
  const std::size_t n = gram.n;
  if (n == 0) throw ContractViolation("mgda_solve: no objectives");
  if (n == 1) return {1.0};
  if (n == 2) {
    const double a = min_norm_two_point(gram(0, 0), gram(0, 1), gram(1, 1));
    return {a, 1.0 - a};
  }

  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, gram(i, i));
  const double tol = options.tolerance * std::max(1.0, scale);

  std::vector<double> w(n, 1.0 / static_cast<double>(n));
  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    const auto mw = gram.apply(w);
    const double f = std::inner_product(w.begin(), w.end(), mw.begin(), 0.0);

    const auto t = static_cast<std::size_t>(std::min_element(mw.begin(), mw.end()) - mw.begin());
    std::size_t s = n;
    for (std::size_t i = 0; i < n; ++i)
      if (w[i] > 0.0 && (s == n || mw[i] > mw[s])) s = i;

    const double fw_gap = f - mw[t];
    const double away_gap = mw[s] - f;
    if (fw_gap <= tol && away_gap <= tol) break;

    if (fw_gap >= away_gap) {
      // Toward vertex t: the two-point problem between the current
      // combination and g_t.
      const double a = min_norm_two_point(gram(t, t), mw[t], f);
      for (double& v : w) v *= 1.0 - a;
      w[t] += a;
    } else {
      // Away from vertex s along w - e_s, capped so w_s stays >= 0.
      const double ws = w[s];
      if (ws >= 1.0) break;
      const double gmax = ws / (1.0 - ws);
      // d = w - e_s; d^T M w = f - mw[s]; d^T M d = f - 2 mw[s] + M_ss.
      const double dmw = f - mw[s];
      const double dmd = f - 2.0 * mw[s] + gram(s, s);
      double g = dmd > 1e-300 ? -dmw / dmd : gmax;
      g = std::clamp(g, 0.0, gmax);
      for (double& v : w) v *= 1.0 + g;
      w[s] -= g;
      if (g == gmax) w[s] = 0.0;
    }
    double sum = 0.0;
    for (double& v : w) {
      v = std::max(v, 0.0);
      sum += v;
    }
    for (double& v : w) v /= sum;
  }
  return w;
}

// ---------------------------------------------------------------------------

ScalingController::ScalingController(ScalingRule rule, std::size_t num_groups, double eta2, double c)
    : rule_(rule), state_(ScalingState::uniform(num_groups)), eta2_(eta2), c_(c) {
  if (num_groups == 0) throw ContractViolation("ScalingController: need at least one group");
  sigma_ = state_.weights();
}

JointStep ScalingController::update(std::size_t iter, std::span<const double> losses, const Gram& gram) {
  if (losses.size() != sigma_.size() || gram.n != sigma_.size())
    throw ContractViolation("ScalingController::update: group count changed");
  JointStep step;
  step.iter = iter;
  step.sigma = sigma_;
  step.losses.assign(losses.begin(), losses.end());
  step.residual = pareto_residual(sigma_, gram);

  switch (rule_) {
    case ScalingRule::kParetoLagrangian:
      step.penalty = c_ * state_.lambda * step.residual;
      alpha_lambda_step(state_, losses, gram, eta2_, c_);
      sigma_ = state_.weights();
      break;
    case ScalingRule::kLossOnly:
      alpha_lambda_step(state_, losses, gram, eta2_, 0.0);
      sigma_ = state_.weights();
      break;
    case ScalingRule::kFixed:
      break;
    case ScalingRule::kMgda:
      sigma_ = mgda_solve(gram);
      break;
  }
  step.lambda = rule_ == ScalingRule::kMgda || rule_ == ScalingRule::kFixed ? 0.0 : state_.lambda;
  step.sigma_delta.resize(sigma_.size());
  for (std::size_t i = 0; i < sigma_.size(); ++i) step.sigma_delta[i] = sigma_[i] - step.sigma[i];
  return step;
}

}  // namespace mbias

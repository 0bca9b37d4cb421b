#include "mbias/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mbias/errors.hpp"
#include "mbias/metrics.hpp"

namespace mbias {

LossAndGrad batch_loss(const Parameters& params, const Split& split, std::span<const std::size_t> batch,
                       std::span<const double> weights) {
  if (batch.empty()) throw ContractViolation("batch_loss: empty batch");
  ad::Tape tape(params.flat());
  const auto targets = split.gather_targets(batch);
  auto loss = tape.nll_loss(tape.log_softmax(forward(params, split.gather(batch), tape)), targets, weights);
  LossAndGrad out;
  out.loss = loss.value().item();
  out.grad = tape.backward(loss);
  return out;
}

double erm_step(Parameters& params, const Split& split, std::span<const std::size_t> batch, double eta1) {
  auto lg = batch_loss(params, split, batch);
  auto theta = params.flat();
  for (std::size_t p = 0; p < theta.size(); ++p) theta[p] -= eta1 * lg.grad[p];
  return lg.loss;
}

std::vector<double> upweight_weights(const GroupIndex& train_index, std::span<const std::size_t> batch) {
  const double m = static_cast<double>(train_index.total());
  std::vector<double> w;
  w.reserve(batch.size());
  for (auto i : batch) {
    const auto g = train_index.group_of.at(i);
    w.push_back(m / static_cast<double>(train_index.groups[g].size()));
  }
  return w;
}

LossAndGrad upweight_loss(const Parameters& params, const Split& split, const GroupIndex& train_index,
                          std::span<const std::size_t> batch) {
  const auto w = upweight_weights(train_index, batch);
  return batch_loss(params, split, batch, w);
}

GroupDroState GroupDroState::uniform(std::size_t n, double eta_q) {
  if (n == 0) throw ContractViolation("GroupDroState: need at least one group");
  return GroupDroState{std::vector<double>(n, 1.0 / static_cast<double>(n)), eta_q};
}

void GroupDroState::update(std::span<const double> losses) {
  if (losses.size() != q.size()) throw ContractViolation("GroupDroState::update: size mismatch");
  // Shift by the max exponent; the common factor cancels in the normalization.
  double mx = -INFINITY;
  for (std::size_t n = 0; n < q.size(); ++n) mx = std::max(mx, eta_q * losses[n]);
  double s = 0.0;
  for (std::size_t n = 0; n < q.size(); ++n) {
    q[n] *= std::exp(eta_q * losses[n] - mx);
    s += q[n];
  }
  for (double& v : q) v /= s;
}

void group_dro_step(Parameters& params, const GroupLosses& losses, GroupDroState& state, double eta1) {
  state.update(losses.losses);
  theta_step(params, losses.grads, state.q, eta1);
}

DroPartitions dro_partitions(const Split& train, const MajorityTable& table, std::size_t num_classes,
                             DroGrouping grouping) {
  const GroupIndex gi = assign_groups(train, table, num_classes);
  DroPartitions out;
  if (grouping == DroGrouping::kGroupLabel) {
    for (auto id : gi.nonempty_groups()) {
      out.parts.push_back(gi.groups[id]);
      out.labels.push_back(group_label(id, gi.num_biases));
      out.group_of_part.push_back(out.labels.back());
    }
    return out;
  }
  std::map<std::vector<int>, std::vector<std::size_t>> cells;  // key: (t, b over the table's bias dims)
  std::vector<int> key(1 + table.num_biases());
  for (std::size_t i = 0; i < train.size(); ++i) {
    key[0] = train.t[i];
    for (std::size_t k = 0; k < table.num_biases(); ++k) key[1 + k] = train.bias(i, table.bias_dims[k]);
    cells[key].push_back(i);
  }
  for (auto& [k, members] : cells) {
    const std::string g = group_label(gi.group_of[members.front()], gi.num_biases);
    std::string label = g + "@t" + std::to_string(k[0]) + ":b";
    for (std::size_t d = 1; d < k.size(); ++d) label += (d > 1 ? "." : "") + std::to_string(k[d]);
    out.parts.push_back(std::move(members));
    out.labels.push_back(std::move(label));
    out.group_of_part.push_back(g);
  }
  return out;
}

RunRecord ablation_arm(Method kind, const Dataset& ds, TrainConfig config) {
  if (kind != Method::kFixedAlpha && kind != Method::kLossOnlyAlpha && kind != Method::kMgdaOnly)
    throw ContractViolation("ablation_arm: " + method_name(kind) + " is not an ablation arm");
  config.method = kind;
  return train(ds, config).record;
}

}  // namespace mbias

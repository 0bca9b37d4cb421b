#pragma once

#include <span>
#include <string>
#include <vector>

#include "mbias/data.hpp"
#include "mbias/model.hpp"
#include "mbias/moo.hpp"
#include "mbias/trainer.hpp"

namespace mbias {

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Cross-entropy over one mixed batch; with weights, sum(w l) / sum(w).
LossAndGrad batch_loss(const Parameters& params, const Split& split, std::span<const std::size_t> batch,
                       std::span<const double> weights = {});

/// One unweighted SGD step on a mixed batch. Returns the batch loss.
double erm_step(Parameters& params, const Split& split, std::span<const std::size_t> batch, double eta1);

/// Per-sample weights M / |group(sample)| for a batch of training indices.
std::vector<double> upweight_weights(const GroupIndex& train_index, std::span<const std::size_t> batch);

/// Cross-entropy with group-size upweighting (weighted mean).
LossAndGrad upweight_loss(const Parameters& params, const Split& split, const GroupIndex& train_index,
                          std::span<const std::size_t> batch);

/// Exponentiated-gradient group weights.
struct GroupDroState {
  std::vector<double> q;
  double eta_q = 0.01;

  static GroupDroState uniform(std::size_t n, double eta_q);
  /// q_n <- q_n exp(eta_q L_n), renormalized.
  void update(std::span<const double> losses);
};

/// Updates q from the group losses, then steps theta on q^T L.
void group_dro_step(Parameters& params, const GroupLosses& losses, GroupDroState& state, double eta1);

/// Training partitions for GroupDRO: non-empty (target, bias attributes) cells,
/// or the g-label groups, depending on `grouping`.
struct DroPartitions {
  std::vector<std::vector<std::size_t>> parts;
  std::vector<std::string> labels;
  std::vector<std::string> group_of_part;  // g-label of each part ("CC", ...)
};

DroPartitions dro_partitions(const Split& train, const MajorityTable& table, std::size_t num_classes,
                             DroGrouping grouping);

/// Runs one of the weight-adjustment ablation arms (fixed, loss-only, MGDA).
RunRecord ablation_arm(Method kind, const Dataset& ds, TrainConfig config);

}  // namespace mbias

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbias/data.hpp"
#include "mbias/model.hpp"

namespace mbias {

/// "G" for a guiding position, "C" for a conflicting one: (1,0) -> "GC".
std::string label_groups_for_report(std::span<const int> g);
std::string group_label(std::size_t group_id, std::size_t num_biases);

struct GroupAccuracy {
  std::size_t group_id = 0;
  std::string label;
  std::vector<std::optional<double>> per_class;  // nullopt = no samples of that class in the group
  double accuracy = 0.0;                         // mean over classes present
  std::size_t count = 0;
};

struct GroupAccuracyTable {
  std::vector<GroupAccuracy> groups;  // non-empty groups, all-guiding first
  double unbiased = 0.0;
  double indist = 0.0;
  double worst = 0.0;
  std::vector<std::string> warnings;

  const GroupAccuracy* find(const std::string& label) const;
};

/// Builds the table from predictions already made. `train_proportions` is
/// indexed by group id; weights are renormalized over groups present here.
GroupAccuracyTable tabulate(std::span<const int> predictions, std::span<const int> targets, const GroupIndex& eval_index,
                            std::span<const double> train_proportions);

GroupAccuracyTable evaluate(const Parameters& params, const Split& split, const GroupIndex& eval_index,
                            std::span<const double> train_proportions);

nlohmann::json to_json(const GroupAccuracyTable& table);

/// Aligned text: InDist, group columns, Unbiased, Worst (percent).
std::string format_table(const GroupAccuracyTable& table);

enum class SelectionMetric { kWorst, kUnbiased };
double selection_value(const GroupAccuracyTable& table, SelectionMetric metric);

}  // namespace mbias

#include "mbias/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <sstream>

#include "mbias/errors.hpp"

namespace mbias {

std::string label_groups_for_report(std::span<const int> g) {
  std::string s;
  s.reserve(g.size());
  for (int bit : g) s.push_back(bit ? 'G' : 'C');
  return s;
}

std::string group_label(std::size_t group_id, std::size_t num_biases) {
  const auto bits = group_bits(group_id, num_biases);
  return label_groups_for_report(bits);
}

const GroupAccuracy* GroupAccuracyTable::find(const std::string& label) const {
  for (const auto& g : groups)
    if (g.label == label) return &g;
  return nullptr;
}

GroupAccuracyTable tabulate(std::span<const int> predictions, std::span<const int> targets, const GroupIndex& eval_index,
                            std::span<const double> train_proportions) {
  if (predictions.size() != targets.size() || targets.size() != eval_index.total())
    throw ContractViolation("tabulate: predictions, targets and group index disagree in size");
  if (train_proportions.size() != eval_index.num_groups())
    throw ContractViolation("tabulate: need one training proportion per group");

  GroupAccuracyTable table;
  double wsum = 0.0, weighted = 0.0, mean = 0.0;
  table.worst = std::numeric_limits<double>::infinity();
  for (std::size_t id = eval_index.num_groups(); id-- > 0;) {
    if (eval_index.groups[id].empty()) {
      table.warnings.push_back("group " + group_label(id, eval_index.num_biases) + " has no evaluation samples");
      continue;
    }
    GroupAccuracy ga;
    ga.group_id = id;
    ga.label = group_label(id, eval_index.num_biases);
    ga.count = eval_index.groups[id].size();
    double acc_sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < eval_index.num_classes; ++c) {
      const auto& cell = eval_index.by_class[id][c];
      if (cell.empty()) {
        ga.per_class.push_back(std::nullopt);
        table.warnings.push_back("cell (" + ga.label + ", class " + std::to_string(c) + ") is empty; skipped");
        continue;
      }
      std::size_t correct = 0;
      for (auto i : cell) correct += predictions[i] == targets[i] ? 1 : 0;
      const double a = static_cast<double>(correct) / static_cast<double>(cell.size());
      ga.per_class.push_back(a);
      acc_sum += a;
      ++present;
    }
    ga.accuracy = acc_sum / static_cast<double>(present);
    mean += ga.accuracy;
    weighted += train_proportions[id] * ga.accuracy;
    wsum += train_proportions[id];
    table.worst = std::min(table.worst, ga.accuracy);
    table.groups.push_back(std::move(ga));
  }
  if (table.groups.empty()) throw ContractViolation("evaluate: every group is empty");
  table.unbiased = mean / static_cast<double>(table.groups.size());
  if (wsum > 0.0) {
    table.indist = weighted / wsum;
  } else {
    table.indist = table.unbiased;
    table.warnings.push_back("no training mass on evaluated groups; InDist falls back to Unbiased");
  }
  return table;
}

GroupAccuracyTable evaluate(const Parameters& params, const Split& split, const GroupIndex& eval_index,
                            std::span<const double> train_proportions) {
  const auto preds = argmax_rows(predict_logits(params, split.all_features()));
  return tabulate(preds, split.t, eval_index, train_proportions);
}

nlohmann::json to_json(const GroupAccuracyTable& table) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : table.groups) {
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& a : g.per_class) per_class.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
    groups.push_back({{"group", g.label}, {"accuracy", g.accuracy}, {"count", g.count}, {"per_class", per_class}});
  }
  return {{"indist", table.indist},
          {"unbiased", table.unbiased},
          {"worst", table.worst},
          {"groups", groups},
          {"warnings", table.warnings}};
}

std::string format_table(const GroupAccuracyTable& table) {
  std::ostringstream head, row;
  char buf[32];
  auto cell = [&](const std::string& name, double v) {
    const int w = std::max<int>(8, static_cast<int>(name.size()) + 2);
    std::snprintf(buf, sizeof(buf), "%*s", w, name.c_str());
    head << buf;
    std::snprintf(buf, sizeof(buf), "%*.1f", w, 100.0 * v);
    row << buf;
  };
  cell("InDist", table.indist);
  for (const auto& g : table.groups) cell(g.label, g.accuracy);
  cell("Unbiased", table.unbiased);
  cell("Worst", table.worst);
  return head.str() + "\n" + row.str() + "\n";
}

double selection_value(const GroupAccuracyTable& table, SelectionMetric metric) {
  return metric == SelectionMetric::kWorst ? table.worst : table.unbiased;
}

}  // namespace mbias

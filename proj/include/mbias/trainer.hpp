#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbias/data.hpp"
#include "mbias/metrics.hpp"
#include "mbias/model.hpp"
#include "mbias/moo.hpp"
#include "mbias/optim.hpp"

namespace mbias {

enum class Method {
  kOurs,
  kErm,
  kUpweight,
  kUpsample,
  kGroupDro,
  kFixedAlpha,
  kLossOnlyAlpha,
  kMgdaOnly,
};

std::string method_name(Method m);
Method parse_method(const std::string& name);

enum class DroGrouping { kBiasTarget, kGroupLabel };
enum class SelectionSplit { kValidation, kTest };

struct TrainConfig {
  Method method = Method::kOurs;
  double eta1 = 2e-4;
  double eta2 = 1e-2;
  std::size_t U = 10;
  double c = 1.0;
  std::size_t batch_size = 512;
  std::size_t epochs = 10;
  /// Overrides epochs when non-zero.
  std::size_t max_iterations = 0;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double weight_decay = 0.0;
  SelectionMetric selection_metric = SelectionMetric::kWorst;
  SelectionSplit selection_split = SelectionSplit::kValidation;
  /// Evaluate every this many iterations; 0 means once per epoch.
  std::size_t eval_every = 0;
  /// Stop after this many evaluations without improvement; 0 disables.
  std::size_t patience = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> hidden_dims = {64, 64};
  double eta_q = 0.01;
  DroGrouping dro_grouping = DroGrouping::kBiasTarget;
  /// Bias types used to form training groups; empty = all.
  std::vector<std::size_t> train_biases;
  /// Bias types used for reported metrics; empty = same as training.
  std::vector<std::size_t> eval_biases;
  TieBreak tie_break = TieBreak::kError;
  double divergence_threshold = 50.0;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep their current value, so `j.get_to(cfg)` applies overrides.
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EvalPoint {
  std::size_t iter = 0;
  double selection = 0.0;
  double unbiased = 0.0;
  double worst = 0.0;
};

struct RunRecord {
  std::string method;
  /// Column labels for sigma entries: group strings ("GC") for g-grouped
  /// methods, "<g>@t<class>:b<attrs>" cells for bias-target GroupDRO.
  std::vector<std::string> group_labels;
  std::vector<JointStep> steps;
  std::vector<EvalPoint> evals;
  std::size_t iterations = 0;
  std::size_t best_iter = 0;
  double best_selection = 0.0;
  std::string selection_metric;
  std::string selection_split;
  bool test_set_selection = false;
  std::string validation_mode;
  nlohmann::json optimizer;
  std::optional<GroupAccuracyTable> final_val;
  std::optional<GroupAccuracyTable> final_test;
};

/// Newline-delimited JSON: one object per joint step, then {"final": {...}}.
std::string to_ndjson(const RunRecord& record);

/// Parsed form of a stored run record.
struct StoredRun {
  std::vector<std::string> group_labels;
  std::vector<JointStep> steps;
  nlohmann::json final;
};
StoredRun parse_ndjson(const std::string& text);

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, RunRecord partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const RunRecord& partial() const { return partial_; }

 private:
  RunRecord partial_;
};

struct TrainResult {
  Parameters params;
  RunRecord record;
};

/// Trains with group-balanced batches (or unbalanced ones for ERM and
/// upweighting). For the scaling-parameter methods, U-1 theta-only steps with
/// frozen weights alternate with one joint step that updates theta, then
/// alpha, then lambda from the same gradients. The returned parameters are the
/// best checkpoint under the selection metric.
TrainResult train(const Dataset& ds, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Generic objectives (convex toys and tests)
// ---------------------------------------------------------------------------

struct ObjectiveValue {
  std::vector<double> losses;
  GradRows grads;
};

using GroupObjective = std::function<ObjectiveValue(std::span<const double> theta)>;

struct ObjectiveRun {
  std::vector<double> theta;
  std::vector<JointStep> steps;
};

/// The same alternation as train() applied to an explicit list of objectives
/// over a flat parameter vector, with plain gradient steps on theta.
ObjectiveRun optimize_objectives(const GroupObjective& objective, std::vector<double> theta, ScalingRule rule,
                                 double eta1, double eta2, std::size_t U, double c, std::size_t iterations);

}  // namespace mbias

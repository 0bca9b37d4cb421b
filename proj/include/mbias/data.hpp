#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbias/autodiff.hpp"

namespace mbias {

// ---------------------------------------------------------------------------
// Generator spec
// ---------------------------------------------------------------------------

struct BiasType {
  std::string name;
  std::size_t alphabet = 2;
  /// Probability that a training sample carries its class's guiding attribute.
  double p_guiding = 0.9;
  /// guiding[t] = attribute index that spuriously correlates with class t.
  std::vector<int> guiding;
};

enum class FeatureKind { kLinear, kPatch };

/// Linear mode: x = [class signal + noise | attribute embedding_1 + noise | ...].
/// Patch mode: a flattened KxK image with `channels` per pixel. The interior
/// carries a per-class binary template, left/right/top/bottom borders carry
/// the color of bias 1/2/3/4.
struct FeatureModel {
  FeatureKind kind = FeatureKind::kLinear;
  std::size_t signal_dim = 8;
  double signal_scale = 1.0;
  double signal_noise = 1.0;
  std::size_t bias_dim = 4;
  double bias_scale = 1.0;
  double bias_noise = 0.1;
  std::size_t patch_size = 6;
  std::size_t channels = 3;
};

/// Exact number of training samples for class `target` whose per-bias
/// guiding/conflicting status spells `pattern` (e.g. "GC").
struct CellCount {
  int target = 0;
  std::string pattern;
  std::size_t count = 0;
};

enum class ValidationMode { kBalanced, kInDistribution };

struct BiasGenSpec {
  std::string name = "custom";
  std::size_t num_classes = 2;
  std::vector<BiasType> biases;
  FeatureModel features;
  /// Training samples per class. Ignored when train_cells is non-empty.
  std::vector<std::size_t> train_counts;
  std::vector<CellCount> train_cells;
  /// Val/test samples per (class, guiding/conflicting pattern) cell.
  std::size_t eval_per_cell = 50;
  ValidationMode val_mode = ValidationMode::kBalanced;
  /// When false, a guiding attribute losing the empirical majority is tolerated
  /// (null-correlation presets).
  bool require_guiding_majority = true;
  std::uint64_t seed = 0;

  std::size_t num_biases() const { return biases.size(); }
  std::size_t feature_dim() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const BiasGenSpec& s);
void from_json(const nlohmann::json& j, BiasGenSpec& s);

/// Named presets: "mcmnist-like", "multiceleba-like", "multiceleba3-like",
/// "multiceleba-exact", "unbiased".
BiasGenSpec preset(const std::string& name, std::uint64_t seed);
std::vector<std::string> preset_names();

/// Expected fraction of training samples conflicting with every bias type.
double expected_clean_fraction(const BiasGenSpec& spec);

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One split in columnar layout.
struct Split {
  std::size_t feature_dim = 0;
  std::size_t num_biases = 0;
  std::vector<double> x;  // size() * feature_dim
  std::vector<int> t;
  std::vector<int> b;  // size() * num_biases

  std::size_t size() const { return t.size(); }
  std::span<const double> features(std::size_t i) const {
    return std::span<const double>(x).subspan(i * feature_dim, feature_dim);
  }
  int bias(std::size_t i, std::size_t d) const { return b[i * num_biases + d]; }

  void push(std::span<const double> xi, int ti, std::span<const int> bi);
  /// Feature rows for `indices` as a [n x feature_dim] tensor.
  ad::Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_targets(std::span<const std::size_t> indices) const;
  ad::Tensor all_features() const;

  bool operator==(const Split&) const = default;
};

struct Dataset {
  BiasGenSpec spec;
  Split train;
  Split val;
  Split test;

  std::size_t num_classes() const { return spec.num_classes; }
  std::size_t num_biases() const { return spec.num_biases(); }
  std::vector<std::size_t> alphabets() const;
};

Dataset generate(const BiasGenSpec& spec);

/// Text format: a magic line, one JSON header line, then one line per sample:
/// `<split> <t> <b_1..b_D> <x_1..x_F>` with doubles in shortest round-trip form.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Grouping
// ---------------------------------------------------------------------------

enum class TieBreak { kError, kLowestIndex };

/// Per-class majority attribute for a subset of bias types, computed on the
/// training split and reused for every other split.
struct MajorityTable {
  std::vector<std::size_t> bias_dims;
  std::vector<std::vector<int>> majority;  // [k][class]

  std::size_t num_biases() const { return bias_dims.size(); }
};

MajorityTable compute_majority(const Split& train, std::size_t num_classes,
                               const std::vector<std::size_t>& alphabets,
                               const std::vector<std::size_t>& bias_dims, TieBreak tie = TieBreak::kError);

/// Group id of a binary label vector: g_1 is the most significant bit, so the
/// all-guiding group is 2^D - 1 and the all-conflicting group is 0.
std::size_t group_id(std::span<const int> g);
std::vector<int> group_bits(std::size_t id, std::size_t num_biases);

struct GroupIndex {
  std::size_t num_biases = 0;
  std::size_t num_classes = 0;
  std::vector<std::vector<std::size_t>> groups;                 // [group id] -> sample indices
  std::vector<std::vector<std::vector<std::size_t>>> by_class;  // [group id][class] -> indices
  std::vector<std::size_t> group_of;                            // sample -> group id

  std::size_t num_groups() const { return groups.size(); }
  std::vector<std::size_t> nonempty_groups() const;
  std::size_t total() const { return group_of.size(); }
};

GroupIndex assign_groups(const Split& split, const MajorityTable& table, std::size_t num_classes);

/// Convenience: majority from ds.train over `bias_dims` (all when empty),
/// applied to the requested split.
enum class SplitKind { kTrain, kVal, kTest };
const Split& split_of(const Dataset& ds, SplitKind kind);
GroupIndex assign_groups(const Dataset& ds, SplitKind kind, std::vector<std::size_t> bias_dims = {},
                         TieBreak tie = TieBreak::kError);

/// Training-split group proportions over all 2^D groups.
std::vector<double> group_proportions(const GroupIndex& train_index);

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Yields batches holding batch_size / N' samples from each of the N'
/// non-empty partitions. Partitions at least one quota in size are cycled
/// through in shuffled order; smaller ones are sampled with replacement.
class GroupBalancedSampler {
 public:
  GroupBalancedSampler(std::vector<std::vector<std::size_t>> partitions, std::size_t batch_size,
                       std::uint64_t seed, std::uint64_t epoch);
  GroupBalancedSampler(const GroupIndex& index, std::size_t batch_size, std::uint64_t seed,
                       std::uint64_t epoch);

  /// One sub-batch per non-empty partition, in partition order.
  std::vector<std::vector<std::size_t>> next();

  std::size_t quota() const { return quota_; }
  std::size_t num_partitions() const { return parts_.size(); }
  /// Position of each non-empty partition in the constructor's partition list.
  const std::vector<std::size_t>& partition_ids() const { return ids_; }

 private:
  struct Part {
    std::vector<std::size_t> members;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::uint64_t seed = 0;
    std::uint64_t round = 0;
  };

  void reshuffle(Part& p);

  std::vector<Part> parts_;
  std::vector<std::size_t> ids_;
  std::size_t quota_ = 0;
};

/// Plain shuffled minibatches over [0, n) for unbalanced (ERM-style) training.
class ShuffledSampler {
 public:
  ShuffledSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch);
  std::vector<std::size_t> next();

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
  std::uint64_t seed_;
  std::uint64_t round_ = 0;
};

}  // namespace mbias

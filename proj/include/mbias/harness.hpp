#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbias/data.hpp"
#include "mbias/trainer.hpp"

namespace mbias {

/// Either a preset (with optional spec overrides) or a dataset file.
struct DatasetSource {
  std::string preset;
  std::uint64_t seed = 0;
  nlohmann::json overrides = nlohmann::json::object();
  std::filesystem::path path;

  Dataset materialize() const;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSource dataset;
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {0};
  std::filesystem::path output_dir = "runs";
};

ExperimentConfig parse_experiment(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);

struct MetricSummary {
  std::vector<double> values;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

MetricSummary summarize(std::vector<double> values);

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  RunRecord record;
};

struct ExperimentSummary {
  std::filesystem::path run_dir;
  std::vector<SeedResult> runs;
  std::map<std::string, MetricSummary> test;  // indist, unbiased, worst, and each group label
  std::map<std::string, MetricSummary> val;
  bool all_ok = true;

  nlohmann::json to_json() const;
};

struct RunOptions {
  bool write_outputs = true;
  bool force = false;
  /// 0 = take MBIAS_WORKERS from the environment, else 1.
  std::size_t workers = 0;
};

std::size_t worker_count(std::size_t requested);

/// Hex FNV-1a of the canonical config JSON; names the run directory.
std::string config_hash(const ExperimentConfig& config);

/// Trains every seed on the same dataset, evaluates, and aggregates.
/// Seeds that diverge are reported (all_ok = false) but do not stop the others.
ExperimentSummary run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Same as above with a dataset already in memory.
ExperimentSummary run_experiment(const ExperimentConfig& config, const Dataset& ds, const RunOptions& options = {});

struct SweepGrid {
  std::vector<double> eta1;
  std::vector<double> eta2;
  std::vector<std::size_t> U;
  std::vector<double> weight_decay;
  /// When set, eta2 is multiplied by U_ref / U for each cell.
  std::optional<std::size_t> eta2_inverse_u_ref;
  /// Seeds used for the grid cells; empty = the experiment's first seed.
  std::vector<std::uint64_t> cell_seeds;
};

SweepGrid parse_sweep_grid(const nlohmann::json& j);

struct SweepCell {
  TrainConfig config;
  bool ok = false;
  std::string error;
  double selection = 0.0;  // mean validation selection metric over cell seeds
  double test_unbiased = 0.0;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::size_t best = 0;
  ExperimentSummary final;
};

SweepResult sweep(const ExperimentConfig& base, const SweepGrid& grid, const RunOptions& options = {});

/// CSV with one row per joint step: iter, sigma_<group>..., lambda,
/// pareto_residual, loss_<group>.... `source` is a run record file or a
/// directory holding runrecord.ndjson.
std::string export_trajectories(const std::filesystem::path& source);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& text);

}  // namespace mbias

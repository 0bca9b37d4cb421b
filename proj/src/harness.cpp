#include "mbias/harness.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "mbias/errors.hpp"
#include "mbias/rng.hpp"

namespace mbias {

namespace {

std::string fmt_double(double v) {
  if (!std::isfinite(v)) return "";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void add_table(std::map<std::string, std::vector<double>>& acc, const GroupAccuracyTable& t) {
  acc["indist"].push_back(t.indist);
  acc["unbiased"].push_back(t.unbiased);
  acc["worst"].push_back(t.worst);
  for (const auto& g : t.groups) acc[g.label].push_back(g.accuracy);
}

nlohmann::json summary_json(const std::map<std::string, MetricSummary>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, s] : m) j[k] = {{"mean", s.mean}, {"std", s.std}, {"values", s.values}};
  return j;
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

Dataset DatasetSource::materialize() const {
  if (!path.empty()) {
    if (!std::filesystem::exists(path)) throw IoError("dataset file " + path.string() + " does not exist");
    return load_dataset(path);
  }
  if (preset.empty()) throw ContractViolation("dataset source needs either a preset or a path");
  BiasGenSpec spec = mbias::preset(preset, seed);
  if (!overrides.is_null() && !overrides.empty()) from_json(overrides, spec);
  return generate(spec);
}

ExperimentConfig parse_experiment(const nlohmann::json& j) {
  ExperimentConfig c;
  c.name = j.value("name", c.name);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.dataset.preset = d.value("preset", "");
    c.dataset.seed = d.value("seed", std::uint64_t{0});
    if (d.contains("overrides")) c.dataset.overrides = d.at("overrides");
    if (d.contains("path")) c.dataset.path = d.at("path").get<std::string>();
  }
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("method")) c.train.method = parse_method(j.at("method").get<std::string>());
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (c.seeds.empty()) throw ContractViolation("experiment config: seeds must be non-empty");
  c.output_dir = j.value("output_dir", c.output_dir.string());
  return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json d = {{"preset", c.dataset.preset}, {"seed", c.dataset.seed}, {"overrides", c.dataset.overrides}};
  if (!c.dataset.path.empty()) d["path"] = c.dataset.path.string();
  return {{"name", c.name}, {"dataset", d}, {"train", c.train}, {"seeds", c.seeds}, {"output_dir", c.output_dir.string()}};
}

std::string config_hash(const ExperimentConfig& config) {
  auto j = to_json(config);
  j.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

MetricSummary summarize(std::vector<double> values) {
  MetricSummary s;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  double sum = 0.0;
  for (double v : s.values) sum += v;
  s.mean = sum / static_cast<double>(s.values.size());
  if (s.values.size() > 1) {
    double ss = 0.0;
    for (double v : s.values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.values.size() - 1));
  }
  return s;
}

std::size_t worker_count(std::size_t requested) {
  if (requested) return requested;
  if (const char* env = std::getenv("MBIAS_WORKERS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

nlohmann::json ExperimentSummary::to_json() const {
  nlohmann::json failed = nlohmann::json::array();
  std::vector<std::uint64_t> seeds;
  for (const auto& r : runs) {
    seeds.push_back(r.seed);
    if (!r.ok) failed.push_back({{"seed", r.seed}, {"error", r.error}});
  }
  return {{"seeds", seeds}, {"test", summary_json(test)}, {"val", summary_json(val)}, {"failed", failed}, {"all_ok", all_ok}};
}

ExperimentSummary run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  const Dataset ds = config.dataset.materialize();
  return run_experiment(config, ds, options);
}

ExperimentSummary run_experiment(const ExperimentConfig& config, const Dataset& ds, const RunOptions& options) {
  if (config.seeds.empty()) throw ContractViolation("experiment needs at least one seed");
  ExperimentSummary summary;
  if (options.write_outputs) {
    summary.run_dir = config.output_dir / (config.name + "-" + config_hash(config));
    if (std::filesystem::exists(summary.run_dir)) {
      if (!options.force)
        throw IoError("run directory " + summary.run_dir.string() + " already exists (use --force to overwrite)");
      std::filesystem::remove_all(summary.run_dir);
    }
    std::filesystem::create_directories(summary.run_dir);
    write_file(summary.run_dir / "config.json", to_json(config).dump(2) + "\n");
  }

  summary.runs.resize(config.seeds.size());
  std::vector<std::optional<Parameters>> params(config.seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < config.seeds.size(); k = next++) {
      TrainConfig tc = config.train;
      tc.seed = config.seeds[k];
      SeedResult& r = summary.runs[k];
      r.seed = tc.seed;
      try {
        auto res = train(ds, tc);
        r.record = std::move(res.record);
        params[k] = std::move(res.params);
        r.ok = true;
      } catch (const DivergenceError& e) {
        r.error = e.what();
        r.record = e.partial();
      } catch (const std::exception& e) {
        r.error = e.what();
      }
    }
  };
  const std::size_t workers = std::min(worker_count(options.workers), config.seeds.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::map<std::string, std::vector<double>> test_acc, val_acc;
  for (std::size_t k = 0; k < summary.runs.size(); ++k) {
    const auto& r = summary.runs[k];
    if (options.write_outputs) {
      const auto dir = summary.run_dir / ("seed-" + std::to_string(r.seed));
      write_file(dir / "runrecord.ndjson", to_ndjson(r.record));
      if (params[k]) save_parameters(*params[k], dir / "params.json");
      if (!r.ok) write_file(dir / "error.txt", r.error + "\n");
    }
    if (!r.ok) {
      summary.all_ok = false;
      continue;
    }
    add_table(test_acc, *r.record.final_test);
    add_table(val_acc, *r.record.final_val);
  }
  for (auto& [k, v] : test_acc) summary.test[k] = summarize(v);
  for (auto& [k, v] : val_acc) summary.val[k] = summarize(v);
  if (options.write_outputs) write_file(summary.run_dir / "summary.json", summary.to_json().dump(2) + "\n");
  return summary;
}

SweepGrid parse_sweep_grid(const nlohmann::json& j) {
  SweepGrid g;
  if (j.contains("eta1")) g.eta1 = j.at("eta1").get<std::vector<double>>();
  if (j.contains("eta2")) g.eta2 = j.at("eta2").get<std::vector<double>>();
  if (j.contains("U")) g.U = j.at("U").get<std::vector<std::size_t>>();
  if (j.contains("weight_decay")) g.weight_decay = j.at("weight_decay").get<std::vector<double>>();
  if (j.contains("eta2_inverse_u_ref")) g.eta2_inverse_u_ref = j.at("eta2_inverse_u_ref").get<std::size_t>();
  if (j.contains("cell_seeds")) g.cell_seeds = j.at("cell_seeds").get<std::vector<std::uint64_t>>();
  return g;
}

SweepResult sweep(const ExperimentConfig& base, const SweepGrid& grid, const RunOptions& options) {
  const Dataset ds = base.dataset.materialize();
  const auto& t = base.train;
  const std::vector<double> eta1s = grid.eta1.empty() ? std::vector<double>{t.eta1} : grid.eta1;
  const std::vector<double> eta2s = grid.eta2.empty() ? std::vector<double>{t.eta2} : grid.eta2;
  const std::vector<std::size_t> Us = grid.U.empty() ? std::vector<std::size_t>{t.U} : grid.U;
  const std::vector<double> wds = grid.weight_decay.empty() ? std::vector<double>{t.weight_decay} : grid.weight_decay;

  SweepResult result;
  ExperimentConfig cell_cfg = base;
  cell_cfg.seeds = grid.cell_seeds.empty() ? std::vector<std::uint64_t>{base.seeds.front()} : grid.cell_seeds;
  RunOptions cell_opts = options;
  cell_opts.write_outputs = false;

  bool any_ok = false;
  for (double e1 : eta1s)
    for (double e2 : eta2s)
      for (std::size_t u : Us)
        for (double wd : wds) {
          SweepCell cell;
          cell.config = t;
          cell.config.eta1 = e1;
          cell.config.eta2 = grid.eta2_inverse_u_ref ? e2 * static_cast<double>(*grid.eta2_inverse_u_ref) / static_cast<double>(u) : e2;
          cell.config.U = u;
          cell.config.weight_decay = wd;
          cell_cfg.train = cell.config;
          try {
            const auto s = run_experiment(cell_cfg, ds, cell_opts);
            cell.ok = s.all_ok;
            if (s.all_ok) {
              double sel = 0.0;
              for (const auto& r : s.runs) sel += selection_value(*r.record.final_val, cell.config.selection_metric);
              cell.selection = sel / static_cast<double>(s.runs.size());
              cell.test_unbiased = s.test.at("unbiased").mean;
            } else {
              for (const auto& r : s.runs)
                if (!r.ok) cell.error = r.error;
            }
          } catch (const std::exception& e) {
            cell.ok = false;
            cell.error = e.what();
          }
          if (cell.ok && (!any_ok || cell.selection > result.cells[result.best].selection)) {
            result.best = result.cells.size();
            any_ok = true;
          }
          result.cells.push_back(std::move(cell));
        }
  if (!any_ok) throw DivergenceError("every sweep cell failed", RunRecord{});

  ExperimentConfig winner = base;
  winner.train = result.cells[result.best].config;
  result.final = run_experiment(winner, ds, options);
  if (options.write_outputs) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : result.cells)
      cells.push_back({{"config", c.config}, {"ok", c.ok}, {"error", c.error}, {"selection", c.selection},
                       {"test_unbiased", c.test_unbiased}});
    write_file(result.final.run_dir / "sweep.json",
               nlohmann::json{{"cells", cells}, {"best", result.best}}.dump(2) + "\n");
  }
  return result;
}

std::string export_trajectories(const std::filesystem::path& source) {
  std::filesystem::path file = source;
  if (std::filesystem::is_directory(source)) file = source / "runrecord.ndjson";
  if (!std::filesystem::exists(file)) throw IoError("no run record at " + file.string());
  const auto run = parse_ndjson(read_file(file));
  if (run.steps.empty()) throw IoError("run record " + file.string() + " has no joint steps");
  const std::size_t n = run.steps.front().sigma.size();
  std::vector<std::string> labels = run.group_labels;
  if (labels.size() != n) {
    labels.clear();
    for (std::size_t i = 0; i < n; ++i) labels.push_back("g" + std::to_string(i));
  }
  std::ostringstream os;
  os << "iter";
  for (const auto& l : labels) os << ",sigma_" << l;
  os << ",lambda,pareto_residual";
  for (const auto& l : labels) os << ",loss_" << l;
  os << '\n';
  for (const auto& s : run.steps) {
    os << s.iter;
    for (double v : s.sigma) os << ',' << fmt_double(v);
    os << ',' << fmt_double(s.lambda) << ',' << fmt_double(s.residual);
    for (double v : s.losses) os << ',' << fmt_double(v);
    os << '\n';
  }
  return os.str();
}

}  // namespace mbias

// mbias command line: generate, train, eval, experiment, sweep, export-traj.
//
// Exit codes: 0 ok, 1 usage, 2 divergence, 3 io.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mbias/data.hpp"
#include "mbias/errors.hpp"
#include "mbias/harness.hpp"
#include "mbias/metrics.hpp"
#include "mbias/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitDivergence = 2;
constexpr int kExitIo = 3;

nlohmann::json load_json(const std::string& path) {
  try {
    return nlohmann::json::parse(mbias::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw mbias::IoError("cannot parse " + path + ": " + e.what());
  }
}

std::vector<std::size_t> parse_dims(const std::string& csv) {
  std::vector<std::size_t> dims;
  std::size_t pos = 0;
  while (pos < csv.size()) {
    const auto comma = csv.find(',', pos);
    dims.push_back(std::stoul(csv.substr(pos, comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return dims;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-bias debiased training: data generation, training and group-robustness evaluation"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a synthetic multi-bias dataset");
  std::string gen_preset = "multiceleba-like", gen_out, gen_config;
  std::uint64_t gen_seed = 0;
  gen->add_option("--preset", gen_preset, "Preset name")->check(CLI::IsMember(mbias::preset_names()));
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--out", gen_out, "Output dataset file")->required();
  gen->add_option("--config", gen_config, "JSON spec overrides applied on top of the preset");

  // train
  auto* tr = app.add_subcommand("train", "Train one model");
  std::string tr_data, tr_config, tr_out, tr_method, tr_preset;
  std::uint64_t tr_seed = 0, tr_data_seed = 0;
  bool tr_seed_set = false;
  tr->add_option("--data", tr_data, "Dataset file");
  tr->add_option("--preset", tr_preset, "Generate this preset instead of reading --data");
  tr->add_option("--data-seed", tr_data_seed, "Seed for --preset generation");
  tr->add_option("--config", tr_config, "Trainer config JSON");
  tr->add_option("--method", tr_method, "Method override");
  auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "Training seed override");
  tr->add_option("--out", tr_out, "Output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_data, ev_params, ev_biases, ev_split = "test", ev_out;
  ev->add_option("--data", ev_data, "Dataset file")->required();
  ev->add_option("--params", ev_params, "Parameter checkpoint")->required();
  ev->add_option("--eval-biases", ev_biases, "Comma-separated bias types used for grouping (default all)");
  ev->add_option("--split", ev_split, "val or test")->check(CLI::IsMember({"val", "test"}));
  ev->add_option("--out", ev_out, "Write the table as JSON here");

  // experiment
  auto* ex = app.add_subcommand("experiment", "Train and evaluate over several seeds");
  std::string ex_config;
  bool ex_force = false;
  std::size_t ex_workers = 0;
  ex->add_option("--config", ex_config, "Experiment config JSON")->required();
  ex->add_flag("--force", ex_force, "Overwrite an existing run directory");
  ex->add_option("--workers", ex_workers, "Parallel seeds (default: MBIAS_WORKERS or 1)");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Grid search, then rerun the best cell with all seeds");
  std::string sw_config;
  bool sw_force = false;
  std::size_t sw_workers = 0;
  sw->add_option("--config", sw_config, "Experiment config JSON with a \"grid\" object")->required();
  sw->add_flag("--force", sw_force, "Overwrite an existing run directory");
  sw->add_option("--workers", sw_workers, "Parallel seeds (default: MBIAS_WORKERS or 1)");

  // export-traj
  auto* et = app.add_subcommand("export-traj", "Export joint-step trajectories as CSV");
  std::string et_run, et_out;
  et->add_option("--run", et_run, "Run record file or seed directory")->required();
  et->add_option("--out", et_out, "CSV output (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }
  tr_seed_set = tr_seed_opt->count() > 0;

  try {
    if (*gen) {
      auto spec = mbias::preset(gen_preset, gen_seed);
      if (!gen_config.empty()) mbias::from_json(load_json(gen_config), spec);
      const auto ds = mbias::generate(spec);
      mbias::save_dataset(ds, gen_out);
      std::cout << "wrote " << gen_out << ": train " << ds.train.size() << ", val " << ds.val.size() << ", test "
                << ds.test.size() << " samples\n";
      return kExitOk;
    }

    if (*tr) {
      mbias::DatasetSource src;
      if (!tr_data.empty()) {
        src.path = tr_data;
      } else if (!tr_preset.empty()) {
        src.preset = tr_preset;
        src.seed = tr_data_seed;
      } else {
        std::cerr << "train: need --data or --preset\n";
        return kExitUsage;
      }
      mbias::TrainConfig cfg;
      if (!tr_config.empty()) load_json(tr_config).get_to(cfg);
      if (!tr_method.empty()) cfg.method = mbias::parse_method(tr_method);
      if (tr_seed_set) cfg.seed = tr_seed;
      const auto ds = src.materialize();
      std::filesystem::create_directories(tr_out);
      mbias::write_file(std::filesystem::path(tr_out) / "train_config.json", nlohmann::json(cfg).dump(2) + "\n");
      try {
        auto res = mbias::train(ds, cfg);
        mbias::write_file(std::filesystem::path(tr_out) / "runrecord.ndjson", mbias::to_ndjson(res.record));
        mbias::save_parameters(res.params, std::filesystem::path(tr_out) / "params.json");
        std::cout << mbias::format_table(*res.record.final_test);
      } catch (const mbias::DivergenceError& e) {
        mbias::write_file(std::filesystem::path(tr_out) / "runrecord.ndjson", mbias::to_ndjson(e.partial()));
        std::cerr << e.what() << "\n";
        return kExitDivergence;
      }
      return kExitOk;
    }

    if (*ev) {
      const auto ds = mbias::load_dataset(ev_data);
      const auto params = mbias::load_parameters(ev_params);
      const auto dims = ev_biases.empty() ? std::vector<std::size_t>{} : parse_dims(ev_biases);
      const auto kind = ev_split == "val" ? mbias::SplitKind::kVal : mbias::SplitKind::kTest;
      const auto index = mbias::assign_groups(ds, kind, dims);
      const auto props = mbias::group_proportions(mbias::assign_groups(ds, mbias::SplitKind::kTrain, dims));
      const auto table = mbias::evaluate(params, mbias::split_of(ds, kind), index, props);
      std::cout << mbias::format_table(table);
      if (!ev_out.empty()) mbias::write_file(ev_out, mbias::to_json(table).dump(2) + "\n");
      return kExitOk;
    }

    if (*ex) {
      const auto cfg = mbias::parse_experiment(load_json(ex_config));
      mbias::RunOptions opts;
      opts.force = ex_force;
      opts.workers = ex_workers;
      const auto summary = mbias::run_experiment(cfg, opts);
      std::cout << summary.to_json().dump(2) << "\n" << "run directory: " << summary.run_dir.string() << "\n";
      return summary.all_ok ? kExitOk : kExitDivergence;
    }

    if (*sw) {
      const auto j = load_json(sw_config);
      const auto cfg = mbias::parse_experiment(j);
      const auto grid = mbias::parse_sweep_grid(j.value("grid", nlohmann::json::object()));
      mbias::RunOptions opts;
      opts.force = sw_force;
      opts.workers = sw_workers;
      const auto res = mbias::sweep(cfg, grid, opts);
      for (const auto& c : res.cells) {
        std::cout << "eta1=" << c.config.eta1 << " eta2=" << c.config.eta2 << " U=" << c.config.U
                  << " wd=" << c.config.weight_decay << " -> "
                  << (c.ok ? "selection " + std::to_string(c.selection) : "failed: " + c.error) << "\n";
      }
      std::cout << "best cell " << res.best << "; run directory: " << res.final.run_dir.string() << "\n";
      return res.final.all_ok ? kExitOk : kExitDivergence;
    }

    if (*et) {
      const auto csv = mbias::export_trajectories(et_run);
      if (et_out.empty())
        std::cout << csv;
      else
        mbias::write_file(et_out, csv);
      return kExitOk;
    }
  } catch (const mbias::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const mbias::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const mbias::ContractViolation& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

#include "mbias/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mbias/baselines.hpp"
#include "mbias/errors.hpp"
#include "mbias/rng.hpp"

namespace mbias {

namespace {

struct MethodName {
  Method method;
  const char* name;
};

constexpr MethodName kMethodNames[] = {
    {Method::kOurs, "ours"},
    {Method::kErm, "erm"},
    {Method::kUpweight, "upweight"},
    {Method::kUpsample, "upsample"},
    {Method::kGroupDro, "group_dro"},
    {Method::kFixedAlpha, "fixed_alpha"},
    {Method::kLossOnlyAlpha, "loss_only_alpha"},
    {Method::kMgdaOnly, "mgda_only"},
};

bool uses_scaling(Method m) {
  return m == Method::kOurs || m == Method::kFixedAlpha || m == Method::kLossOnlyAlpha || m == Method::kMgdaOnly;
}

ScalingRule scaling_rule(Method m) {
  switch (m) {
    case Method::kFixedAlpha: return ScalingRule::kFixed;
    case Method::kLossOnlyAlpha: return ScalingRule::kLossOnly;
    case Method::kMgdaOnly: return ScalingRule::kMgda;
    default: return ScalingRule::kParetoLagrangian;
  }
}

std::vector<std::size_t> all_dims(std::size_t d) {
  std::vector<std::size_t> v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = i;
  return v;
}

nlohmann::json vec_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

void check_losses(const std::vector<double>& losses, double threshold, std::size_t iter, const RunRecord& rec) {
  for (std::size_t n = 0; n < losses.size(); ++n) {
    if (!std::isfinite(losses[n]) || losses[n] > threshold) {
      std::ostringstream os;
      os << "training diverged at iteration " << iter << ": group " << n << " loss " << losses[n]
         << " exceeds threshold " << threshold;
      throw DivergenceError(os.str(), rec);
    }
  }
}

}  // namespace

std::string method_name(Method m) {
  for (const auto& mn : kMethodNames)
    if (mn.method == m) return mn.name;
  return "?";
}

Method parse_method(const std::string& name) {
  for (const auto& mn : kMethodNames)
    if (name == mn.name) return mn.method;
  throw ContractViolation("unknown method '" + name + "'");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"method", method_name(c.method)},
       {"eta1", c.eta1},
       {"eta2", c.eta2},
       {"U", c.U},
       {"c", c.c},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"max_iterations", c.max_iterations},
       {"optimizer", c.optimizer == OptimizerKind::kSgd ? "sgd" : "adam"},
       {"weight_decay", c.weight_decay},
       {"selection_metric", c.selection_metric == SelectionMetric::kWorst ? "worst" : "unbiased"},
       {"selection_split", c.selection_split == SelectionSplit::kValidation ? "val" : "test"},
       {"eval_every", c.eval_every},
       {"patience", c.patience},
       {"seed", c.seed},
       {"hidden_dims", c.hidden_dims},
       {"eta_q", c.eta_q},
       {"dro_grouping", c.dro_grouping == DroGrouping::kBiasTarget ? "bias_target" : "group_label"},
       {"train_biases", c.train_biases},
       {"eval_biases", c.eval_biases},
       {"tie_break", c.tie_break == TieBreak::kError ? "error" : "lowest-index"},
       {"divergence_threshold", c.divergence_threshold}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto str = [&](const char* key, const std::string& fallback) { return j.value(key, fallback); };
  if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
  c.eta1 = j.value("eta1", c.eta1);
  c.eta2 = j.value("eta2", c.eta2);
  c.U = j.value("U", c.U);
  c.c = j.value("c", c.c);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  if (j.contains("optimizer")) {
    const auto o = str("optimizer", "sgd");
    if (o == "sgd")
      c.optimizer = OptimizerKind::kSgd;
    else if (o == "adam")
      c.optimizer = OptimizerKind::kAdam;
    else
      throw ContractViolation("unknown optimizer '" + o + "'");
  }
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("selection_metric")) {
    const auto s = str("selection_metric", "worst");
    if (s == "worst")
      c.selection_metric = SelectionMetric::kWorst;
    else if (s == "unbiased")
      c.selection_metric = SelectionMetric::kUnbiased;
    else
      throw ContractViolation("unknown selection_metric '" + s + "'");
  }
  if (j.contains("selection_split")) {
    const auto s = str("selection_split", "val");
    if (s == "val")
      c.selection_split = SelectionSplit::kValidation;
    else if (s == "test")
      c.selection_split = SelectionSplit::kTest;
    else
      throw ContractViolation("unknown selection_split '" + s + "'");
  }
  c.eval_every = j.value("eval_every", c.eval_every);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  if (j.contains("hidden_dims")) c.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
  c.eta_q = j.value("eta_q", c.eta_q);
  if (j.contains("dro_grouping")) {
    const auto s = str("dro_grouping", "bias_target");
    if (s == "bias_target")
      c.dro_grouping = DroGrouping::kBiasTarget;
    else if (s == "group_label")
      c.dro_grouping = DroGrouping::kGroupLabel;
    else
      throw ContractViolation("unknown dro_grouping '" + s + "'");
  }
  if (j.contains("train_biases")) c.train_biases = j.at("train_biases").get<std::vector<std::size_t>>();
  if (j.contains("eval_biases")) c.eval_biases = j.at("eval_biases").get<std::vector<std::size_t>>();
  if (j.contains("tie_break")) {
    const auto s = str("tie_break", "error");
    if (s == "error")
      c.tie_break = TieBreak::kError;
    else if (s == "lowest-index")
      c.tie_break = TieBreak::kLowestIndex;
    else
      throw ContractViolation("unknown tie_break '" + s + "'");
  }
  c.divergence_threshold = j.value("divergence_threshold", c.divergence_threshold);
}

// ---------------------------------------------------------------------------

std::string to_ndjson(const RunRecord& rec) {
  std::string out;
  for (const auto& s : rec.steps) {
    nlohmann::json j = {{"iter", s.iter},
                        {"sigma_alpha", s.sigma},
                        {"sigma_delta", s.sigma_delta},
                        {"lambda", s.lambda},
                        {"group_losses", s.losses},
                        {"pareto_residual", vec_or_null(s.residual)},
                        {"penalty", vec_or_null(s.penalty)}};
    out += j.dump();
    out += '\n';
  }
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : rec.evals)
    evals.push_back({{"iter", e.iter}, {"selection", e.selection}, {"unbiased", e.unbiased}, {"worst", e.worst}});
  nlohmann::json fin = {{"method", rec.method},
                        {"groups", rec.group_labels},
                        {"iterations", rec.iterations},
                        {"best_iter", rec.best_iter},
                        {"best_selection", rec.best_selection},
                        {"selection_metric", rec.selection_metric},
                        {"selection_split", rec.selection_split},
                        {"test_set_selection", rec.test_set_selection},
                        {"validation_mode", rec.validation_mode},
                        {"optimizer", rec.optimizer},
                        {"evals", evals}};
  if (rec.final_val) fin["val"] = to_json(*rec.final_val);
  if (rec.final_test) fin["test"] = to_json(*rec.final_test);
  out += nlohmann::json{{"final", fin}}.dump();
  out += '\n';
  return out;
}

StoredRun parse_ndjson(const std::string& text) {
  StoredRun run;
  std::istringstream is(text);
  std::string line;
  bool have_final = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("malformed run record line: ") + e.what());
    }
    if (j.contains("final")) {
      run.final = j.at("final");
      run.group_labels = run.final.value("groups", std::vector<std::string>{});
      have_final = true;
      continue;
    }
    JointStep s;
    s.iter = j.at("iter").get<std::size_t>();
    s.sigma = j.at("sigma_alpha").get<std::vector<double>>();
    s.sigma_delta = j.value("sigma_delta", std::vector<double>{});
    s.lambda = j.at("lambda").get<double>();
    s.losses = j.at("group_losses").get<std::vector<double>>();
    s.residual = j.at("pareto_residual").is_null() ? NAN : j.at("pareto_residual").get<double>();
    s.penalty = j.contains("penalty") && !j.at("penalty").is_null() ? j.at("penalty").get<double>() : NAN;
    run.steps.push_back(std::move(s));
  }
  if (!have_final) throw IoError("run record has no final metrics object");
  return run;
}

// ---------------------------------------------------------------------------

TrainResult train(const Dataset& ds, const TrainConfig& cfg) {
  if (cfg.U == 0) throw ContractViolation("update period U must be positive");
  if (cfg.batch_size == 0) throw ContractViolation("batch_size must be positive");
  if (cfg.eta1 < 0.0 || cfg.eta2 < 0.0 || cfg.eta_q < 0.0) throw ContractViolation("learning rates must be >= 0");

  const auto train_dims = cfg.train_biases.empty() ? all_dims(ds.num_biases()) : cfg.train_biases;
  const auto eval_dims = cfg.eval_biases.empty() ? train_dims : cfg.eval_biases;
  const auto train_table = compute_majority(ds.train, ds.num_classes(), ds.alphabets(), train_dims, cfg.tie_break);
  const auto eval_table = compute_majority(ds.train, ds.num_classes(), ds.alphabets(), eval_dims, cfg.tie_break);
  const GroupIndex train_index = assign_groups(ds.train, train_table, ds.num_classes());
  const auto proportions = group_proportions(assign_groups(ds.train, eval_table, ds.num_classes()));
  const GroupIndex val_index = assign_groups(ds.val, eval_table, ds.num_classes());
  const GroupIndex test_index = assign_groups(ds.test, eval_table, ds.num_classes());

  MlpSpec spec{ds.spec.feature_dim(), cfg.hidden_dims, ds.num_classes(), derive_seed(cfg.seed, "init")};
  Parameters params = init_mlp(spec);
  Optimizer opt(cfg.optimizer, cfg.eta1, cfg.weight_decay, params.flat().size());
  const std::uint64_t sampler_seed = derive_seed(cfg.seed, "sampler");

  RunRecord rec;
  rec.method = method_name(cfg.method);
  rec.selection_metric = cfg.selection_metric == SelectionMetric::kWorst ? "worst" : "unbiased";
  rec.selection_split = cfg.selection_split == SelectionSplit::kValidation ? "val" : "test";
  rec.test_set_selection = cfg.selection_split == SelectionSplit::kTest;
  rec.validation_mode = ds.spec.val_mode == ValidationMode::kBalanced ? "balanced" : "in_distribution";

  // Partitions that group-balanced methods draw from.
  std::vector<std::vector<std::size_t>> partitions;
  if (cfg.method == Method::kGroupDro) {
    auto dro = dro_partitions(ds.train, train_table, ds.num_classes(), cfg.dro_grouping);
    partitions = std::move(dro.parts);
    rec.group_labels = std::move(dro.labels);
  } else {
    for (auto id : train_index.nonempty_groups()) {
      partitions.push_back(train_index.groups[id]);
      rec.group_labels.push_back(group_label(id, train_index.num_biases));
    }
  }
  const std::size_t N = partitions.size();
  const bool balanced = cfg.method != Method::kErm && cfg.method != Method::kUpweight;
  const std::size_t M = ds.train.size();
  const std::size_t iters_per_epoch = (M + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.max_iterations ? cfg.max_iterations : cfg.epochs * iters_per_epoch;
  const std::size_t eval_every = cfg.eval_every ? cfg.eval_every : iters_per_epoch;

  std::optional<ScalingController> controller;
  if (uses_scaling(cfg.method)) controller.emplace(scaling_rule(cfg.method), N, cfg.eta2, cfg.c);
  std::optional<GroupDroState> dro;
  if (cfg.method == Method::kGroupDro) dro = GroupDroState::uniform(N, cfg.eta_q);

  std::optional<GroupBalancedSampler> balanced_sampler;
  std::optional<ShuffledSampler> mixed_sampler;
  std::size_t sampler_epoch = static_cast<std::size_t>(-1);

  Parameters best = params;
  double best_value = -INFINITY;
  std::size_t since_best = 0;
  rec.best_selection = best_value;
  const Split& select_split = cfg.selection_split == SelectionSplit::kValidation ? ds.val : ds.test;
  const GroupIndex& select_index = cfg.selection_split == SelectionSplit::kValidation ? val_index : test_index;

  try {
    for (std::size_t iter = 0; iter < total; ++iter) {
      const std::size_t epoch = iter / iters_per_epoch;
      if (epoch != sampler_epoch) {
        sampler_epoch = epoch;
        if (balanced)
          balanced_sampler.emplace(partitions, cfg.batch_size, sampler_seed, epoch);
        else
          mixed_sampler.emplace(M, cfg.batch_size, sampler_seed, epoch);
      }
      const bool joint = (iter + 1) % cfg.U == 0;

      if (controller) {
        const auto batches = balanced_sampler->next();
        auto gl = compute_group_losses(params, ds.train, batches, true);
        check_losses(gl.losses, cfg.divergence_threshold, iter, rec);
        const auto sigma = controller->weights();
        opt.step(params.flat(), combine_gradients(gl.grads, sigma));
        if (joint) rec.steps.push_back(controller->update(iter, gl.losses, gram_matrix(gl.grads)));
      } else if (dro) {
        const auto batches = balanced_sampler->next();
        auto gl = compute_group_losses(params, ds.train, batches, true);
        check_losses(gl.losses, cfg.divergence_threshold, iter, rec);
        JointStep step;
        step.iter = iter;
        step.sigma = dro->q;
        dro->update(gl.losses);
        opt.step(params.flat(), combine_gradients(gl.grads, dro->q));
        if (joint) {
          step.losses = gl.losses;
          step.residual = N <= 64 ? pareto_residual(step.sigma, gram_matrix(gl.grads)) : NAN;
          step.penalty = NAN;
          step.sigma_delta.resize(N);
          for (std::size_t n = 0; n < N; ++n) step.sigma_delta[n] = dro->q[n] - step.sigma[n];
          rec.steps.push_back(std::move(step));
        }
      } else {
        LossAndGrad lg;
        if (cfg.method == Method::kUpsample) {
          std::vector<std::size_t> batch;
          for (const auto& part : balanced_sampler->next()) batch.insert(batch.end(), part.begin(), part.end());
          lg = batch_loss(params, ds.train, batch);
        } else {
          const auto batch = mixed_sampler->next();
          lg = cfg.method == Method::kUpweight ? upweight_loss(params, ds.train, train_index, batch)
                                               : batch_loss(params, ds.train, batch);
        }
        check_losses({lg.loss}, cfg.divergence_threshold, iter, rec);
        opt.step(params.flat(), lg.grad);
      }

      rec.iterations = iter + 1;
      if ((iter + 1) % eval_every == 0 || iter + 1 == total) {
        const auto table = evaluate(params, select_split, select_index, proportions);
        const double value = selection_value(table, cfg.selection_metric);
        rec.evals.push_back({iter, value, table.unbiased, table.worst});
        if (value > best_value) {
          best_value = value;
          best = params;
          rec.best_iter = iter;
          since_best = 0;
        } else if (cfg.patience && ++since_best >= cfg.patience) {
          break;
        }
      }
    }
  } catch (const NumericError& e) {
    throw DivergenceError(std::string("training diverged: ") + e.what(), rec);
  }

  for (double v : params.flat())
    if (!std::isfinite(v)) throw DivergenceError("training diverged: non-finite parameters", rec);

  rec.best_selection = best_value;
  rec.optimizer = opt.describe();
  rec.final_val = evaluate(best, ds.val, val_index, proportions);
  rec.final_test = evaluate(best, ds.test, test_index, proportions);
  return TrainResult{std::move(best), std::move(rec)};
}

ObjectiveRun optimize_objectives(const GroupObjective& objective, std::vector<double> theta, ScalingRule rule,
                                 double eta1, double eta2, std::size_t U, double c, std::size_t iterations) {
  if (U == 0) throw ContractViolation("update period U must be positive");
  ObjectiveRun run;
  std::optional<ScalingController> controller;
  for (std::size_t iter = 0; iter < iterations; ++iter) {
    auto val = objective(theta);
    if (!controller) controller.emplace(rule, val.losses.size(), eta2, c);
    const auto step = combine_gradients(val.grads, controller->weights());
    for (std::size_t p = 0; p < theta.size(); ++p) theta[p] -= eta1 * step[p];
    if ((iter + 1) % U == 0) run.steps.push_back(controller->update(iter, val.losses, gram_matrix(val.grads)));
  }
  run.theta = std::move(theta);
  return run;
}

}  // namespace mbias

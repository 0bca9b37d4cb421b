#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "mbias/data.hpp"
#include "mbias/errors.hpp"
#include "mbias/trainer.hpp"

using namespace mbias;

namespace {

const Dataset& shared_dataset() {
  static const Dataset ds = [] {
    auto spec = preset("multiceleba-like", 21);
    spec.train_counts = {1200, 500};
    spec.eval_per_cell = 30;
    return generate(spec);
  }();
  return ds;
}

TrainConfig quick_config(Method m) {
  TrainConfig cfg;
  cfg.method = m;
  cfg.optimizer = OptimizerKind::kAdam;
  cfg.eta1 = 1e-3;
  cfg.eta2 = 0.1;
  cfg.U = 2;
  // GroupDRO balances over the seven non-empty (group, class) cells.
  cfg.batch_size = m == Method::kGroupDro ? 56 : 64;
  cfg.epochs = 2;
  cfg.hidden_dims = {16};
  return cfg;
}

}  // namespace

TEST_CASE("method names round trip") {
  for (auto m : {Method::kOurs, Method::kErm, Method::kUpweight, Method::kUpsample, Method::kGroupDro,
                 Method::kFixedAlpha, Method::kLossOnlyAlpha, Method::kMgdaOnly})
    CHECK(parse_method(method_name(m)) == m);
  CHECK_THROWS_AS(parse_method("gradnorm"), ContractViolation);
}

TEST_CASE("config JSON applies overrides and round trips") {
  TrainConfig cfg;
  CHECK(cfg.eta1 == 2e-4);
  CHECK(cfg.eta2 == 1e-2);
  CHECK(cfg.U == 10);
  CHECK(cfg.batch_size == 512);
  CHECK(cfg.optimizer == OptimizerKind::kSgd);
  nlohmann::json::parse(R"({"eta1": 0.5, "U": 3, "method": "group_dro", "optimizer": "adam"})").get_to(cfg);
  CHECK(cfg.eta1 == 0.5);
  CHECK(cfg.U == 3);
  CHECK(cfg.method == Method::kGroupDro);
  CHECK(cfg.eta2 == 1e-2);
  TrainConfig back;
  nlohmann::json(cfg).get_to(back);
  CHECK(nlohmann::json(back) == nlohmann::json(cfg));
}

TEST_CASE("full run keeps sigma on the simplex and lambda non-decreasing") {
  const auto res = train(shared_dataset(), quick_config(Method::kOurs));
  const auto& steps = res.record.steps;
  REQUIRE(!steps.empty());
  CHECK(steps.size() == res.record.iterations / 2);
  double last = 0.0;
  for (const auto& s : steps) {
    std::vector<double> after = s.sigma;
    for (std::size_t i = 0; i < after.size(); ++i) after[i] += s.sigma_delta[i];
    for (const std::vector<double>* w : {&s.sigma, static_cast<const std::vector<double>*>(&after)}) {
      CHECK(std::abs(std::accumulate(w->begin(), w->end(), 0.0) - 1.0) < 1e-12);
      for (double v : *w) CHECK(v >= 0.0);
    }
    CHECK(s.lambda >= last);
    last = s.lambda;
    CHECK(s.residual >= 0.0);
    for (double l : s.losses) CHECK(l >= 0.0);
  }
  CHECK(steps.front().sigma == std::vector<double>(4, 0.25));
}

TEST_CASE("U = 1 updates the weights every iteration") {
  auto cfg = quick_config(Method::kOurs);
  cfg.U = 1;
  cfg.max_iterations = 25;
  const auto res = train(shared_dataset(), cfg);
  CHECK(res.record.steps.size() == 25);
  CHECK(res.record.iterations == 25);
}

TEST_CASE("training is reproducible for a seed") {
  const auto cfg = quick_config(Method::kOurs);
  const auto a = train(shared_dataset(), cfg);
  const auto b = train(shared_dataset(), cfg);
  CHECK(a.params == b.params);
  CHECK(to_ndjson(a.record) == to_ndjson(b.record));
  auto other = cfg;
  other.seed = 1;
  CHECK_FALSE(train(shared_dataset(), other).params == a.params);
}

TEST_CASE("every method trains and reports a full table") {
  for (auto m : {Method::kErm, Method::kUpweight, Method::kUpsample, Method::kGroupDro, Method::kFixedAlpha,
                 Method::kLossOnlyAlpha, Method::kMgdaOnly}) {
    const auto res = train(shared_dataset(), quick_config(m));
    REQUIRE(res.record.final_test.has_value());
    CHECK(res.record.final_test->groups.size() == 4);
    CHECK(res.record.method == method_name(m));
  }
}

TEST_CASE("run record NDJSON round trip") {
  const auto res = train(shared_dataset(), quick_config(Method::kGroupDro));
  const auto text = to_ndjson(res.record);
  const auto stored = parse_ndjson(text);
  CHECK(stored.group_labels == res.record.group_labels);
  REQUIRE(stored.steps.size() == res.record.steps.size());
  for (std::size_t k = 0; k < stored.steps.size(); ++k) {
    CHECK(stored.steps[k].iter == res.record.steps[k].iter);
    CHECK(stored.steps[k].sigma == res.record.steps[k].sigma);
    CHECK(stored.steps[k].lambda == res.record.steps[k].lambda);
  }
  CHECK(stored.final["method"] == "group_dro");
  CHECK(stored.final["test"]["unbiased"].get<double>() == res.record.final_test->unbiased);
}

TEST_CASE("test-set selection is flagged in the record") {
  auto cfg = quick_config(Method::kErm);
  cfg.selection_split = SelectionSplit::kTest;
  const auto res = train(shared_dataset(), cfg);
  CHECK(res.record.test_set_selection);
  CHECK(res.record.selection_split == "test");
  CHECK(res.record.validation_mode == "balanced");
}

TEST_CASE("divergence aborts with the trajectory so far") {
  auto cfg = quick_config(Method::kOurs);
  cfg.optimizer = OptimizerKind::kSgd;
  cfg.eta1 = 1e4;
  cfg.U = 1;
  try {
    train(shared_dataset(), cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.partial().method == "ours");
    CHECK(e.partial().iterations >= 1);
  }
}

TEST_CASE("invalid settings are contract violations") {
  auto cfg = quick_config(Method::kOurs);
  cfg.U = 0;
  CHECK_THROWS_AS(train(shared_dataset(), cfg), ContractViolation);
  cfg = quick_config(Method::kOurs);
  cfg.batch_size = 66;  // four groups
  CHECK_THROWS_AS(train(shared_dataset(), cfg), ContractViolation);
}

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mbias/baselines.hpp"
#include "mbias/data.hpp"
#include "mbias/errors.hpp"
#include "mbias/trainer.hpp"

using namespace mbias;

namespace {

GroupIndex sized_index(const std::vector<std::size_t>& sizes) {
  GroupIndex gi;
  gi.num_biases = 0;
  while ((std::size_t{1} << gi.num_biases) < sizes.size()) ++gi.num_biases;
  gi.num_classes = 1;
  gi.groups.resize(sizes.size());
  gi.by_class.assign(sizes.size(), std::vector<std::vector<std::size_t>>(1));
  std::size_t next = 0;
  for (std::size_t g = 0; g < sizes.size(); ++g)
    for (std::size_t k = 0; k < sizes[g]; ++k) {
      gi.groups[g].push_back(next);
      gi.by_class[g][0].push_back(next);
      gi.group_of.push_back(g);
      ++next;
    }
  return gi;
}

Dataset small_dataset(std::uint64_t seed, double p = 0.8) {
  auto spec = preset("multiceleba-like", seed);
  spec.train_counts = {300, 200};
  spec.eval_per_cell = 20;
  for (auto& b : spec.biases) b.p_guiding = p;
  return generate(spec);
}

double norm(const std::vector<double>& v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); }

}  // namespace

TEST_CASE("upweight weights are M over the group size") {
  const auto gi = sized_index({950, 50});
  const std::vector<std::size_t> batch = {0, 960, 999};
  CHECK(upweight_weights(gi, batch) == std::vector<double>{1000.0 / 950.0, 20.0, 20.0});

  const auto single = sized_index({30});
  const std::vector<std::size_t> b1 = {0, 7};
  CHECK(upweight_weights(single, b1) == std::vector<double>{1.0, 1.0});
}

TEST_CASE("upweighting equal-sized groups is plain ERM") {
  const auto ds = small_dataset(1);
  const auto p = init_mlp(MlpSpec{ds.train.feature_dim, {6}, 2, 2});
  const auto gi = sized_index({125, 125, 125, 125});
  std::vector<std::size_t> batch(40);
  std::iota(batch.begin(), batch.end(), 100);
  const auto w = upweight_weights(gi, batch);
  for (double v : w) CHECK(v == 4.0);
  const auto a = upweight_loss(p, ds.train, gi, batch);
  const auto b = batch_loss(p, ds.train, batch);
  CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-14));
  for (std::size_t i = 0; i < a.grad.size(); ++i) CHECK(a.grad[i] == doctest::Approx(b.grad[i]).epsilon(1e-12));
}

TEST_CASE("ERM with zero learning rate leaves parameters unchanged") {
  const auto ds = small_dataset(2);
  auto p = init_mlp(MlpSpec{ds.train.feature_dim, {6}, 2, 2});
  const auto before = p;
  const std::vector<std::size_t> batch = {0, 1, 2, 3};
  erm_step(p, ds.train, batch, 0.0);
  CHECK(p == before);
}

TEST_CASE("GroupDRO weights") {
  SUBCASE("equal losses keep q uniform") {
    auto st = GroupDroState::uniform(4, 0.1);
    const std::vector<double> losses = {0.5, 0.5, 0.5, 0.5};
    for (int k = 0; k < 10; ++k) st.update(losses);
    for (double q : st.q) CHECK(q == doctest::Approx(0.25).epsilon(1e-14));
  }
  SUBCASE("a dominant loss pulls its weight monotonically to 1") {
    auto st = GroupDroState::uniform(3, 0.05);
    const std::vector<double> losses = {0.1, 5.0, 0.2};
    double last = st.q[1];
    for (int k = 0; k < 50; ++k) {
      st.update(losses);
      CHECK(st.q[1] > last);
      last = st.q[1];
      CHECK(std::abs(std::accumulate(st.q.begin(), st.q.end(), 0.0) - 1.0) < 1e-12);
    }
    CHECK(st.q[1] > 0.999);
  }
}

TEST_CASE("GroupDRO partitions are (class, attributes) cells by default") {
  const auto ds = small_dataset(3);
  const auto table = compute_majority(ds.train, 2, ds.alphabets(), {0, 1});
  const auto cells = dro_partitions(ds.train, table, 2, DroGrouping::kBiasTarget);
  CHECK(cells.parts.size() == 8);
  std::size_t total = 0;
  for (const auto& p : cells.parts) total += p.size();
  CHECK(total == ds.train.size());
  for (std::size_t k = 0; k < cells.parts.size(); ++k)
    CHECK(cells.labels[k].rfind(cells.group_of_part[k] + "@t", 0) == 0);
  const auto groups = dro_partitions(ds.train, table, 2, DroGrouping::kGroupLabel);
  CHECK(groups.parts.size() == 4);
}

TEST_CASE("upsampling and upweighting agree on the expected gradient") {
  const auto ds = small_dataset(4, 0.75);
  const auto p = init_mlp(MlpSpec{ds.train.feature_dim, {}, 2, 1});
  const auto gi = assign_groups(ds, SplitKind::kTrain);
  const std::size_t P = p.flat().size();
  std::vector<double> up(P, 0.0), wt(P, 0.0);
  const int rounds = 3000;
  for (int r = 0; r < rounds; ++r) {
    GroupBalancedSampler bs(gi, 64, 11, static_cast<std::uint64_t>(r));
    std::vector<std::size_t> batch;
    for (const auto& part : bs.next()) batch.insert(batch.end(), part.begin(), part.end());
    const auto a = batch_loss(p, ds.train, batch);
    ShuffledSampler ss(ds.train.size(), 256, 12, static_cast<std::uint64_t>(r));
    const auto b = upweight_loss(p, ds.train, gi, ss.next());
    for (std::size_t i = 0; i < P; ++i) {
      up[i] += a.grad[i] / rounds;
      wt[i] += b.grad[i] / rounds;
    }
  }
  std::vector<double> diff(P);
  for (std::size_t i = 0; i < P; ++i) diff[i] = up[i] - wt[i];
  CHECK(norm(diff) / norm(up) < 0.05);
}

TEST_CASE("fixed weights with a single group is ERM on group-balanced batches") {
  auto ds = small_dataset(5);
  // Keep only all-guiding training samples so the training grouping has one group.
  const auto gi = assign_groups(ds, SplitKind::kTrain);
  Split kept;
  kept.feature_dim = ds.train.feature_dim;
  kept.num_biases = ds.train.num_biases;
  for (auto i : gi.groups[3]) {
    std::vector<int> bi = {ds.train.bias(i, 0), ds.train.bias(i, 1)};
    kept.push(ds.train.features(i), ds.train.t[i], bi);
  }
  ds.train = kept;

  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 3;
  cfg.eta1 = 0.05;
  cfg.hidden_dims = {8};
  cfg.method = Method::kUpsample;
  const auto erm = train(ds, cfg);
  const auto rec = ablation_arm(Method::kFixedAlpha, ds, cfg);
  cfg.method = Method::kFixedAlpha;
  const auto fixed = train(ds, cfg);
  REQUIRE(fixed.params.flat().size() == erm.params.flat().size());
  for (std::size_t i = 0; i < erm.params.flat().size(); ++i)
    CHECK(fixed.params.flat()[i] == doctest::Approx(erm.params.flat()[i]).epsilon(1e-12));
  CHECK(rec.group_labels == std::vector<std::string>{"GG"});
  for (const auto& s : rec.steps) CHECK(s.sigma == std::vector<double>{1.0});
  CHECK_THROWS_AS(ablation_arm(Method::kErm, ds, cfg), ContractViolation);
}

TEST_CASE("ERM on uncorrelated data treats groups alike") {
  auto spec = preset("unbiased", 6);
  spec.eval_per_cell = 400;
  const auto ds = generate(spec);
  TrainConfig cfg;
  cfg.method = Method::kErm;
  cfg.optimizer = OptimizerKind::kAdam;
  cfg.eta1 = 1e-3;
  cfg.batch_size = 64;
  cfg.epochs = 5;
  cfg.tie_break = TieBreak::kLowestIndex;
  const auto res = train(ds, cfg);
  const auto& groups = res.record.final_test->groups;
  double lo = 1.0, hi = 0.0;
  for (const auto& g : groups) {
    lo = std::min(lo, g.accuracy);
    hi = std::max(hi, g.accuracy);
  }
  // Four binomial estimates on 800 samples each: spread stays within a few standard errors.
  CHECK(hi - lo < 4.0 * std::sqrt(0.25 / 800.0) * 2.0);
}

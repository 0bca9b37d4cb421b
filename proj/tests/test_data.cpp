#include <doctest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "mbias/data.hpp"
#include "mbias/errors.hpp"
#include "mbias/rng.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mbias;

namespace {

// Split with empty features built from (t, b) pairs.
Split make_split(const std::vector<int>& t, const std::vector<std::vector<int>>& b) {
  Split s;
  s.feature_dim = 1;
  s.num_biases = b.empty() ? 0 : b[0].size();
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double x = static_cast<double>(i);
    s.push(std::span<const double>(&x, 1), t[i], b[i]);
  }
  return s;
}

}  // namespace

TEST_CASE("expected clean fractions of the presets") {
  CHECK(expected_clean_fraction(preset("mcmnist-like", 0)) == doctest::Approx(0.01 * 0.05).epsilon(1e-12));
  CHECK(expected_clean_fraction(preset("multiceleba-like", 0)) == doctest::Approx(0.0022).epsilon(0.01));
}

TEST_CASE("every preset generates and validates") {
  for (const auto& name : preset_names()) {
    auto spec = preset(name, 1);
    if (spec.train_cells.empty())
      for (auto& c : spec.train_counts) c = std::min<std::size_t>(c, 400);
    const auto ds = generate(spec);
    CHECK(ds.train.size() > 0);
    CHECK(ds.val.size() == ds.test.size());
    CHECK(ds.train.feature_dim == spec.feature_dim());
  }
}

TEST_CASE("generation is deterministic in the seed") {
  auto spec = preset("multiceleba-like", 5);
  spec.train_counts = {300, 120};
  CHECK(generate(spec).train == generate(spec).train);
  auto other = spec;
  other.seed = 6;
  CHECK_FALSE(generate(spec).train == generate(other).train);
}

TEST_CASE("exact cell counts reproduce the two-bias group table") {
  const auto ds = generate(preset("multiceleba-exact", 0));
  const auto idx = assign_groups(ds, SplitKind::kTrain);
  REQUIRE(idx.num_groups() == 4);
  CHECK(idx.groups[3].size() == 44582 + 16220);  // GG
  CHECK(idx.groups[2].size() == 2200 + 800);     // GC
  CHECK(idx.groups[1].size() == 2200 + 800);     // CG
  CHECK(idx.groups[0].size() == 110 + 40);       // CC
  CHECK(idx.by_class[0][0].size() == 110);
  CHECK(idx.by_class[0][1].size() == 40);
}

TEST_CASE("empirical clean fraction of the mcmnist-like training split") {
  const auto ds = generate(preset("mcmnist-like", 3));
  const auto idx = assign_groups(ds, SplitKind::kTrain);
  const double clean = static_cast<double>(idx.groups[0].size()) / static_cast<double>(ds.train.size());
  CHECK(clean < 0.003);
  const double gg = static_cast<double>(idx.groups[3].size()) / static_cast<double>(ds.train.size());
  CHECK(gg == doctest::Approx(0.99 * 0.95).epsilon(0.01));
}

TEST_CASE("evaluation splits are balanced over (class, pattern) cells") {
  auto spec = preset("multiceleba-like", 2);
  spec.train_counts = {500, 200};
  const auto ds = generate(spec);
  const auto idx = assign_groups(ds, SplitKind::kTest);
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t t = 0; t < 2; ++t) CHECK(idx.by_class[g][t].size() == spec.eval_per_cell);
}

TEST_CASE("guiding attribute losing the majority is a generation error") {
  auto spec = preset("multiceleba-like", 0);
  spec.train_counts = {200, 200};
  spec.biases[1].p_guiding = 0.3;
  CHECK_THROWS_AS(generate(spec), GenerationError);
  spec.require_guiding_majority = false;
  CHECK_NOTHROW(generate(spec));
}

TEST_CASE("majority rule on a hand-made class") {
  std::vector<int> t(100, 0);
  std::vector<std::vector<int>> b;
  for (int i = 0; i < 100; ++i) b.push_back({i < 90 ? 0 : 1});
  const auto s = make_split(t, b);
  const auto table = compute_majority(s, 1, {2}, {0});
  CHECK(table.majority[0][0] == 0);
  const auto idx = assign_groups(s, table, 1);
  CHECK(idx.groups[1].size() == 90);
  CHECK(idx.groups[0].size() == 10);
}

TEST_CASE("fully guiding data lands in one group") {
  std::vector<int> t;
  std::vector<std::vector<int>> b;
  for (int i = 0; i < 40; ++i) {
    t.push_back(i % 2);
    b.push_back({i % 2, i % 2});
  }
  const auto s = make_split(t, b);
  const auto idx = assign_groups(s, compute_majority(s, 2, {2, 2}, {0, 1}), 2);
  CHECK(idx.groups[3].size() == 40);
  CHECK(idx.groups[0].empty());
  CHECK(idx.groups[1].empty());
  CHECK(idx.groups[2].empty());
  CHECK(idx.nonempty_groups() == std::vector<std::size_t>{3});
}

TEST_CASE("majority ties are an error unless tie-breaking is requested") {
  const auto s = make_split({0, 0, 1, 1, 1}, {{0}, {1}, {1}, {1}, {0}});
  CHECK_THROWS_AS(compute_majority(s, 2, {2}, {0}), MajorityTieError);
  const auto table = compute_majority(s, 2, {2}, {0}, TieBreak::kLowestIndex);
  CHECK(table.majority[0][0] == 0);
  CHECK(table.majority[0][1] == 1);
}

TEST_CASE("assign_groups agrees with a brute-force counter") {
  Rng rng(99);
  int compared = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int C = 3, A = 3, D = 2;
    auto draw = [&](std::size_t n, std::vector<int>& t, std::vector<std::vector<int>>& b) {
      for (std::size_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(rng.below(C));
        t.push_back(cls);
        std::vector<int> row;
        for (int d = 0; d < D; ++d)
          row.push_back(rng.bernoulli(0.6) ? (cls + d) % A : static_cast<int>(rng.below(A)));
        b.push_back(row);
      }
    };
    std::vector<int> tt, et;
    std::vector<std::vector<int>> tb, eb;
    draw(20 + rng.below(60), tt, tb);
    draw(30, et, eb);
    const auto train = make_split(tt, tb), eval = make_split(et, eb);
    const auto brute = oracle::brute_force_groups(tt, tb, et, eb);
    if (brute.tie) {
      CHECK_THROWS_AS(compute_majority(train, C, {3, 3}, {0, 1}), MajorityTieError);
      continue;
    }
    const auto idx = assign_groups(eval, compute_majority(train, C, {3, 3}, {0, 1}), C);
    CHECK(idx.group_of == brute.group_of);
    ++compared;
  }
  CHECK(compared > 50);
}

TEST_CASE("grouping is invariant to sample order and partitions the split") {
  auto spec = preset("multiceleba3-like", 4);
  spec.train_counts = {400, 300};
  const auto ds = generate(spec);
  const auto table = compute_majority(ds.train, 2, ds.alphabets(), {0, 1, 2});

  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng(5).shuffle(order.begin(), order.end());
  Split shuffled;
  shuffled.feature_dim = ds.train.feature_dim;
  shuffled.num_biases = ds.train.num_biases;
  for (auto i : order) {
    std::vector<int> bi;
    for (std::size_t d = 0; d < 3; ++d) bi.push_back(ds.train.bias(i, d));
    shuffled.push(ds.train.features(i), ds.train.t[i], bi);
  }
  const auto table2 = compute_majority(shuffled, 2, ds.alphabets(), {0, 1, 2});
  CHECK(table.majority == table2.majority);

  const auto idx = assign_groups(ds.train, table, 2);
  const auto idx2 = assign_groups(shuffled, table2, 2);
  for (std::size_t k = 0; k < order.size(); ++k) CHECK(idx2.group_of[k] == idx.group_of[order[k]]);

  std::vector<int> seen(ds.train.size(), 0);
  std::size_t total = 0;
  for (const auto& g : idx.groups) {
    total += g.size();
    for (auto i : g) seen[i]++;
  }
  CHECK(total == ds.train.size());
  CHECK(std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; }));
  CHECK(idx.num_groups() == 8);
}

TEST_CASE("evaluation may group by more bias types than training") {
  auto spec = preset("multiceleba3-like", 4);
  spec.train_counts = {400, 300};
  const auto ds = generate(spec);
  CHECK(assign_groups(ds, SplitKind::kTest, {0, 1}).num_groups() == 4);
  CHECK(assign_groups(ds, SplitKind::kTest).num_groups() == 8);
}

TEST_CASE("group ids put the first bias in the most significant bit") {
  const std::vector<int> gc = {1, 0};
  CHECK(group_id(gc) == 2);
  CHECK(group_bits(2, 2) == std::vector<int>{1, 0});
  CHECK(group_bits(5, 3) == std::vector<int>{1, 0, 1});
}

TEST_CASE("group-balanced sampler") {
  std::vector<std::vector<std::size_t>> parts = {{0, 1, 2}, {}, {10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23,
                                                                 24, 25, 26, 27, 28, 29},
                                                 {30, 31, 32, 33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 43, 44, 45, 46},
                                                 {50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 60, 61, 62, 63, 64, 65, 66}};
  SUBCASE("quota per non-empty group") {
    GroupBalancedSampler s(parts, 64, 1, 0);
    CHECK(s.num_partitions() == 4);
    CHECK(s.quota() == 16);
    CHECK(s.partition_ids() == std::vector<std::size_t>{0, 2, 3, 4});
    const auto batch = s.next();
    REQUIRE(batch.size() == 4);
    for (const auto& sub : batch) CHECK(sub.size() == 16);
    // Undersized group repeats; members stay inside their partition.
    std::set<std::size_t> small(batch[0].begin(), batch[0].end());
    CHECK(small.size() <= 3);
    for (auto i : batch[0]) CHECK(i <= 2);
    // A partition at least one quota large is drawn without repeats within a pass.
    std::set<std::size_t> big(batch[1].begin(), batch[1].end());
    CHECK(big.size() == 16);
  }
  SUBCASE("deterministic in (seed, epoch)") {
    GroupBalancedSampler a(parts, 64, 7, 3), b(parts, 64, 7, 3), c(parts, 64, 7, 4);
    const auto ba = a.next(), bb = b.next(), bc = c.next();
    CHECK(ba == bb);
    CHECK_FALSE(ba == bc);
  }
  SUBCASE("batch size not divisible by the group count") {
    CHECK_THROWS_AS(GroupBalancedSampler(parts, 62, 1, 0), ContractViolation);
    try {
      GroupBalancedSampler(parts, 62, 1, 0);
    } catch (const ContractViolation& e) {
      CHECK(std::string(e.what()).find("nearest valid batch size is 60") != std::string::npos);
    }
  }
}

TEST_CASE("dataset file round trip") {
  auto spec = preset("mcmnist-like", 8);
  for (auto& c : spec.train_counts) c = 30;
  spec.eval_per_cell = 2;
  const auto ds = generate(spec);
  const auto dir = testutil::scratch_dir("dataset");
  save_dataset(ds, dir / "d.txt");
  const auto back = load_dataset(dir / "d.txt");
  CHECK(back.train == ds.train);
  CHECK(back.val == ds.val);
  CHECK(back.test == ds.test);
  CHECK(nlohmann::json(back.spec) == nlohmann::json(ds.spec));
  CHECK_THROWS_AS(load_dataset(dir / "nope.txt"), IoError);
}

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "mbias/errors.hpp"
#include "mbias/model.hpp"
#include "mbias/rng.hpp"
#include "test_util.hpp"

using namespace mbias;
using mbias::ad::Tensor;

TEST_CASE("parameter counts") {
  CHECK(init_mlp(MlpSpec{4, {3}, 2, 0}).flat().size() == 23);
  CHECK(init_mlp(MlpSpec{2, {}, 2, 0}).flat().size() == 6);
  CHECK(init_mlp(MlpSpec{10, {64, 64}, 10, 0}).flat().size() == 10 * 64 + 64 + 64 * 64 + 64 + 64 * 10 + 10);
}

TEST_CASE("initialization is deterministic and seed dependent") {
  const MlpSpec a{5, {7, 3}, 3, 42};
  CHECK(init_mlp(a) == init_mlp(a));
  auto b = a;
  b.seed = 43;
  CHECK_FALSE(init_mlp(a).flat_vector() == init_mlp(b).flat_vector());

  const auto p = init_mlp(a);
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    const auto w = p.weights(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows));
    for (double v : w.data) CHECK(std::abs(v) <= bound);
    for (double v : p.bias(l)) CHECK(v == 0.0);
  }
}

TEST_CASE("flat vector and layer views alias the same storage") {
  auto p = init_mlp(MlpSpec{3, {2}, 2, 1});
  p.weights(0)(1, 1) = 123.0;
  CHECK(p.flat()[1 * 2 + 1] == 123.0);
  const std::size_t bias1_offset = p.layout().slot(3).offset;
  p.flat()[bias1_offset] = -4.5;
  CHECK(p.bias(1)[0] == -4.5);
}

TEST_CASE("zero weights give zero logits and class 0") {
  Parameters p(MlpSpec{2, {}, 3, 0});
  const auto logits = predict_logits(p, Tensor::matrix(2, 2, {1.0, -2.0, 0.5, 3.0}));
  for (double v : logits.data) CHECK(v == 0.0);
  CHECK(argmax_rows(logits) == std::vector<int>{0, 0});
}

TEST_CASE("identity weights recover a one-hot input") {
  Parameters p(MlpSpec{4, {}, 4, 0});
  for (std::size_t i = 0; i < 4; ++i) p.weights(0)(i, i) = 1.0;
  std::vector<double> eye(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  CHECK(argmax_rows(predict_logits(p, Tensor::matrix(4, 4, eye))) == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("forward is row-wise: duplicates and permutations") {
  const auto p = init_mlp(MlpSpec{3, {5}, 4, 9});
  Rng rng(3);
  std::vector<double> xs(6 * 3);
  for (auto& v : xs) v = rng.normal();
  std::copy(xs.begin(), xs.begin() + 3, xs.begin() + 9);  // row 3 duplicates row 0
  const auto logits = predict_logits(p, Tensor::matrix(6, 3, xs));
  for (std::size_t c = 0; c < 4; ++c) CHECK(logits.at(0, c) == logits.at(3, c));

  std::vector<std::size_t> perm = {4, 2, 5, 0, 1, 3};
  std::vector<double> permuted;
  for (auto r : perm) permuted.insert(permuted.end(), xs.begin() + r * 3, xs.begin() + r * 3 + 3);
  const auto plog = predict_logits(p, Tensor::matrix(6, 3, permuted));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(plog.at(i, c) == logits.at(perm[i], c));
}

TEST_CASE("tape forward equals tape-free forward") {
  const auto p = init_mlp(MlpSpec{3, {4, 4}, 2, 5});
  const auto x = Tensor::matrix(2, 3, {0.5, -1.0, 2.0, 0.0, 0.3, -0.7});
  ad::Tape tape(p.flat());
  CHECK(forward(p, x, tape).value().data == predict_logits(p, x).data);
}

TEST_CASE("input width mismatch is a contract violation") {
  const auto p = init_mlp(MlpSpec{3, {4}, 2, 5});
  CHECK_THROWS_AS(predict_logits(p, Tensor::matrix(1, 2, {1.0, 2.0})), ContractViolation);
}

TEST_CASE("checkpoint round trip is bit exact") {
  auto p = init_mlp(MlpSpec{6, {5, 4}, 3, 77});
  p.flat()[0] = 0.1 + 0.2;
  p.flat()[1] = 1e-310;  // subnormal
  p.flat()[2] = -0.0;
  const auto dir = testutil::scratch_dir("checkpoint");
  save_parameters(p, dir / "p.json");
  const auto q = load_parameters(dir / "p.json");
  CHECK(q.spec() == p.spec());
  REQUIRE(q.flat().size() == p.flat().size());
  CHECK(std::memcmp(q.flat().data(), p.flat().data(), p.flat().size() * sizeof(double)) == 0);
  CHECK_THROWS_AS(load_parameters(dir / "missing.json"), IoError);
}

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "mbias/autodiff.hpp"
#include "mbias/errors.hpp"
#include "mbias/model.hpp"
#include "mbias/rng.hpp"
#include "oracles.hpp"

using namespace mbias;
using mbias::ad::Tape;
using mbias::ad::Tensor;

namespace {

double mlp_loss(const Parameters& p, const Tensor& x, const std::vector<int>& t) {
  Tape tape(p.flat());
  auto logits = forward(p, x, tape);
  return tape.nll_loss(tape.log_softmax(logits), t).value().item();
}

}  // namespace

TEST_CASE("relu, log_softmax and nll on small inputs") {
  std::vector<double> none;
  Tape tape(none);
  auto r = tape.relu(tape.constant(Tensor({3}, {-1.0, 0.0, 2.0})));
  CHECK(r.value().data == std::vector<double>{0.0, 0.0, 2.0});

  auto lp = tape.log_softmax(tape.constant(Tensor::matrix(1, 2, {0.0, 0.0})));
  CHECK(lp.value().data[0] == doctest::Approx(-std::numbers::ln2).epsilon(1e-15));
  CHECK(lp.value().data[1] == doctest::Approx(-std::numbers::ln2).epsilon(1e-15));

  std::vector<int> target = {0};
  auto nll = tape.nll_loss(lp, target);
  CHECK(nll.value().item() == doctest::Approx(0.6931471805599453).epsilon(1e-15));
}

TEST_CASE("gradient of x*x at 3 is 6") {
  std::vector<double> params = {3.0};
  Tape tape(params);
  auto x = tape.parameter(0, {1});
  auto g = tape.backward(tape.sum(tape.mul(x, x)));
  REQUIRE(g.size() == 1);
  CHECK(g[0] == 6.0);
}

TEST_CASE("gradient of sum(W x) has every row equal to x") {
  std::vector<double> params = {0.3, -1.2, 4.0, 0.5, 2.2, -0.7};
  Tape tape(params);
  auto W = tape.parameter(0, {3, 2});
  auto x = tape.constant(Tensor::matrix(2, 1, {1.0, 2.0}));
  auto g = tape.backward(tape.sum(tape.matmul(W, x)));
  CHECK(g == std::vector<double>{1.0, 2.0, 1.0, 2.0, 1.0, 2.0});
}

TEST_CASE("unused parameters get zero gradient") {
  std::vector<double> params = {1.5, 2.0, 9.0};
  Tape tape(params);
  auto a = tape.parameter(0, {1});
  auto g = tape.backward(tape.sum(tape.scale(a, 4.0)));
  CHECK(g == std::vector<double>{4.0, 0.0, 0.0});
}

TEST_CASE("every primitive matches central differences") {
  Rng rng(11);
  std::vector<double> params(4 * 3 + 3 + 4 * 3);
  for (auto& v : params) v = rng.uniform(-1.0, 1.0);
  const Tensor data = Tensor::matrix(2, 4, {0.3, -0.2, 1.1, 0.7, -0.9, 0.4, 0.05, -1.3});
  const std::vector<int> t = {2, 0};
  const std::vector<double> w = {0.25, 1.75};

  // Each lambda records one composite over all primitives and returns a scalar.
  auto build = [&](Tape& tape) {
    auto W = tape.parameter(0, {4, 3});
    auto b = tape.parameter(12, {3});
    auto V = tape.parameter(15, {4, 3});
    auto x = tape.constant(data);
    auto h = tape.add_bias(tape.matmul(x, W), b);
    auto h2 = tape.add(h, tape.scale(tape.matmul(x, V), -0.5));
    auto act = tape.relu(tape.mul(h2, h));
    auto lp = tape.log_softmax(act);
    auto l1 = tape.nll_loss(lp, t, w);
    auto l2 = tape.sum(tape.mul(h2, h2));
    std::vector<ad::Var> parts = {l1, l2};
    std::vector<double> k = {1.0, 0.1};
    return tape.weighted_sum(parts, k);
  };

  Tape tape(params);
  const auto grad = tape.backward(build(tape));
  const auto fd = oracle::finite_difference(
      [&](const std::vector<double>& p) {
        Tape t2(p);
        return build(t2).value().item();
      },
      params);
  CHECK(oracle::max_rel_error(grad, fd) < 1e-5);
}

TEST_CASE("random MLP gradients match central differences") {
  Rng rng(2024);
  for (int trial = 0; trial < 5; ++trial) {
    MlpSpec spec;
    spec.input_dim = 2 + rng.below(5);
    spec.hidden_dims = {2 + rng.below(6)};
    spec.num_classes = 2 + rng.below(3);
    spec.seed = rng.next_u64();
    const auto p = init_mlp(spec);
    const std::size_t B = 1 + rng.below(6);
    std::vector<double> xs(B * spec.input_dim);
    for (auto& v : xs) v = rng.normal();
    std::vector<int> t(B);
    for (auto& v : t) v = static_cast<int>(rng.below(spec.num_classes));
    const auto x = Tensor::matrix(B, spec.input_dim, xs);

    Tape tape(p.flat());
    const auto grad = tape.backward(tape.nll_loss(tape.log_softmax(forward(p, x, tape)), t));
    auto q = p;
    const auto fd = oracle::finite_difference(
        [&](const std::vector<double>& flat) {
          q.flat_vector() = flat;
          return mlp_loss(q, x, t);
        },
        std::vector<double>(p.flat().begin(), p.flat().end()));
    CHECK(oracle::max_rel_error(grad, fd) < 1e-5);
  }
}

TEST_CASE("backward is linear in the loss") {
  MlpSpec spec{3, {4}, 3, 7};
  const auto p = init_mlp(spec);
  const auto x = Tensor::matrix(2, 3, {0.1, 0.2, -0.3, 1.0, -1.0, 0.5});
  const std::vector<int> ta = {0, 1}, tb = {2, 2};

  auto grad_of = [&](auto&& root_fn) {
    Tape tape(p.flat());
    return tape.backward(root_fn(tape));
  };
  const auto ga = grad_of([&](Tape& tp) { return tp.nll_loss(tp.log_softmax(forward(p, x, tp)), ta); });
  const auto gb = grad_of([&](Tape& tp) { return tp.nll_loss(tp.log_softmax(forward(p, x, tp)), tb); });
  const auto gsum = grad_of([&](Tape& tp) {
    auto lp = tp.log_softmax(forward(p, x, tp));
    return tp.add(tp.nll_loss(lp, ta), tp.nll_loss(lp, tb));
  });
  for (std::size_t i = 0; i < gsum.size(); ++i) CHECK(gsum[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-12));
}

TEST_CASE("tape contracts") {
  std::vector<double> params = {1.0, 2.0};
  SUBCASE("second backward on a consumed tape is rejected") {
    Tape tape(params);
    auto root = tape.sum(tape.parameter(0, {2}));
    tape.backward(root);
    CHECK(tape.consumed());
    CHECK_THROWS_AS(tape.backward(root), ContractViolation);
  }
  SUBCASE("non-scalar root is rejected") {
    Tape tape(params);
    auto v = tape.parameter(0, {2});
    CHECK_THROWS_AS(tape.backward(v), ContractViolation);
  }
  SUBCASE("shape mismatch in matmul") {
    Tape tape(params);
    auto a = tape.constant(Tensor::matrix(2, 3, std::vector<double>(6, 1.0)));
    auto b = tape.constant(Tensor::matrix(2, 3, std::vector<double>(6, 1.0)));
    CHECK_THROWS_AS(tape.matmul(a, b), ContractViolation);
  }
  SUBCASE("target out of range") {
    Tape tape(params);
    auto lp = tape.log_softmax(tape.constant(Tensor::matrix(1, 2, {0.0, 0.0})));
    std::vector<int> bad = {2};
    CHECK_THROWS_AS(tape.nll_loss(lp, bad), ContractViolation);
  }
  SUBCASE("non-finite value reports the op") {
    std::vector<double> huge = {1e300};
    Tape tape(huge);
    auto x = tape.parameter(0, {1});
    CHECK_THROWS_AS(tape.mul(x, x), NumericError);
  }
}

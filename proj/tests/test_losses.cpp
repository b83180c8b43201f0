#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "cvqa/errors.hpp"
#include "cvqa/losses.hpp"

using namespace cvqa;
using namespace cvqa::loss;

namespace {

constexpr double kTol = 1e-9;

ad::Array rows(const std::vector<std::vector<double>>& p) {
  std::vector<double> flat;
  for (const auto& r : p) flat.insert(flat.end(), r.begin(), r.end());
  return ad::Array(ad::Shape{p.size(), p.front().size()}, flat);
}

const std::vector<double> kUnit(5, 1.0);

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("cross-entropy examples") {
    CHECK(std::abs(ce_loss(std::vector<double>{0, 1, 0, 0, 0}, 1, 1.0) - 0.0) <= kTol);
    CHECK(std::abs(ce_loss(std::vector<double>(5, 0.2), 3, 1.0) - std::log(5.0)) <= kTol);
    CHECK(std::abs(ce_loss(std::vector<double>(5, 0.2), 3, 1.0) - 1.60944) <= 1e-5);
    CHECK(std::abs(ce_loss(std::vector<double>{0.25, 0.75}, 0, 2.0) - 2.0 * std::log(4.0)) <= kTol);
    CHECK(std::abs(ce_loss(std::vector<double>{0.25, 0.75}, 0, 2.0) - 2.77259) <= 1e-5);
    CHECK_THROWS_AS(ce_loss(std::vector<double>{0.5, 0.5}, 2, 1.0), UsageError);
    CHECK_THROWS_AS(ce_loss(std::vector<double>{0.5, 0.5}, -1, 1.0), UsageError);
  }

  TEST_CASE("entropy clamps zero probabilities") {
    CHECK(entropy(std::vector<double>{0.0, 1.0}, 0) == doctest::Approx(-std::log(kProbFloor)));
  }

  TEST_CASE("consistency examples") {
    CHECK(std::abs(cons_loss(0.5, 0.2, 1.0) - 0.40) <= kTol);
    CHECK(cons_loss(7.3, 1.2, 1.0) == 0.0);
    CHECK(cons_loss(0.0, 0.0, 1.0) == 0.0);
    CHECK(cons_loss(1.0, 1.0, 1.0) == 0.0);
    CHECK_THROWS_AS(cons_loss(-0.1, 0.2, 1.0), UsageError);
    CHECK_THROWS_AS(cons_loss(0.1, -0.2, 1.0), UsageError);
    CHECK_THROWS_AS(cons_loss(0.1, 0.2, 0.0), UsageError);
  }

  TEST_CASE("consistency is monotone in the sub entropy and antitone in the main entropy") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int i = 0; i < 1000; ++i) {
      const double hs = u(rng), hm = u(rng), d = 0.1 * u(rng), g = 0.1 + u(rng);
      CHECK(cons_loss(hs + d, hm, g) >= cons_loss(hs, hm, g));
      CHECK(cons_loss(hs, hm + d, g) <= cons_loss(hs, hm, g));
      CHECK(cons_loss(hs, hm, g) >= 0.0);
    }
  }

  TEST_CASE("two-sample total loss example") {
    const std::vector<std::vector<double>> p{{0.5, 0.5, 0, 0, 0}, {0, 0, std::exp(-0.2), 1 - std::exp(-0.2), 0}};
    const std::vector<int> answers{0, 2};
    const std::vector<PairIndex> pairs{{0, 1}};
    const double expected = 0.5 * (std::log(2.0) + 0.2) + 0.5 * (std::log(2.0) * 0.8);
    const double v = total_loss_value(p, answers, pairs, kUnit, 0.5, 1.0);
    CHECK(std::abs(v - expected) <= kTol);
    CHECK(std::abs(v - 0.72383) <= 1e-5);

    ad::Tape t;
    const auto r = total_loss(t.constant(rows(p)), answers, pairs, kUnit, LossOptions{0.5, 1.0});
    CHECK(std::abs(r.total_value - expected) <= kTol);
    CHECK(std::abs(r.total.value().item() - expected) <= kTol);
    CHECK(std::abs(r.vqa_value - 0.5 * (std::log(2.0) + 0.2)) <= kTol);
    CHECK(std::abs(r.cons_value - std::log(2.0) * 0.8) <= kTol);
  }

  TEST_CASE("lambda zero is exactly the mean weighted cross-entropy") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    const std::size_t n = 6;
    std::vector<std::vector<double>> p(n, std::vector<double>(5));
    for (auto& r : p) {
      double s = 0.0;
      for (double& v : r) s += (v = u(rng));
      for (double& v : r) v /= s;
    }
    const std::vector<int> answers{0, 2, 1, 3, 4, 1};
    const std::vector<double> w{0.5, 0.7, 1.1, 1.3, 1.4};
    const std::vector<PairIndex> pairs{{0, 1}, {2, 3}};

    ad::Tape t1, t2;
    const ad::Var p1 = t1.leaf(rows(p)), p2 = t2.leaf(rows(p));
    const auto with_pairs = total_loss(p1, answers, pairs, w, LossOptions{0.0, 1.0});
    const auto no_pairs = total_loss(p2, answers, {}, w, LossOptions{0.0, 1.0});
    CHECK(with_pairs.total_value == no_pairs.total_value);
    const ad::Var v1[] = {p1}, v2[] = {p2};
    CHECK(t1.gradient(with_pairs.total, v1)[0] == t2.gradient(no_pairs.total, v2)[0]);

    double manual = 0.0;
    for (std::size_t i = 0; i < n; ++i) manual += w[answers[i]] * -std::log(p[i][answers[i]]) / n;
    CHECK(std::abs(with_pairs.total_value - manual) <= kTol);
  }

  TEST_CASE("gradient of the consistency term scales with lambda") {
    const std::vector<std::vector<double>> p{{0.6, 0.4, 0, 0, 0}, {0, 0, 0.7, 0.2, 0.1}};
    const std::vector<int> answers{0, 2};
    const std::vector<PairIndex> pairs{{0, 1}};
    std::vector<double> diffs;
    ad::Array base_grad;
    for (double lambda : {0.0, 0.5, 1.0}) {
      ad::Tape t;
      const ad::Var pv = t.leaf(rows(p));
      const auto r = total_loss(pv, answers, pairs, kUnit, LossOptions{lambda, 1.0});
      const ad::Var wrt[] = {pv};
      const ad::Array g = t.gradient(r.total, wrt)[0];
      if (lambda == 0.0) {
        base_grad = g;
      } else {
        diffs.push_back(g[0] - base_grad[0]);
      }
    }
    REQUIRE(diffs.size() == 2);
    CHECK(diffs[0] != 0.0);
    CHECK(diffs[1] == doctest::Approx(2.0 * diffs[0]).epsilon(1e-12));
  }

  TEST_CASE("stop-grad on the main question keeps its gradient cross-entropy only") {
    const std::vector<std::vector<double>> p{{0.6, 0.4, 0, 0, 0}, {0, 0, 0.7, 0.2, 0.1}};
    const std::vector<int> answers{0, 2};
    const std::vector<PairIndex> pairs{{0, 1}};
    ad::Tape t1, t2;
    const ad::Var a = t1.leaf(rows(p)), b = t2.leaf(rows(p));
    LossOptions stop{0.5, 1.0};
    stop.stop_grad_main = true;
    const auto r1 = total_loss(a, answers, pairs, kUnit, stop);
    const auto r2 = total_loss(b, answers, {}, kUnit, LossOptions{0.5, 1.0});
    const ad::Var wa[] = {a}, wb[] = {b};
    const auto ga = t1.gradient(r1.total, wa)[0];
    const auto gb = t2.gradient(r2.total, wb)[0];
    for (std::size_t k = 5; k < 10; ++k) CHECK(ga[k] == doctest::Approx(gb[k]).epsilon(1e-14));
    CHECK(ga[0] != doctest::Approx(gb[0]));
  }

  TEST_CASE("pairs outside the batch are usage errors") {
    ad::Tape t;
    const std::vector<std::vector<double>> p{{0.5, 0.5, 0, 0, 0}, {0, 0, 1, 0, 0}};
    const std::vector<int> answers{0, 2};
    const std::vector<PairIndex> bad{{0, 2}};
    CHECK_THROWS_AS(total_loss(t.constant(rows(p)), answers, bad, kUnit, LossOptions{}), UsageError);
    const std::vector<int> short_answers{0};
    CHECK_THROWS_AS(total_loss(t.constant(rows(p)), short_answers, {}, kUnit, LossOptions{}), ShapeError);
  }

  TEST_CASE("attention matching examples") {
    const std::vector<double> uniform(4, 0.25), onehot{1, 0, 0, 0};
    CHECK(squint_loss(uniform, uniform) == 0.0);
    CHECK(std::abs(squint_loss(uniform, onehot) - 0.1875) <= kTol);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 100; ++i) {
      std::vector<double> a(9), b(9);
      for (double& v : a) v = u(rng);
      for (double& v : b) v = u(rng);
      CHECK(squint_loss(a, b) == squint_loss(b, a));
    }
    CHECK_THROWS_AS(squint_loss(uniform, std::vector<double>(3, 0.1)), ShapeError);
  }

  TEST_CASE("graph attention matching agrees with the plain version") {
    ad::Tape t;
    std::vector<double> maps{0.25, 0.25, 0.25, 0.25, 1, 0, 0, 0, 0.1, 0.2, 0.3, 0.4, 0.4, 0.3, 0.2, 0.1};
    const ad::Var m = t.constant(ad::Array(ad::Shape{2, 2, 4}, maps));
    const std::vector<PairIndex> pairs{{0, 1}};
    const std::vector<double> a(maps.begin(), maps.begin() + 8), b(maps.begin() + 8, maps.end());
    CHECK(std::abs(squint_loss(m, pairs).value().item() - squint_loss(a, b)) <= kTol);
  }
}

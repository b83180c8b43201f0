#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "cvqa/errors.hpp"
#include "cvqa/harness.hpp"
#include "cvqa/losses.hpp"

namespace cvqa::harness {

namespace {

using ad::Array;
using ad::Shape;
using ad::Var;

constexpr double kEps = 1e-5;
constexpr double kOpTolerance = 1e-5;
constexpr double kLossTolerance = 1e-6;
constexpr double kModelTolerance = 1e-3;
// Inputs of kinked ops stay this far from the kink.
constexpr double kKinkMargin = 10 * kEps;

enum class Draw { normal, narrow, positive, away_from_zero, distinct, unit };

struct OpCase {
  std::string name;
  std::vector<Shape> inputs;
  std::vector<Draw> draws;  // one per input
  std::function<Var(std::span<const Var>)> op;
};

std::vector<double> draw_values(Draw d, std::size_t n, std::mt19937_64& rng) {
  std::vector<double> v(n);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  switch (d) {
    case Draw::normal:
      for (double& x : v) x = normal(rng);
      break;
    case Draw::narrow:
      for (double& x : v) x = 0.5 * normal(rng);
      break;
    case Draw::positive:
      for (double& x : v) x = 0.2 + 1.8 * u(rng);
      break;
    case Draw::away_from_zero:
      for (double& x : v) x = (u(rng) < 0.5 ? -1.0 : 1.0) * (0.05 + u(rng));
      break;
    case Draw::distinct: {
      // Values spaced 0.05 apart so no window max is within the margin of a tie.
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t i = 0; i < n; ++i) v[i] = 0.05 * static_cast<double>(order[i]) - 0.025 * static_cast<double>(n);
      break;
    }
    case Draw::unit:
      for (double& x : v) x = 0.05 + 0.9 * u(rng);
      break;
  }
  return v;
}

std::vector<OpCase> op_cases() {
  std::vector<OpCase> c;
  const Shape m23{2, 3};
  c.push_back({"add", {m23, m23}, {Draw::normal, Draw::normal}, [](auto v) { return ad::add(v[0], v[1]); }});
  c.push_back({"sub", {m23, m23}, {Draw::normal, Draw::normal}, [](auto v) { return ad::sub(v[0], v[1]); }});
  c.push_back({"mul", {m23, m23}, {Draw::normal, Draw::normal}, [](auto v) { return ad::mul(v[0], v[1]); }});
  c.push_back({"scale", {m23}, {Draw::normal}, [](auto v) { return ad::scale(v[0], -1.7); }});
  c.push_back({"shift", {m23}, {Draw::normal}, [](auto v) { return ad::shift(v[0], 0.3); }});
  c.push_back({"mul_const", {m23}, {Draw::normal}, [](auto v) {
                 return ad::mul_const(v[0], Array(Shape{2, 3}, {0.5, -1.0, 2.0, 1.5, -0.25, 3.0}));
               }});
  c.push_back({"matmul", {{3, 4}, {4, 2}}, {Draw::normal, Draw::normal}, [](auto v) { return ad::matmul(v[0], v[1]); }});
  c.push_back({"add_bias", {{2, 3, 2, 2}, {3}}, {Draw::normal, Draw::normal},
               [](auto v) { return ad::add_bias(v[0], v[1]); }});
  c.push_back({"add_per_channel", {{2, 3, 4}, {2, 3}}, {Draw::normal, Draw::normal},
               [](auto v) { return ad::add_per_channel(v[0], v[1]); }});
  c.push_back({"conv2d", {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}, {Draw::normal, Draw::normal, Draw::normal},
               [](auto v) { return ad::conv2d(v[0], v[1], v[2], 1, 1); }});
  c.push_back({"conv2d_strided", {{1, 2, 6, 6}, {2, 2, 3, 3}, {2}}, {Draw::normal, Draw::normal, Draw::normal},
               [](auto v) { return ad::conv2d(v[0], v[1], v[2], 2, 0); }});
  c.push_back({"max_pool2d", {{2, 2, 5, 5}}, {Draw::distinct}, [](auto v) { return ad::max_pool2d(v[0], 2); }});
  c.push_back({"relu", {m23}, {Draw::away_from_zero}, [](auto v) { return ad::relu(v[0]); }});
  c.push_back({"tanh", {m23}, {Draw::normal}, [](auto v) { return ad::tanh(v[0]); }});
  c.push_back({"sigmoid", {m23}, {Draw::normal}, [](auto v) { return ad::sigmoid(v[0]); }});
  c.push_back({"log", {m23}, {Draw::positive}, [](auto v) { return ad::log(v[0], 1e-12); }});
  c.push_back({"softmax_rows", {{3, 4}}, {Draw::narrow}, [](auto v) { return ad::softmax(v[0], 1); }});
  c.push_back({"softmax_spatial", {{2, 2, 5}}, {Draw::narrow}, [](auto v) { return ad::softmax(v[0], 2); }});
  c.push_back({"embedding", {{5, 3}}, {Draw::normal}, [](auto v) {
                 static const std::vector<int> ids{4, 0, 2, 2};
                 return ad::embedding(v[0], ids);
               }});
  c.push_back({"concat", {{2, 3}, {2, 2}}, {Draw::normal, Draw::normal}, [](auto v) {
                 const std::vector<Var> parts{v[0], v[1]};
                 return ad::concat(parts, 1);
               }});
  c.push_back({"reshape", {{2, 6}}, {Draw::normal}, [](auto v) { return ad::reshape(v[0], Shape{3, 4}); }});
  c.push_back({"sum", {m23}, {Draw::normal}, [](auto v) { return ad::sum(v[0]); }});
  c.push_back({"mean", {m23}, {Draw::normal}, [](auto v) { return ad::mean(v[0]); }});
  c.push_back({"dropout", {{4, 5}}, {Draw::normal}, [](auto v) {
                 std::mt19937_64 rng(11);  // same mask on every evaluation
                 return ad::dropout(v[0], 0.3, ad::Mode::train, rng);
               }});
  c.push_back({"spatial_weighted_sum", {{2, 3, 2, 2}, {2, 2, 2, 2}}, {Draw::normal, Draw::normal},
               [](auto v) { return ad::spatial_weighted_sum(v[0], v[1]); }});
  c.push_back({"pick", {{3, 4}}, {Draw::normal}, [](auto v) {
                 static const std::vector<int> idx{3, 0, 1};
                 return ad::pick(v[0], idx);
               }});
  c.push_back({"gather_rows", {{4, 3}}, {Draw::normal}, [](auto v) {
                 static const std::vector<std::size_t> rows{1, 3, 1};
                 return ad::gather_rows(v[0], rows);
               }});
  c.push_back({"broadcast_rows", {{3}}, {Draw::normal}, [](auto v) { return ad::broadcast_rows(v[0], 4); }});
  c.push_back({"select_rows", {{3, 2}, {3, 2}}, {Draw::normal, Draw::normal}, [](auto v) {
                 static const std::vector<std::uint8_t> take{1, 0, 1};
                 return ad::select_rows(take, v[0], v[1]);
               }});
  return c;
}

// f(x) = sum(op(inputs) * R) with a fixed random R per point.
SuiteResult check_op(const OpCase& oc, std::size_t points, std::mt19937_64& rng) {
  SuiteResult result{"op." + oc.name, kOpTolerance, points, {}};
  result.worst.passed = true;
  for (std::size_t p = 0; p < points; ++p) {
    std::vector<double> point;
    for (std::size_t i = 0; i < oc.inputs.size(); ++i) {
      const auto v = draw_values(oc.draws[i], ad::numel(oc.inputs[i]), rng);
      point.insert(point.end(), v.begin(), v.end());
    }
    const std::uint64_t weight_seed = rng();
    const ad::CheckedFunction f = [&](std::span<const double> x, std::vector<double>* grad) {
      ad::Tape tape;
      std::vector<Var> leaves;
      std::size_t offset = 0;
      for (const Shape& s : oc.inputs) {
        const std::size_t n = ad::numel(s);
        leaves.push_back(tape.leaf(Array(s, std::vector<double>(x.begin() + offset, x.begin() + offset + n))));
        offset += n;
      }
      const Var out = oc.op(leaves);
      std::mt19937_64 wr(weight_seed);
      std::uniform_real_distribution<double> u(0.5, 1.5);
      Array weights(out.shape());
      for (double& w : weights.values()) w = u(wr);
      const Var y = ad::sum(ad::mul_const(out, weights));
      if (grad) {
        grad->clear();
        for (const Array& g : tape.gradient(y, leaves)) grad->insert(grad->end(), g.values().begin(), g.values().end());
      }
      return y.value().item();
    };
    const ad::GradCheckReport r = ad::finite_diff_check(f, point, kEps, kOpTolerance);
    if (!r.passed || r.max_rel_error > result.worst.max_rel_error) {
      if (result.worst.passed || !r.passed) result.worst = r;
    }
  }
  return result;
}

struct LossPoint {
  std::vector<double> probs;  // (n, K) row-major
  std::vector<int> answers;
  std::vector<loss::PairIndex> pairs;
  std::vector<double> weights;
};

// Every main-question entropy stays at least the margin away from gamma.
LossPoint draw_loss_point(std::size_t n, std::vector<loss::PairIndex> pairs, double gamma, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::uniform_int_distribution<int> pick(0, synth::kAnswerCount - 1);
  std::uniform_real_distribution<double> w(0.5, 2.0);
  LossPoint lp;
  lp.pairs = std::move(pairs);
  for (int k = 0; k < synth::kAnswerCount; ++k) lp.weights.push_back(w(rng));
  lp.answers.resize(n);
  for (int& a : lp.answers) a = pick(rng);
  lp.probs.resize(n * synth::kAnswerCount);
  for (;;) {
    for (double& p : lp.probs) p = u(rng);
    bool ok = true;
    for (const loss::PairIndex& pi : lp.pairs) {
      const double h = -std::log(lp.probs[pi.main_pos * synth::kAnswerCount + lp.answers[pi.main_pos]]);
      if (std::abs(h - gamma) < 100 * kKinkMargin) ok = false;
    }
    if (ok) return lp;
  }
}

SuiteResult check_loss(const std::string& name, std::size_t n, std::vector<loss::PairIndex> pairs, bool cons_only,
                       const GradcheckOptions& options, std::mt19937_64& rng) {
  SuiteResult result{name, kLossTolerance, options.points, {}};
  result.worst.passed = true;
  std::uniform_real_distribution<double> lam(0.1, 1.0), gam(0.5, 2.0);
  for (std::size_t p = 0; p < options.points; ++p) {
    loss::LossOptions lo;
    lo.lambda = cons_only ? 1.0 : lam(rng);
    lo.gamma = gam(rng);
    lo.flip_hinge_gradient = options.flip_hinge_gradient;
    const LossPoint lp = draw_loss_point(n, pairs, lo.gamma, rng);
    const ad::CheckedFunction f = [&](std::span<const double> x, std::vector<double>* grad) {
      ad::Tape tape;
      const Var probs = tape.leaf(Array(Shape{n, synth::kAnswerCount}, std::vector<double>(x.begin(), x.end())));
      const loss::TotalLoss t = loss::total_loss(probs, lp.answers, lp.pairs, lp.weights, lo);
      const Var y = cons_only ? t.cons : t.total;
      if (grad) {
        const std::vector<Var> wrt{probs};
        const auto g = tape.gradient(y, wrt);
        grad->assign(g[0].values().begin(), g[0].values().end());
      }
      return y.value().item();
    };
    const ad::GradCheckReport r = ad::finite_diff_check(f, lp.probs, kEps, kLossTolerance);
    if (!r.passed || r.max_rel_error > result.worst.max_rel_error) {
      if (result.worst.passed || !r.passed) result.worst = r;
    }
  }
  return result;
}

SuiteResult check_micro_model(std::size_t points, std::uint64_t seed) {
  SuiteResult result{"vqamodel", kModelTolerance, points, {}};
  result.worst.passed = true;
  const model::ModelConfig mc = model::ModelConfig::micro();
  for (std::size_t p = 0; p < points; ++p) {
    std::mt19937_64 rng(seed + 1000 * p);
    model::VqaModel net(mc, seed + p);
    // Zero biases put masked (all-zero) inputs exactly on the relu kink.
    std::uniform_real_distribution<double> bias(-0.2, 0.2);
    for (ad::Parameter& prm : net.parameters()) {
      if (prm.name.ends_with(".bias")) {
        for (double& v : prm.value.values()) v = bias(rng);
      }
    }
    constexpr std::size_t kBatch = 3;
    std::vector<synth::Image> images(kBatch);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> tok(2, static_cast<int>(mc.token_vocab_size) - 1);
    std::uniform_int_distribution<int> ans(0, synth::kAnswerCount - 1);
    std::vector<model::Sample> batch(kBatch);
    std::vector<int> answers(kBatch);
    for (std::size_t i = 0; i < kBatch; ++i) {
      synth::Image& im = images[i];
      im.width = im.height = static_cast<int>(mc.image_size);
      im.channels = static_cast<int>(mc.channels);
      im.pixels.resize(mc.image_size * mc.image_size * mc.channels);
      for (double& px : im.pixels) px = u(rng);
      batch[i].image = &im;
      batch[i].region = i == 0 ? synth::Region::whole(im.width, im.height)
                               : synth::Region::circle({7.0 + static_cast<double>(i), 8.0}, 5.0);
      batch[i].tokens.assign(mc.max_question_length, synth::TokenVocab::kPad);
      const std::size_t len = 3 + i;
      for (std::size_t t = 0; t < len && t < mc.max_question_length; ++t) batch[i].tokens[t] = tok(rng);
      answers[i] = ans(rng);
    }
    std::vector<double> point;
    for (const ad::Parameter& prm : net.parameters()) {
      point.insert(point.end(), prm.value.values().begin(), prm.value.values().end());
    }
    const std::vector<double> unit(synth::kAnswerCount, 1.0);
    const ad::CheckedFunction f = [&](std::span<const double> x, std::vector<double>* grad) {
      std::size_t offset = 0;
      for (ad::Parameter& prm : net.parameters()) {
        std::copy(x.begin() + offset, x.begin() + offset + prm.value.size(), prm.value.data());
        offset += prm.value.size();
      }
      ad::Tape tape;
      const auto binding = net.bind(tape, true);
      std::mt19937_64 unused(0);
      const auto out = net.forward(binding, batch, ad::Mode::eval, unused);
      loss::LossOptions lo;
      lo.lambda = 0.0;
      const loss::TotalLoss t = loss::total_loss(out.probs, answers, {}, unit, lo);
      if (grad) {
        grad->clear();
        for (const Array& g : tape.gradient(t.total, binding.vars)) {
          grad->insert(grad->end(), g.values().begin(), g.values().end());
        }
      }
      return t.total.value().item();
    };
    const ad::GradCheckReport r = ad::finite_diff_check(f, point, kEps, kModelTolerance);
    if (!r.passed || r.max_rel_error > result.worst.max_rel_error) {
      if (result.worst.passed || !r.passed) result.worst = r;
    }
  }
  return result;
}

}  // namespace

std::vector<SuiteResult> run_gradcheck(const GradcheckOptions& options) {
  if (options.points == 0) throw UsageError("gradcheck needs at least one point");
  std::mt19937_64 rng(options.seed);
  std::vector<SuiteResult> results;
  for (const OpCase& oc : op_cases()) results.push_back(check_op(oc, options.points, rng));
  results.push_back(check_loss("cons_loss", 2, {{0, 1}}, true, options, rng));
  results.push_back(check_loss("total_loss", 4, {{0, 1}, {2, 1}}, false, options, rng));
  results.push_back(check_micro_model(3, options.seed));
  return results;
}

}  // namespace cvqa::harness

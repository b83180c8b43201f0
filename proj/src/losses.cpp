#include "cvqa/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cvqa/errors.hpp"

namespace cvqa::loss {

void LossTerms::validate() const {
  if (h_sub < 0.0 || h_main < 0.0) throw UsageError("entropies must be non-negative");
  if (!(gamma > 0.0)) throw UsageError("gamma must be positive");
  if (lambda < 0.0) throw UsageError("lambda must be non-negative");
}

double entropy(std::span<const double> p, int answer) {
  if (answer < 0 || static_cast<std::size_t>(answer) >= p.size()) {
    throw UsageError("answer index " + std::to_string(answer) + " outside distribution of size " +
                     std::to_string(p.size()));
  }
  return -std::log(std::max(p[static_cast<std::size_t>(answer)], kProbFloor));
}

double ce_loss(std::span<const double> p, int answer, double weight) {
  if (!(weight > 0.0)) throw UsageError("class weight must be positive");
  return weight * entropy(p, answer);
}

double cons_loss(double h_sub, double h_main, double gamma) {
  LossTerms{h_sub, h_main, gamma, 0.0}.validate();
  return h_sub * std::max(0.0, gamma - h_main);
}

namespace {

void check_pairs(std::span<const PairIndex> pairs, std::size_t batch) {
  for (const PairIndex& p : pairs) {
    if (p.sub_pos >= batch || p.main_pos >= batch) {
      throw UsageError("pair (" + std::to_string(p.sub_pos) + ", " + std::to_string(p.main_pos) +
                       ") references a position outside a batch of " + std::to_string(batch));
    }
  }
}

}  // namespace

TotalLoss total_loss(ad::Var probs, std::span<const int> answers, std::span<const PairIndex> pairs,
                     std::span<const double> class_weights, const LossOptions& options) {
  const ad::Shape& s = probs.shape();
  if (s.size() != 2 || s[0] != answers.size() || s[0] == 0) {
    throw ShapeError("total_loss: probabilities " + ad::to_string(s) + " vs " + std::to_string(answers.size()) +
                     " answers");
  }
  if (class_weights.size() != s[1]) throw ShapeError("total_loss: one class weight per answer is required");
  LossTerms{0.0, 0.0, options.gamma, options.lambda}.validate();
  check_pairs(pairs, s[0]);

  ad::Var h = ad::scale(ad::log(ad::pick(probs, answers), kProbFloor), -1.0);
  ad::Array w(ad::Shape{s[0]});
  for (std::size_t i = 0; i < s[0]; ++i) w[i] = class_weights[static_cast<std::size_t>(answers[i])];

  TotalLoss out;
  out.vqa = ad::mean(ad::mul_const(h, w));
  out.vqa_value = out.vqa.value().item();
  out.total = out.vqa;
  if (!pairs.empty()) {
    std::vector<std::size_t> sub, main;
    for (const PairIndex& p : pairs) {
      sub.push_back(p.sub_pos);
      main.push_back(p.main_pos);
    }
    ad::Var h_sub = ad::gather_rows(h, sub);
    ad::Var h_main = ad::gather_rows(h, main);
    if (options.stop_grad_main) h_main = ad::detach(h_main);
    ad::Var gate = ad::hinge(ad::shift(ad::scale(h_main, -1.0), options.gamma));
    if (options.flip_hinge_gradient) gate = ad::scale(ad::detach(gate), 2.0) - gate;
    out.cons = ad::mean(h_sub * gate);
    out.cons_value = out.cons.value().item();
    if (options.lambda != 0.0) out.total = out.vqa + ad::scale(out.cons, options.lambda);
  }
  out.total_value = out.total.value().item();
  return out;
}

double total_loss_value(std::span<const std::vector<double>> probs, std::span<const int> answers,
                        std::span<const PairIndex> pairs, std::span<const double> class_weights, double lambda,
                        double gamma) {
  if (probs.size() != answers.size() || probs.empty()) throw ShapeError("total_loss_value: size mismatch");
  check_pairs(pairs, probs.size());
  double ce = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    ce += ce_loss(probs[i], answers[i], class_weights[static_cast<std::size_t>(answers[i])]);
  }
  ce /= static_cast<double>(probs.size());
  if (pairs.empty() || lambda == 0.0) return ce;
  double cons = 0.0;
  for (const PairIndex& p : pairs) {
    cons += cons_loss(entropy(probs[p.sub_pos], answers[p.sub_pos]), entropy(probs[p.main_pos], answers[p.main_pos]),
                      gamma);
  }
  return ce + lambda * cons / static_cast<double>(pairs.size());
}

double squint_loss(std::span<const double> maps_sub, std::span<const double> maps_main) {
  if (maps_sub.size() != maps_main.size() || maps_sub.empty()) {
    throw ShapeError("squint_loss: maps of " + std::to_string(maps_sub.size()) + " and " +
                     std::to_string(maps_main.size()) + " entries");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < maps_sub.size(); ++i) {
    const double d = maps_sub[i] - maps_main[i];
    acc += d * d;
  }
  return acc / static_cast<double>(maps_sub.size());
}

ad::Var squint_loss(ad::Var maps, std::span<const PairIndex> pairs) {
  if (pairs.empty()) throw UsageError("squint_loss: no pairs");
  check_pairs(pairs, maps.shape().at(0));
  std::vector<std::size_t> sub, main;
  for (const PairIndex& p : pairs) {
    sub.push_back(p.sub_pos);
    main.push_back(p.main_pos);
  }
  ad::Var d = ad::gather_rows(maps, sub) - ad::gather_rows(maps, main);
  return ad::mean(d * d);
}

}  // namespace cvqa::loss

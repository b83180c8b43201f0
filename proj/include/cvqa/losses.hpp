#pragma once

// VQA cross-entropy, the entropy hinge consistency penalty, the combined
// pair-aware objective, and an attention-matching baseline penalty.
//
//   ce   = w_a * -log p_a
//   cons = H_sub * max(0, gamma - H_main)
//   total = mean_batch(ce) + lambda * mean_pairs(cons)
//
// Entropies in cons are unweighted. Probabilities are clamped below at
// kProbFloor before the log, here and in the metrics.

#include <span>
#include <vector>

#include "cvqa/diff.hpp"

namespace cvqa::loss {

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kDefaultLambda = 0.5;
inline constexpr double kDefaultGamma = 1.0;
inline constexpr double kDefaultSquintLambda = 0.5;

struct LossTerms {
  double h_sub = 0.0;   // H(i), sub-question
  double h_main = 0.0;  // H(j), main question
  double gamma = kDefaultGamma;
  double lambda = kDefaultLambda;

  // Throws UsageError on negative entropies, gamma <= 0 or lambda < 0.
  void validate() const;
};

// -log(max(p[answer], kProbFloor))
double entropy(std::span<const double> p, int answer);
double ce_loss(std::span<const double> p, int answer, double weight = 1.0);
double cons_loss(double h_sub, double h_main, double gamma);

// (sub, main) positions within a batch.
struct PairIndex {
  std::size_t sub_pos = 0;
  std::size_t main_pos = 0;
  bool operator==(const PairIndex&) const = default;
};

struct LossOptions {
  double lambda = kDefaultLambda;
  double gamma = kDefaultGamma;
  // Block the hinge's gradient into the main question's entropy.
  bool stop_grad_main = false;
  // Fault injection for gradient-check self tests: negates the hinge gradient.
  bool flip_hinge_gradient = false;
};

struct TotalLoss {
  ad::Var total;
  ad::Var vqa;
  ad::Var cons;  // invalid when there are no pairs
  double vqa_value = 0.0;
  double cons_value = 0.0;
  double total_value = 0.0;
};

// probs: (N, K) answer distributions. class_weights is indexed by answer.
// With lambda == 0 the consistency term is left out of the graph entirely,
// so the result is bit-identical to the plain weighted cross-entropy.
TotalLoss total_loss(ad::Var probs, std::span<const int> answers, std::span<const PairIndex> pairs,
                     std::span<const double> class_weights, const LossOptions& options);

// Plain-number evaluation of the same objective, for checks and logging.
double total_loss_value(std::span<const std::vector<double>> probs, std::span<const int> answers,
                        std::span<const PairIndex> pairs, std::span<const double> class_weights, double lambda,
                        double gamma);

// Mean squared difference between two flattened attention maps.
double squint_loss(std::span<const double> maps_sub, std::span<const double> maps_main);
// maps: (N, G, S); mean over pairs of the per-pair mean squared difference.
ad::Var squint_loss(ad::Var maps, std::span<const PairIndex> pairs);

}  // namespace cvqa::loss

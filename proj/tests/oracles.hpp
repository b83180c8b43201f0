#pragma once

// Brute-force reference implementations shared by the unit and acceptance
// tests. They deliberately use nested scans instead of indexes.

#include <algorithm>
#include <random>

#include "cvqa/metrics.hpp"

namespace cvqa::testing {

struct Fraction {
  std::size_t num = 0;
  std::size_t den = 0;
  bool operator==(const Fraction&) const = default;
};

inline bool is_sub(synth::QType q) {
  return q == synth::QType::sub_whole || q == synth::QType::sub_macula || q == synth::QType::sub_region;
}

inline Fraction brute_c1(const metrics::PredictionLog& log) {
  Fraction f;
  for (const auto& m : log) {
    if (m.qtype != synth::QType::main || m.predicted != m.answer) continue;
    for (const auto& s : log) {
      if (!is_sub(s.qtype) || s.related_main != m.qa_id) continue;
      ++f.den;
      if (s.predicted == s.answer) ++f.num;
    }
  }
  return f;
}

inline Fraction brute_c2(const metrics::PredictionLog& log) {
  Fraction f;
  for (const auto& m : log) {
    if (m.qtype != synth::QType::main) continue;
    bool all = true;
    for (const auto& s : log)
      if (is_sub(s.qtype) && s.related_main == m.qa_id && s.predicted != s.answer) all = false;
    if (!all) continue;
    ++f.den;
    if (m.predicted == m.answer) ++f.num;
  }
  return f;
}

// Scenes with one main, a few subs and some ind rows; correctness drawn at a
// per-log rate so that empty denominators also occur.
inline metrics::PredictionLog random_log(std::mt19937_64& rng) {
  using synth::QType;
  metrics::PredictionLog log;
  const int scenes = std::uniform_int_distribution<int>(0, 12)(rng);
  const double p_right = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  std::bernoulli_distribution right(p_right);
  int id = 0;
  const auto row = [&](int scene, QType q, std::optional<int> main) {
    metrics::PredictionRow r;
    r.qa_id = id++;
    r.scene_id = scene;
    r.qtype = q;
    r.related_main = main;
    const bool is_main = q == QType::main;
    r.answer = is_main ? synth::grade_answer(std::uniform_int_distribution<int>(0, 2)(rng))
                       : std::uniform_int_distribution<int>(0, 1)(rng);
    r.predicted = right(rng) ? r.answer : (is_main ? synth::kGrade0 + (r.answer - synth::kGrade0 + 1) % 3 : 1 - r.answer);
    r.probs.assign(synth::kAnswerCount, 0.0);
    r.probs[r.predicted] = 1.0;
    return r;
  };
  for (int s = 0; s < scenes; ++s) {
    const auto m = row(s, QType::main, std::nullopt);
    log.push_back(m);
    const int subs = std::uniform_int_distribution<int>(0, 4)(rng);
    const QType kinds[] = {QType::sub_whole, QType::sub_macula, QType::sub_region};
    for (int k = 0; k < subs; ++k) log.push_back(row(s, kinds[std::min(k, 2)], m.qa_id));
    const int inds = std::uniform_int_distribution<int>(0, 3)(rng);
    for (int k = 0; k < inds; ++k) log.push_back(row(s, QType::ind_region, std::nullopt));
  }
  std::shuffle(log.begin(), log.end(), rng);
  return log;
}

}  // namespace cvqa::testing

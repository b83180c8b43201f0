#include <doctest.h>

#include <random>

#include "cvqa/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cvqa;
using namespace cvqa::metrics;
using synth::QType;

namespace {

PredictionRow row(int id, int scene, QType q, bool correct, std::optional<int> main = std::nullopt) {
  PredictionRow r;
  r.qa_id = id;
  r.scene_id = scene;
  r.qtype = q;
  r.answer = q == QType::main ? synth::kGrade0 : synth::kYes;
  r.predicted = correct ? r.answer : (q == QType::main ? synth::kGrade0 + 1 : synth::kNo);
  r.probs.assign(5, 0.0);
  r.probs[r.predicted] = 1.0;
  r.related_main = main;
  return r;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("accuracy examples") {
    PredictionLog all{row(0, 0, QType::main, true), row(1, 0, QType::sub_whole, true, 0)};
    CHECK(accuracy(all, TypeFilter::overall).percent() == 100.0);
    PredictionLog grades{row(0, 0, QType::main, true), row(1, 1, QType::main, true), row(2, 2, QType::main, false),
                         row(3, 3, QType::main, true), row(4, 3, QType::ind_region, false)};
    CHECK(accuracy(grades, TypeFilter::grade).percent() == 75.0);
    CHECK_FALSE(accuracy(PredictionLog{}, TypeFilter::overall).percent().has_value());
    CHECK_FALSE(accuracy(grades, TypeFilter::macula).percent().has_value());
  }

  TEST_CASE("region accuracy pools sub and ind region questions") {
    PredictionLog log{row(0, 0, QType::main, true), row(1, 0, QType::sub_region, true, 0),
                      row(2, 0, QType::ind_region, false), row(3, 0, QType::ind_region, false)};
    const auto r = accuracy(log, TypeFilter::region);
    CHECK(r.numerator == 1);
    CHECK(r.denominator == 3);
    CHECK(accuracy(log, TypeFilter::sub_region).percent() == 100.0);
    CHECK(accuracy(log, TypeFilter::ind_region).percent() == 0.0);
  }

  TEST_CASE("C1 worked example") {
    PredictionLog log{row(0, 0, QType::main, true),        row(1, 0, QType::sub_whole, true, 0),
                      row(2, 0, QType::sub_macula, true, 0), row(3, 1, QType::main, true),
                      row(4, 1, QType::sub_whole, true, 3),  row(5, 1, QType::sub_macula, false, 3),
                      row(6, 2, QType::main, false),         row(7, 2, QType::sub_whole, false, 6)};
    CHECK(consistency_c1(log).percent() == 75.0);
    for (auto& r : log) r.predicted = r.answer;
    CHECK(consistency_c1(log).percent() == 100.0);
    PredictionLog wrong{row(0, 0, QType::main, false), row(1, 0, QType::sub_whole, true, 0)};
    CHECK_FALSE(consistency_c1(wrong).percent().has_value());
  }

  TEST_CASE("C2 worked example") {
    PredictionLog log{row(0, 0, QType::main, true),  row(1, 0, QType::sub_whole, true, 0),
                      row(2, 3, QType::main, false), row(3, 3, QType::sub_whole, true, 2),
                      row(4, 4, QType::main, true),  row(5, 4, QType::sub_whole, false, 4)};
    CHECK(consistency_c2(log).percent() == 50.0);
    for (auto& r : log) r.predicted = r.answer;
    CHECK(consistency_c2(log).percent() == 100.0);
    // A main without subs is vacuously consistent.
    PredictionLog lone{row(0, 0, QType::main, false)};
    CHECK(consistency_c2(lone).denominator == 1);
    CHECK(consistency_c2(lone).percent() == 0.0);
    CHECK_FALSE(consistency_c2(PredictionLog{}).percent().has_value());
  }

  TEST_CASE("C1 and C2 match brute force on random logs") {
    std::mt19937_64 rng(99);
    std::size_t mismatches = 0;
    for (int i = 0; i < 1000; ++i) {
      const PredictionLog log = testing::random_log(rng);
      const Ratio c1 = consistency_c1(log), c2 = consistency_c2(log);
      if (testing::Fraction{c1.numerator, c1.denominator} != testing::brute_c1(log)) ++mismatches;
      if (testing::Fraction{c2.numerator, c2.denominator} != testing::brute_c2(log)) ++mismatches;
    }
    CHECK(mismatches == 0);
  }

  TEST_CASE("argmax breaks ties toward the lowest index") {
    CHECK(argmax_answer(std::vector<double>{0.2, 0.4, 0.4}) == 1);
    CHECK(argmax_answer(std::vector<double>(5, 0.2)) == 0);
  }

  TEST_CASE("undefined scores serialize as null and survive a round trip") {
    PredictionLog log{row(0, 0, QType::main, false), row(1, 0, QType::sub_whole, true, 0)};
    const MetricsReport m = compute_report(log);
    const auto j = m.to_json();
    CHECK(j.at("c1").is_null());
    CHECK(j.at("accuracy_macula").is_null());
    CHECK(j.at("accuracy_overall").get<double>() == 50.0);
    const MetricsReport back = MetricsReport::from_json(j);
    CHECK(back.to_json() == j);
  }

  TEST_CASE("inconsistency listing") {
    PredictionLog log{row(0, 0, QType::main, true),       row(1, 0, QType::sub_whole, false, 0),
                      row(2, 0, QType::sub_macula, true, 0), row(3, 1, QType::main, true),
                      row(4, 1, QType::sub_whole, true, 3),  row(5, 2, QType::main, false),
                      row(6, 2, QType::sub_whole, false, 5)};
    const auto found = find_inconsistencies(log);
    REQUIRE(found.size() == 1);
    CHECK(found[0].scene_id == 0);
    REQUIRE(found[0].wrong_subs.size() == 1);
    CHECK(found[0].wrong_subs[0].qa_id == 1);
  }

  TEST_CASE("prediction logs round-trip through jsonl") {
    testing::TempDir dir("metrics_io");
    std::mt19937_64 rng(5);
    PredictionLog log = testing::random_log(rng);
    while (log.empty()) log = testing::random_log(rng);
    log[0].probs = {0.1, 0.2, 0.3, 0.15, 0.25};
    write_log(dir.path() / "p.jsonl", log);
    const PredictionLog back = read_log(dir.path() / "p.jsonl");
    REQUIRE(back.size() == log.size());
    for (std::size_t i = 0; i < log.size(); ++i) {
      CHECK(back[i].qa_id == log[i].qa_id);
      CHECK(back[i].qtype == log[i].qtype);
      CHECK(back[i].predicted == log[i].predicted);
      CHECK(back[i].related_main == log[i].related_main);
      CHECK(back[i].probs == log[i].probs);
    }
  }
}

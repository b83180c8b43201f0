#pragma once

// Accuracy per question type and the two consistency scores:
//   C1 = related sub-questions answered correctly / related sub-questions
//        whose main question was answered correctly
//   C2 = main questions answered correctly / main questions whose related
//        sub-questions were all answered correctly (vacuously true when a
//        main has none)
// Empty denominators yield an undefined score, serialized as null.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvqa/synthdata.hpp"

namespace cvqa::metrics {

struct PredictionRow {
  int qa_id = 0;
  int scene_id = 0;
  synth::QType qtype = synth::QType::main;
  int answer = 0;
  int predicted = 0;
  std::vector<double> probs;
  std::optional<int> related_main;

  bool correct() const { return predicted == answer; }
};

using PredictionLog = std::vector<PredictionRow>;

// Index of the largest probability; ties go to the lowest index.
int argmax_answer(std::span<const double> probs);

struct Ratio {
  std::size_t numerator = 0;
  std::size_t denominator = 0;
  std::optional<double> percent() const;
};

// `region` pools sub_region and ind_region; the last two report them apart.
enum class TypeFilter { overall, grade, whole, macula, region, sub_region, ind_region };

Ratio accuracy(const PredictionLog& log, TypeFilter filter);
Ratio consistency_c1(const PredictionLog& log);
Ratio consistency_c2(const PredictionLog& log);

struct MetricsReport {
  Ratio overall, grade, whole, macula, region, sub_region, ind_region;
  Ratio c1, c2;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

MetricsReport compute_report(const PredictionLog& log);

// A scene whose main question is right while some related sub is wrong.
struct Inconsistency {
  int scene_id = 0;
  PredictionRow main;
  std::vector<PredictionRow> wrong_subs;
};

std::vector<Inconsistency> find_inconsistencies(const PredictionLog& log);

nlohmann::json to_json(const PredictionRow& row);
PredictionRow row_from_json(const nlohmann::json& j);
void write_log(const std::filesystem::path& path, const PredictionLog& log);
PredictionLog read_log(const std::filesystem::path& path);

}  // namespace cvqa::metrics

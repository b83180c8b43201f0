#include "cvqa/metrics.hpp"

#include <fstream>
#include <map>

#include "cvqa/errors.hpp"

namespace cvqa::metrics {

using synth::QType;
using nlohmann::json;

int argmax_answer(std::span<const double> probs) {
  if (probs.empty()) throw UsageError("argmax of an empty distribution");
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i)
    if (probs[i] > probs[best]) best = i;
  return static_cast<int>(best);
}

std::optional<double> Ratio::percent() const {
  if (denominator == 0) return std::nullopt;
  return 100.0 * static_cast<double>(numerator) / static_cast<double>(denominator);
}

namespace {

bool matches(QType q, TypeFilter f) {
  switch (f) {
    case TypeFilter::overall: return true;
    case TypeFilter::grade: return q == QType::main;
    case TypeFilter::whole: return q == QType::sub_whole;
    case TypeFilter::macula: return q == QType::sub_macula;
    case TypeFilter::region: return q == QType::sub_region || q == QType::ind_region;
    case TypeFilter::sub_region: return q == QType::sub_region;
    case TypeFilter::ind_region: return q == QType::ind_region;
  }
  return false;
}

// main qa_id -> row, for mains present in the log
std::map<int, const PredictionRow*> mains_by_id(const PredictionLog& log) {
  std::map<int, const PredictionRow*> mains;
  for (const auto& r : log)
    if (r.qtype == QType::main) mains.emplace(r.qa_id, &r);
  return mains;
}

json ratio_value(const Ratio& r) {
  const auto p = r.percent();
  return p ? json(*p) : json(nullptr);
}

Ratio ratio_from(const json& j, const std::string& key) {
  Ratio r;
  r.denominator = j.at(key + "_den").get<std::size_t>();
  r.numerator = j.at(key + "_num").get<std::size_t>();
  return r;
}

}  // namespace

Ratio accuracy(const PredictionLog& log, TypeFilter filter) {
  Ratio r;
  for (const auto& row : log) {
    if (!matches(row.qtype, filter)) continue;
    ++r.denominator;
    if (row.correct()) ++r.numerator;
  }
  return r;
}

Ratio consistency_c1(const PredictionLog& log) {
  const auto mains = mains_by_id(log);
  Ratio r;
  for (const auto& row : log) {
    if (!row.related_main) continue;
    const auto m = mains.find(*row.related_main);
    if (m == mains.end() || !m->second->correct()) continue;
    ++r.denominator;
    if (row.correct()) ++r.numerator;
  }
  return r;
}

Ratio consistency_c2(const PredictionLog& log) {
  std::map<int, bool> all_subs_correct;
  for (const auto& row : log)
    if (row.qtype == QType::main) all_subs_correct.emplace(row.qa_id, true);
  for (const auto& row : log) {
    if (!row.related_main) continue;
    const auto it = all_subs_correct.find(*row.related_main);
    if (it != all_subs_correct.end() && !row.correct()) it->second = false;
  }
  Ratio r;
  for (const auto& row : log) {
    if (row.qtype != QType::main || !all_subs_correct.at(row.qa_id)) continue;
    ++r.denominator;
    if (row.correct()) ++r.numerator;
  }
  return r;
}

MetricsReport compute_report(const PredictionLog& log) {
  MetricsReport m;
  m.overall = accuracy(log, TypeFilter::overall);
  m.grade = accuracy(log, TypeFilter::grade);
  m.whole = accuracy(log, TypeFilter::whole);
  m.macula = accuracy(log, TypeFilter::macula);
  m.region = accuracy(log, TypeFilter::region);
  m.sub_region = accuracy(log, TypeFilter::sub_region);
  m.ind_region = accuracy(log, TypeFilter::ind_region);
  m.c1 = consistency_c1(log);
  m.c2 = consistency_c2(log);
  return m;
}

json MetricsReport::to_json() const {
  json j = json::object();
  const std::pair<const char*, const Ratio*> fields[] = {
      {"accuracy_overall", &overall}, {"accuracy_grade", &grade},           {"accuracy_whole", &whole},
      {"accuracy_macula", &macula},   {"accuracy_region", &region},         {"accuracy_sub_region", &sub_region},
      {"accuracy_ind_region", &ind_region}, {"c1", &c1}, {"c2", &c2}};
  for (const auto& [name, ratio] : fields) {
    j[name] = ratio_value(*ratio);
    j[std::string(name) + "_num"] = ratio->numerator;
    j[std::string(name) + "_den"] = ratio->denominator;
  }
  return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport m;
  try {
    m.overall = ratio_from(j, "accuracy_overall");
    m.grade = ratio_from(j, "accuracy_grade");
    m.whole = ratio_from(j, "accuracy_whole");
    m.macula = ratio_from(j, "accuracy_macula");
    m.region = ratio_from(j, "accuracy_region");
    m.sub_region = ratio_from(j, "accuracy_sub_region");
    m.ind_region = ratio_from(j, "accuracy_ind_region");
    m.c1 = ratio_from(j, "c1");
    m.c2 = ratio_from(j, "c2");
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("metrics document: ") + e.what());
  }
  return m;
}

std::vector<Inconsistency> find_inconsistencies(const PredictionLog& log) {
  std::map<int, Inconsistency> by_main;
  for (const auto& row : log)
    if (row.qtype == QType::main && row.correct()) by_main[row.qa_id] = Inconsistency{row.scene_id, row, {}};
  for (const auto& row : log) {
    if (!row.related_main || row.correct()) continue;
    if (auto it = by_main.find(*row.related_main); it != by_main.end()) it->second.wrong_subs.push_back(row);
  }
  std::vector<Inconsistency> out;
  for (auto& [id, inc] : by_main)
    if (!inc.wrong_subs.empty()) out.push_back(std::move(inc));
  return out;
}

json to_json(const PredictionRow& row) {
  return {{"qa_id", row.qa_id},
          {"scene_id", row.scene_id},
          {"qtype", synth::to_string(row.qtype)},
          {"answer", row.answer},
          {"predicted", row.predicted},
          {"probs", row.probs},
          {"related_main", row.related_main ? json(*row.related_main) : json(nullptr)}};
}

PredictionRow row_from_json(const json& j) {
  PredictionRow r;
  r.qa_id = j.at("qa_id").get<int>();
  r.scene_id = j.at("scene_id").get<int>();
  r.qtype = synth::parse_qtype(j.at("qtype").get<std::string>());
  r.answer = j.at("answer").get<int>();
  r.predicted = j.at("predicted").get<int>();
  r.probs = j.at("probs").get<std::vector<double>>();
  if (!j.at("related_main").is_null()) r.related_main = j.at("related_main").get<int>();
  return r;
}

void write_log(const std::filesystem::path& path, const PredictionLog& log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IntegrityError("cannot write " + path.string());
  for (const auto& row : log) os << to_json(row).dump() << '\n';
}

PredictionLog read_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IntegrityError("cannot read " + path.string());
  PredictionLog log;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      log.push_back(row_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw IntegrityError(path.string() + ": " + e.what());
    }
  }
  return log;
}

}  // namespace cvqa::metrics

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "cvqa/harness.hpp"

namespace cvqa::harness {

namespace {

std::optional<double> column_value(const metrics::MetricsReport& m, std::size_t column) {
  switch (column) {
    case 0: return m.overall.percent();
    case 1: return m.grade.percent();
    case 2: return m.whole.percent();
    case 3: return m.macula.percent();
    case 4: return m.region.percent();
    case 5: return m.c1.percent();
    case 6: return m.c2.percent();
  }
  return std::nullopt;
}

ColumnStats stats_of(const std::vector<double>& xs) {
  ColumnStats s;
  s.count = xs.size();
  if (xs.empty()) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

std::string num(double v, int decimals) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string cell(const ColumnStats& s) {
  if (s.count == 0) return "n/a";
  return num(s.mean, 2) + " ± " + num(s.stddev, 2);
}

std::string short_num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

std::string pad(const std::string& s, std::size_t width) {
  // The ± sign is two bytes but one column.
  std::size_t shown = s.size();
  for (std::size_t i = 0; i + 1 < s.size(); ++i) {
    if (static_cast<unsigned char>(s[i]) == 0xC2 && static_cast<unsigned char>(s[i + 1]) == 0xB1) --shown;
  }
  return shown >= width ? s : s + std::string(width - shown, ' ');
}

std::string answer_name(int a) {
  static const synth::AnswerVocab vocab;
  if (a >= 0 && a < synth::kAnswerCount) return vocab.answers[static_cast<std::size_t>(a)];
  return std::to_string(a);
}

}  // namespace

std::string_view column_name(std::size_t column) {
  static constexpr std::string_view names[kColumnCount] = {"overall", "grade", "whole", "macula",
                                                            "region", "C1", "C2"};
  return column < kColumnCount ? names[column] : "?";
}

std::vector<TableRow> summarize(const std::vector<RunSummary>& runs, bool sweep) {
  // Key: method order, lambda, gamma, squint lambda.
  using Key = std::tuple<int, double, double, double>;
  std::map<Key, std::vector<const RunSummary*>> groups;
  for (const RunSummary& r : runs) {
    int order = static_cast<int>(r.method);
    double gamma = r.method == Method::consistency ? r.gamma : 0.0;
    // In sweep mode baseline is the lambda = 0 row of the consistency grid.
    if (sweep && r.method != Method::squint) order = 0;
    groups[{order, r.lambda, gamma, r.squint_lambda}].push_back(&r);
  }

  std::vector<TableRow> rows;
  for (const auto& [key, members] : groups) {
    TableRow row;
    row.method = members.front()->method;
    row.lambda = std::get<1>(key);
    row.gamma = std::get<2>(key);
    row.runs = members.size();
    switch (row.method) {
      case Method::baseline: row.label = "baseline"; break;
      case Method::consistency:
        row.label = "consistency lambda=" + short_num(row.lambda) + " gamma=" + short_num(row.gamma);
        break;
      case Method::squint: row.label = "squint lambda_sq=" + short_num(std::get<3>(key)); break;
    }
    if (sweep && row.method != Method::squint) {
      row.label = row.lambda == 0.0 ? "lambda=0" : "lambda=" + short_num(row.lambda) + " gamma=" + short_num(row.gamma);
    }
    for (std::size_t c = 0; c < kColumnCount; ++c) {
      std::vector<double> xs;
      for (const RunSummary* m : members) {
        if (auto v = column_value(m->metrics, c)) xs.push_back(*v);
      }
      row.columns.push_back(stats_of(xs));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_table(const std::vector<TableRow>& rows, bool sweep) {
  std::size_t label_width = 6;
  for (const TableRow& r : rows) label_width = std::max(label_width, r.label.size());
  label_width += 2;
  constexpr std::size_t kCell = 16;

  std::ostringstream os;
  os << pad("method", label_width) << pad("runs", 6);
  for (std::size_t c = 0; c < kColumnCount; ++c) os << pad(std::string(column_name(c)), kCell);
  os << '\n';
  for (const TableRow& r : rows) {
    os << pad(r.label, label_width) << pad(std::to_string(r.runs), 6);
    for (const ColumnStats& s : r.columns) os << pad(cell(s), kCell);
    os << '\n';
  }
  if (!sweep) return os.str();

  // lambda x gamma grid; the lambda = 0 row is gamma independent.
  std::set<double> lambdas, gammas;
  std::map<std::pair<double, double>, const TableRow*> at;
  for (const TableRow& r : rows) {
    if (r.method == Method::squint) continue;
    lambdas.insert(r.lambda);
    if (r.lambda != 0.0) gammas.insert(r.gamma);
    at[{r.lambda, r.lambda == 0.0 ? 0.0 : r.gamma}] = &r;
  }
  if (gammas.empty()) gammas.insert(1.0);
  constexpr std::size_t kGridCell = 20;
  os << "\nC1 / overall accuracy by lambda (rows) and gamma (columns)\n" << pad("lambda", 10);
  for (double g : gammas) os << pad("gamma=" + short_num(g), kGridCell);
  os << '\n';
  for (double l : lambdas) {
    os << pad(short_num(l), 10);
    for (double g : gammas) {
      const auto it = at.find({l, l == 0.0 ? 0.0 : g});
      if (it == at.end()) {
        os << pad("-", kGridCell);
        continue;
      }
      const ColumnStats& c1 = it->second->columns[5];
      const ColumnStats& acc = it->second->columns[0];
      os << pad((c1.count ? num(c1.mean, 2) : std::string("n/a")) + " / " + (acc.count ? num(acc.mean, 2) : "n/a"),
                kGridCell);
    }
    os << '\n';
  }
  return os.str();
}

std::string format_inconsistencies(const RunSummary& run, std::size_t max_scenes) {
  const std::filesystem::path path = run.dir / kPredictionsFile;
  std::ostringstream os;
  if (!std::filesystem::exists(path)) {
    os << run.dir.string() << ": no predictions\n";
    return os.str();
  }
  const auto found = metrics::find_inconsistencies(metrics::read_log(path));
  os << run.dir.string() << ": " << found.size() << " scene(s) with a correct main answer and a wrong sub-answer\n";
  for (std::size_t i = 0; i < found.size() && i < max_scenes; ++i) {
    const metrics::Inconsistency& inc = found[i];
    os << "  scene " << inc.scene_id << ": main qa " << inc.main.qa_id << " answered " << answer_name(inc.main.predicted)
       << '\n';
    for (const metrics::PredictionRow& s : inc.wrong_subs) {
      os << "    qa " << s.qa_id << " (" << synth::to_string(s.qtype) << ") expected " << answer_name(s.answer)
         << ", predicted " << answer_name(s.predicted) << '\n';
    }
  }
  if (found.size() > max_scenes) os << "  ... " << (found.size() - max_scenes) << " more\n";
  return os.str();
}

}  // namespace cvqa::harness

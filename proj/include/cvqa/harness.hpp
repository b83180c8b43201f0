#pragma once

// Training loop with early stopping, evaluation, run reports and the
// gradient-check suites behind the CLI.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cvqa/dataset.hpp"
#include "cvqa/diff.hpp"
#include "cvqa/metrics.hpp"
#include "cvqa/model.hpp"

namespace cvqa::harness {

enum class Method { baseline, consistency, squint };

std::string_view to_string(Method m);
Method parse_method(std::string_view s);

struct RunConfig {
  std::filesystem::path data_dir;
  std::filesystem::path output_dir;
  Method method = Method::consistency;
  double lambda = 0.5;
  double gamma = 1.0;
  double squint_lambda = 0.5;
  bool stop_grad_main = false;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 64;
  std::optional<std::size_t> pair_quota;  // default batch_size / 4
  std::size_t max_epochs = 100;
  std::size_t patience = 20;
  std::uint64_t seed = 0;

  // lambda as it enters the objective: 0 unless method is consistency.
  double effective_lambda() const { return method == Method::consistency ? lambda : 0.0; }
  std::size_t effective_pair_quota() const { return pair_quota.value_or(batch_size / 4); }

  // Throws ConfigError.
  void validate() const;

  // key=value text; paths included.
  std::string to_text() const;
  // Applies the keys present in `text` on top of `base`.
  static RunConfig from_text(std::string_view text, RunConfig base);
  static RunConfig from_text(std::string_view text);
};

class Adam {
 public:
  Adam(const std::vector<ad::Parameter>& params, double lr, double beta1, double beta2, double eps);
  void step(std::vector<ad::Parameter>& params, const std::vector<ad::Array>& grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<ad::Array> m_, v_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t batches = 0;
  double vqa_loss = 0.0;
  double cons_loss = 0.0;    // unweighted consistency term
  double squint_loss = 0.0;  // unweighted attention-matching term
  double total_loss = 0.0;
  double val_accuracy = 0.0;
  std::optional<double> val_c1;

  nlohmann::json to_json() const;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_accuracy = -1.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  RunHistory history;
  metrics::MetricsReport test_metrics;
};

// File names inside a run directory.
inline constexpr const char* kConfigFile = "config.txt";
inline constexpr const char* kModelConfigFile = "model_config.txt";
inline constexpr const char* kCheckpointFile = "model.ckpt";
inline constexpr const char* kHistoryFile = "history.jsonl";
inline constexpr const char* kSummaryFile = "run_summary.json";
inline constexpr const char* kMetricsFile = "metrics.json";
inline constexpr const char* kPredictionsFile = "predictions.jsonl";

// Trains, keeps the best checkpoint by validation accuracy, then evaluates it
// on the test split. Throws IntegrityError / NumericalError.
TrainResult train(const RunConfig& config, std::ostream* progress = nullptr);

// Eval-mode predictions for every record of a split.
metrics::PredictionLog predict(const model::VqaModel& model, const synth::Split& split,
                               const synth::TokenVocab& tokens, std::size_t batch_size = 64);

struct EvalResult {
  metrics::PredictionLog log;
  metrics::MetricsReport report;
};

// Throws IntegrityError when the checkpoint does not match the dataset
// vocabulary or its own config hash.
EvalResult evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                    const std::string& split);
void write_eval(const EvalResult& result, const std::filesystem::path& out_dir);

// Model from a checkpoint file, verified against its manifest.
model::VqaModel load_model(const std::filesystem::path& checkpoint);

// ---------------------------------------------------------------------------

struct RunSummary {
  std::filesystem::path dir;
  Method method = Method::baseline;
  double lambda = 0.0;  // effective
  double gamma = 1.0;
  double squint_lambda = 0.0;
  std::uint64_t seed = 0;
  metrics::MetricsReport metrics;
};

// Runs without a metrics file are skipped with a warning on `warn`.
std::vector<RunSummary> load_runs(const std::vector<std::filesystem::path>& dirs, std::ostream& warn);

struct ColumnStats {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t count = 0;  // runs where the metric was defined
};

struct TableRow {
  std::string label;
  Method method = Method::baseline;
  double lambda = 0.0;
  double gamma = 1.0;
  std::size_t runs = 0;
  std::vector<ColumnStats> columns;  // overall, grade, whole, macula, region, C1, C2
};

// Rows grouped by method (and its lambda/gamma); sweep mode groups by
// (lambda, gamma) with baseline as lambda = 0.
std::vector<TableRow> summarize(const std::vector<RunSummary>& runs, bool sweep);
inline constexpr std::size_t kColumnCount = 7;
std::string_view column_name(std::size_t column);
// Plain table; sweep mode adds a lambda x gamma grid of C1 and overall accuracy.
std::string format_table(const std::vector<TableRow>& rows, bool sweep);
std::string format_inconsistencies(const RunSummary& run, std::size_t max_scenes);

// ---------------------------------------------------------------------------

struct GradcheckOptions {
  std::size_t points = 100;
  std::uint64_t seed = 7;
  bool flip_hinge_gradient = false;
};

struct SuiteResult {
  std::string name;
  double tolerance = 0.0;
  std::size_t points = 0;
  ad::GradCheckReport worst;
  bool passed() const { return worst.passed; }
};

// diffcore op suite, cons_loss, total_loss and the micro-model end-to-end
// check.
std::vector<SuiteResult> run_gradcheck(const GradcheckOptions& options);

}  // namespace cvqa::harness

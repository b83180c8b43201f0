#include "cvqa/harness.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "cvqa/batching.hpp"
#include "cvqa/checkpoint.hpp"
#include "cvqa/errors.hpp"
#include "cvqa/losses.hpp"

namespace cvqa::harness {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Method m) {
  switch (m) {
    case Method::baseline: return "baseline";
    case Method::consistency: return "consistency";
    case Method::squint: return "squint";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  if (s == "baseline") return Method::baseline;
  if (s == "consistency") return Method::consistency;
  if (s == "squint") return Method::squint;
  throw ConfigError("unknown method '" + std::string(s) + "' (baseline, consistency, squint)");
}

void RunConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be a finite value >= 0");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be a finite value > 0");
  if (!(squint_lambda >= 0.0) || !std::isfinite(squint_lambda)) throw ConfigError("squint_lambda must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (2 * effective_pair_quota() > batch_size) {
    throw ConfigError("pair_quota " + std::to_string(effective_pair_quota()) + " needs " +
                      std::to_string(2 * effective_pair_quota()) + " slots, batch_size is " +
                      std::to_string(batch_size));
  }
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (patience == 0) throw ConfigError("patience must be positive");
  if (patience > max_epochs) throw ConfigError("patience exceeds max_epochs");
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "' has an invalid value: '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "' expects true/false, got '" + s + "'");
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IntegrityError("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "data_dir=" << data_dir.string() << '\n'
     << "output_dir=" << output_dir.string() << '\n'
     << "method=" << to_string(method) << '\n'
     << "lambda=" << fmt_double(lambda) << '\n'
     << "gamma=" << fmt_double(gamma) << '\n'
     << "squint_lambda=" << fmt_double(squint_lambda) << '\n'
     << "stop_grad_main=" << (stop_grad_main ? "true" : "false") << '\n'
     << "learning_rate=" << fmt_double(learning_rate) << '\n'
     << "beta1=" << fmt_double(beta1) << '\n'
     << "beta2=" << fmt_double(beta2) << '\n'
     << "adam_eps=" << fmt_double(adam_eps) << '\n'
     << "batch_size=" << batch_size << '\n'
     << "pair_quota=" << effective_pair_quota() << '\n'
     << "max_epochs=" << max_epochs << '\n'
     << "patience=" << patience << '\n'
     << "seed=" << seed << '\n';
  return os.str();
}

RunConfig RunConfig::from_text(std::string_view text, RunConfig base) {
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line without '=': " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "data_dir") base.data_dir = value;
    else if (key == "output_dir") base.output_dir = value;
    else if (key == "method") base.method = parse_method(value);
    else if (key == "lambda") base.lambda = parse_number<double>(key, value);
    else if (key == "gamma") base.gamma = parse_number<double>(key, value);
    else if (key == "squint_lambda") base.squint_lambda = parse_number<double>(key, value);
    else if (key == "stop_grad_main") base.stop_grad_main = parse_bool(key, value);
    else if (key == "learning_rate") base.learning_rate = parse_number<double>(key, value);
    else if (key == "beta1") base.beta1 = parse_number<double>(key, value);
    else if (key == "beta2") base.beta2 = parse_number<double>(key, value);
    else if (key == "adam_eps") base.adam_eps = parse_number<double>(key, value);
    else if (key == "batch_size") base.batch_size = parse_number<std::size_t>(key, value);
    else if (key == "pair_quota") base.pair_quota = parse_number<std::size_t>(key, value);
    else if (key == "max_epochs") base.max_epochs = parse_number<std::size_t>(key, value);
    else if (key == "patience") base.patience = parse_number<std::size_t>(key, value);
    else if (key == "seed") base.seed = parse_number<std::uint64_t>(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return base;
}

RunConfig RunConfig::from_text(std::string_view text) { return from_text(text, RunConfig{}); }

// ---------------------------------------------------------------------------

Adam::Adam(const std::vector<ad::Parameter>& params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const ad::Parameter& p : params) {
    m_.emplace_back(p.value.shape());
    v_.emplace_back(p.value.shape());
  }
}

void Adam::step(std::vector<ad::Parameter>& params, const std::vector<ad::Array>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw UsageError("Adam::step: parameter count changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].requires_grad) continue;
    double* w = params[k].value.data();
    const double* g = grads[k].data();
    double* m = m_[k].data();
    double* v = v_[k].data();
    for (std::size_t i = 0, n = params[k].value.size(); i < n; ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

json EpochRecord::to_json() const {
  json j;
  j["epoch"] = epoch;
  j["batches"] = batches;
  j["vqa"] = vqa_loss;
  j["cons"] = cons_loss;
  j["squint"] = squint_loss;
  j["total"] = total_loss;
  j["val_accuracy"] = val_accuracy;
  j["val_c1"] = val_c1 ? json(*val_c1) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<model::Sample> make_samples(const synth::Split& split, std::span<const std::size_t> positions,
                                        const std::vector<std::vector<int>>& encoded) {
  std::vector<model::Sample> samples;
  samples.reserve(positions.size());
  for (std::size_t pos : positions) {
    const synth::QARecord& r = split.records[pos];
    const auto it = split.images.find(r.scene_id);
    if (it == split.images.end()) throw IntegrityError("no image for scene " + std::to_string(r.scene_id));
    samples.push_back({&it->second, r.region, encoded[pos]});
  }
  return samples;
}

std::vector<std::vector<int>> encode_all(const synth::Split& split, const synth::TokenVocab& tokens,
                                         std::size_t max_len) {
  std::vector<std::vector<int>> out;
  out.reserve(split.records.size());
  for (const synth::QARecord& r : split.records) out.push_back(tokens.encode(r.question_tokens, max_len));
  return out;
}

bool all_finite(const std::vector<ad::Array>& grads) {
  for (const ad::Array& g : grads) {
    for (double v : g.values()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

json checkpoint_meta(const model::ModelConfig& mc, const RunConfig& rc, const synth::AnswerVocab& answers,
                     std::size_t best_epoch) {
  json meta;
  meta["model_config"] = mc.to_text();
  meta["config_hash"] = mc.hash();
  meta["method"] = std::string(to_string(rc.method));
  meta["class_weights"] = answers.class_weights;
  meta["best_epoch"] = best_epoch;
  return meta;
}

}  // namespace

metrics::PredictionLog predict(const model::VqaModel& model, const synth::Split& split,
                               const synth::TokenVocab& tokens, std::size_t batch_size) {
  if (batch_size == 0) throw UsageError("predict: batch_size must be positive");
  const auto encoded = encode_all(split, tokens, model.config().max_question_length);
  metrics::PredictionLog log;
  log.reserve(split.records.size());
  std::mt19937_64 unused_rng(0);
  std::vector<std::size_t> positions;
  for (std::size_t start = 0; start < split.records.size(); start += batch_size) {
    const std::size_t end = std::min(split.records.size(), start + batch_size);
    positions.clear();
    for (std::size_t i = start; i < end; ++i) positions.push_back(i);
    const auto samples = make_samples(split, positions, encoded);
    ad::Tape tape;
    const auto binding = model.bind(tape, false);
    const auto out = model.forward(binding, samples, ad::Mode::eval, unused_rng);
    const ad::Array& probs = out.probs.value();
    const std::size_t k = probs.dim(1);
    for (std::size_t i = start; i < end; ++i) {
      const synth::QARecord& r = split.records[i];
      metrics::PredictionRow row;
      row.qa_id = r.qa_id;
      row.scene_id = r.scene_id;
      row.qtype = r.qtype;
      row.answer = r.answer;
      row.related_main = r.related_main;
      const double* p = probs.data() + (i - start) * k;
      row.probs.assign(p, p + k);
      row.predicted = metrics::argmax_answer(row.probs);
      log.push_back(std::move(row));
    }
  }
  return log;
}

namespace {

// Activations of a 64-image batch run to tens of megabytes; glibc would map
// and unmap each one, paying page faults on every training step.
void keep_large_allocations() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace

TrainResult train(const RunConfig& config, std::ostream* progress) {
  config.validate();
  keep_large_allocations();
  const auto started = std::chrono::steady_clock::now();

  const synth::Vocabulary vocab = synth::load_vocab(config.data_dir);
  synth::Split train_split = synth::load_split(config.data_dir, "train");
  synth::Split val_split = synth::load_split(config.data_dir, "val");
  synth::verify_split(train_split);
  synth::verify_split(val_split);
  if (train_split.records.empty()) throw IntegrityError("training split is empty");

  // Class weights come from the training split only and are frozen here.
  const synth::AnswerVocab answers = synth::AnswerVocab::from_training(train_split.records);

  model::ModelConfig mc;
  const synth::Image& first = train_split.images.begin()->second;
  mc.image_size = static_cast<std::size_t>(first.width);
  mc.channels = static_cast<std::size_t>(first.channels);
  mc.token_vocab_size = vocab.tokens.size();
  mc.max_question_length = vocab.max_question_length;
  mc.vocab_digest = synth::vocab_digest(vocab);
  model::VqaModel net(mc, config.seed);

  const auto encoded = encode_all(train_split, vocab.tokens, mc.max_question_length);
  const batching::RelationIndex relations = batching::build_relations(train_split.records);
  batching::PairedBatchSampler sampler(train_split.records, relations, config.batch_size,
                                       config.effective_pair_quota(), config.seed ^ 0x5a17ab1e5eedULL);
  std::mt19937_64 dropout_rng(config.seed * 0x9e3779b97f4a7c15ULL + 1);
  Adam adam(net.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps);

  loss::LossOptions opts;
  opts.lambda = config.effective_lambda();
  opts.gamma = config.gamma;
  opts.stop_grad_main = config.stop_grad_main;
  const bool use_squint = config.method == Method::squint && config.squint_lambda > 0.0;

  fs::create_directories(config.output_dir);
  write_text(config.output_dir / kConfigFile, config.to_text());
  write_text(config.output_dir / kModelConfigFile, mc.to_text());
  std::ofstream history_out(config.output_dir / kHistoryFile, std::ios::binary);
  if (!history_out) throw IntegrityError("cannot write history in " + config.output_dir.string());

  TrainResult result;
  RunHistory& history = result.history;
  std::vector<ad::Parameter> best_params = net.parameters();

  std::vector<int> batch_answers;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    do {
      const batching::Batch batch = sampler.next();
      const auto samples = make_samples(train_split, batch.sample_ids, encoded);
      batch_answers.clear();
      for (std::size_t pos : batch.sample_ids) batch_answers.push_back(train_split.records[pos].answer);

      ad::Tape tape;
      const auto binding = net.bind(tape, true);
      const auto out = net.forward(binding, samples, ad::Mode::train, dropout_rng);
      const loss::TotalLoss terms =
          loss::total_loss(out.probs, batch_answers, batch.pair_positions, answers.class_weights, opts);
      ad::Var objective = terms.total;
      double squint_value = 0.0;
      if (use_squint && !batch.pair_positions.empty()) {
        const ad::Var sq = loss::squint_loss(out.attention.maps, batch.pair_positions);
        squint_value = sq.value().item();
        objective = objective + config.squint_lambda * sq;
      }
      const double total_value = objective.value().item();
      if (!std::isfinite(total_value)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(rec.batches + 1));
      }
      const auto grads = tape.gradient(objective, binding.vars);
      if (!all_finite(grads)) {
        throw NumericalError("non-finite gradient at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(rec.batches + 1));
      }
      adam.step(net.parameters(), grads);

      rec.vqa_loss += terms.vqa_value;
      rec.cons_loss += terms.cons_value;
      rec.squint_loss += squint_value;
      rec.total_loss += total_value;
      ++rec.batches;
    } while (!sampler.epoch_finished());

    const double nb = static_cast<double>(rec.batches);
    rec.vqa_loss /= nb;
    rec.cons_loss /= nb;
    rec.squint_loss /= nb;
    rec.total_loss /= nb;

    const metrics::MetricsReport val = metrics::compute_report(predict(net, val_split, vocab.tokens));
    rec.val_accuracy = val.overall.percent().value_or(0.0);
    rec.val_c1 = val.c1.percent();
    if (rec.val_accuracy > history.best_val_accuracy) {
      history.best_val_accuracy = rec.val_accuracy;
      history.best_epoch = epoch;
      best_params = net.parameters();
    }

    json line = rec.to_json();
    line["best_epoch"] = history.best_epoch;
    history_out << line.dump() << '\n';
    history_out.flush();
    history.epochs.push_back(rec);

    if (progress) {
      *progress << "epoch " << epoch << ": total " << rec.total_loss << " vqa " << rec.vqa_loss << " cons "
                << rec.cons_loss << " val_acc " << rec.val_accuracy << " val_c1 "
                << (rec.val_c1 ? fmt_double(*rec.val_c1) : "n/a") << std::endl;
    }
    if (epoch - history.best_epoch >= config.patience) break;
  }

  result.checkpoint = config.output_dir / kCheckpointFile;
  ad::save_checkpoint(result.checkpoint, best_params, checkpoint_meta(mc, config, answers, history.best_epoch));

  // Test metrics come from the stored checkpoint, so `evaluate` reproduces them.
  const EvalResult test = evaluate(result.checkpoint, config.data_dir, "test");
  write_eval(test, config.output_dir);
  result.test_metrics = test.report;

  history.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  json summary;
  summary["best_epoch"] = history.best_epoch;
  summary["best_val_accuracy"] = history.best_val_accuracy;
  summary["epochs_run"] = history.epochs.size();
  summary["wall_seconds"] = history.wall_seconds;
  write_text(config.output_dir / kSummaryFile, summary.dump(2) + "\n");
  return result;
}

model::VqaModel load_model(const fs::path& checkpoint) {
  const ad::Checkpoint ckpt = ad::load_checkpoint(checkpoint);
  if (!ckpt.meta.contains("model_config") || !ckpt.meta.contains("config_hash")) {
    throw IntegrityError(checkpoint.string() + ": checkpoint has no model config");
  }
  model::ModelConfig mc;
  try {
    mc = model::ModelConfig::from_text(ckpt.meta.at("model_config").get<std::string>());
  } catch (const ConfigError& e) {
    throw IntegrityError(checkpoint.string() + ": " + e.what());
  }
  if (mc.hash() != ckpt.meta.at("config_hash").get<std::string>()) {
    throw IntegrityError(checkpoint.string() + ": model config hash mismatch");
  }
  model::VqaModel net(mc, 0);
  net.load_parameters(ckpt.params);
  return net;
}

EvalResult evaluate(const fs::path& checkpoint, const fs::path& data_dir, const std::string& split) {
  if (split != "train" && split != "val" && split != "test") {
    throw UsageError("split must be train, val or test, got '" + split + "'");
  }
  const model::VqaModel net = load_model(checkpoint);
  const synth::Vocabulary vocab = synth::load_vocab(data_dir);
  if (synth::vocab_digest(vocab) != net.config().vocab_digest) {
    throw IntegrityError("vocabulary hash mismatch between " + checkpoint.string() + " and " + data_dir.string());
  }
  const synth::Split data = synth::load_split(data_dir, split);
  synth::verify_split(data);
  EvalResult result;
  result.log = predict(net, data, vocab.tokens);
  result.report = metrics::compute_report(result.log);
  return result;
}

void write_eval(const EvalResult& result, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  metrics::write_log(out_dir / kPredictionsFile, result.log);
  write_text(out_dir / kMetricsFile, result.report.to_json().dump(2) + "\n");
}

// ---------------------------------------------------------------------------

std::vector<RunSummary> load_runs(const std::vector<fs::path>& dirs, std::ostream& warn) {
  std::vector<RunSummary> runs;
  for (const fs::path& dir : dirs) {
    const fs::path metrics_path = dir / kMetricsFile;
    const fs::path config_path = dir / kConfigFile;
    if (!fs::exists(metrics_path) || !fs::exists(config_path)) {
      warn << "warning: skipping " << dir.string() << " (no " << kMetricsFile << " or " << kConfigFile << ")\n";
      continue;
    }
    const RunConfig rc = RunConfig::from_text(read_text(config_path));
    RunSummary s;
    s.dir = dir;
    s.method = rc.method;
    s.lambda = rc.effective_lambda();
    s.gamma = rc.gamma;
    s.squint_lambda = rc.method == Method::squint ? rc.squint_lambda : 0.0;
    s.seed = rc.seed;
    try {
      s.metrics = metrics::MetricsReport::from_json(json::parse(read_text(metrics_path)));
    } catch (const json::exception& e) {
      throw IntegrityError(metrics_path.string() + ": " + e.what());
    }
    runs.push_back(std::move(s));
  }
  return runs;
}

}  // namespace cvqa::harness

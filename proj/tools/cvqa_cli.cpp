// Command-line front end: generate, train, evaluate, report, gradcheck.
// Exit codes: 0 success, 1 usage or configuration error, 2 integrity or
// numerical failure.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cvqa/dataset.hpp"
#include "cvqa/errors.hpp"
#include "cvqa/harness.hpp"

namespace fs = std::filesystem;
using namespace cvqa;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitIntegrity = 2;

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Consistency-preserving VQA on synthetic fundus scenes"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Render a synthetic dataset");
  std::string gen_out;
  int gen_scenes = 950;
  std::uint64_t gen_seed = 0;
  int gen_size = 64;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--scenes", gen_scenes, "Total scenes, split 12:3:4 into train/val/test")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "Generator seed")->required();
  gen->add_option("--image-size", gen_size, "Image side in pixels")->check(CLI::Range(16, 1024));

  // train
  auto* tr = app.add_subcommand("train", "Train a model and evaluate it on the test split");
  std::string tr_config, tr_data, tr_out, tr_method;
  double tr_lambda = 0, tr_gamma = 0, tr_squint = 0, tr_lr = 0;
  std::size_t tr_quota = 0, tr_batch = 0, tr_epochs = 0, tr_patience = 0;
  std::uint64_t tr_seed = 0;
  bool tr_stop_grad = false, tr_quiet = false;
  tr->add_option("--config", tr_config, "key=value run config; flags override it");
  auto* o_data = tr->add_option("--data", tr_data, "Dataset directory");
  auto* o_method = tr->add_option("--method", tr_method, "baseline | consistency | squint")
                       ->check(CLI::IsMember({"baseline", "consistency", "squint"}));
  auto* o_lambda = tr->add_option("--lambda", tr_lambda, "Consistency weight");
  auto* o_gamma = tr->add_option("--gamma", tr_gamma, "Main-question entropy threshold");
  auto* o_squint = tr->add_option("--squint-lambda", tr_squint, "Attention matching weight");
  auto* o_quota = tr->add_option("--pair-quota", tr_quota, "Sub/main pairs per batch");
  auto* o_batch = tr->add_option("--batch-size", tr_batch, "Batch size");
  auto* o_lr = tr->add_option("--lr", tr_lr, "Adam learning rate");
  auto* o_epochs = tr->add_option("--max-epochs", tr_epochs, "Epoch limit");
  auto* o_patience = tr->add_option("--patience", tr_patience, "Early stopping patience in epochs");
  auto* o_stop = tr->add_flag("--stop-grad-main", tr_stop_grad, "Block the hinge gradient into the main question");
  auto* o_seed = tr->add_option("--seed", tr_seed, "Run seed");
  auto* o_out = tr->add_option("--out", tr_out, "Run directory");
  tr->add_flag("--quiet", tr_quiet, "No per-epoch progress");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint on one split");
  std::string ev_ckpt, ev_data, ev_split, ev_out;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--split", ev_split, "train | val | test")->required()->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--out", ev_out, "Output directory")->required();

  // report
  auto* rep = app.add_subcommand("report", "Summarize run directories");
  std::vector<std::string> rep_runs;
  bool rep_sweep = false;
  std::size_t rep_listing = 5;
  rep->add_option("--runs", rep_runs, "Run directories")->required();
  rep->add_flag("--sweep", rep_sweep, "Add the lambda x gamma grid");
  rep->add_option("--max-listing", rep_listing, "Inconsistent scenes listed per run");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  harness::GradcheckOptions gc_opts;
  std::string gc_fault;
  gc->add_option("--points", gc_opts.points, "Random points per suite")->check(CLI::PositiveNumber);
  gc->add_option("--seed", gc_opts.seed, "Point sampling seed");
  gc->add_option("--inject-fault", gc_fault, "Deliberate fault for self-testing")
      ->check(CLI::IsMember({"hinge-sign"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) {
      synth::GenerateOptions opts = synth::split_scene_count(gen_scenes);
      opts.seed = gen_seed;
      opts.gen.width = opts.gen.height = gen_size;
      opts.out_dir = gen_out;
      opts.gen.validate();
      const synth::GeneratedDataset data = synth::generate_dataset(opts);
      synth::write_dataset(data, gen_out);
      std::cout << "wrote " << data.scenes.size() << " scenes to " << gen_out << " (train "
                << data.splits.at("train").size() << ", val " << data.splits.at("val").size() << ", test "
                << data.splits.at("test").size() << " questions)\n";
    } else if (*tr) {
      harness::RunConfig rc;
      if (!tr_config.empty()) rc = harness::RunConfig::from_text(read_file(tr_config));
      if (o_data->count()) rc.data_dir = tr_data;
      if (o_method->count()) rc.method = harness::parse_method(tr_method);
      if (o_lambda->count()) rc.lambda = tr_lambda;
      if (o_gamma->count()) rc.gamma = tr_gamma;
      if (o_squint->count()) rc.squint_lambda = tr_squint;
      if (o_quota->count()) rc.pair_quota = tr_quota;
      if (o_batch->count()) rc.batch_size = tr_batch;
      if (o_lr->count()) rc.learning_rate = tr_lr;
      if (o_epochs->count()) rc.max_epochs = tr_epochs;
      if (o_patience->count()) rc.patience = tr_patience;
      // A lowered epoch limit without an explicit patience caps the default.
      if (o_epochs->count() && !o_patience->count()) rc.patience = std::min(rc.patience, rc.max_epochs);
      if (o_stop->count()) rc.stop_grad_main = tr_stop_grad;
      if (o_seed->count()) rc.seed = tr_seed;
      if (o_out->count()) rc.output_dir = tr_out;
      if (rc.data_dir.empty() || rc.output_dir.empty()) {
        throw ConfigError("train needs --data and --out (or data_dir / output_dir in --config)");
      }
      const harness::TrainResult r = harness::train(rc, tr_quiet ? nullptr : &std::cout);
      std::cout << "best epoch " << r.history.best_epoch << ", test metrics:\n"
                << r.test_metrics.to_json().dump(2) << '\n';
    } else if (*ev) {
      const harness::EvalResult r = harness::evaluate(ev_ckpt, ev_data, ev_split);
      harness::write_eval(r, ev_out);
      std::cout << r.report.to_json().dump(2) << '\n';
    } else if (*rep) {
      std::vector<fs::path> dirs(rep_runs.begin(), rep_runs.end());
      const auto runs = harness::load_runs(dirs, std::cerr);
      if (runs.empty()) throw ConfigError("no run directory holds metrics");
      std::cout << harness::format_table(harness::summarize(runs, rep_sweep), rep_sweep);
      std::cout << "\nInconsistencies (main correct, some related sub wrong)\n";
      for (const auto& r : runs) std::cout << harness::format_inconsistencies(r, rep_listing);
    } else if (*gc) {
      gc_opts.flip_hinge_gradient = gc_fault == "hinge-sign";
      const auto results = harness::run_gradcheck(gc_opts);
      bool ok = true;
      for (const auto& s : results) {
        ok = ok && s.passed();
        std::cout << (s.passed() ? "PASS " : "FAIL ") << s.name << "  max_rel_error " << s.worst.max_rel_error
                  << " (tolerance " << s.tolerance << ", " << s.points << " points)";
        if (!s.passed()) {
          std::cout << "  worst coordinate " << s.worst.worst_coordinate << " analytic " << s.worst.analytic_at_worst
                    << " numeric " << s.worst.numeric_at_worst;
        }
        std::cout << '\n';
      }
      std::cout << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
      return ok ? 0 : kExitIntegrity;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << '\n';
    return kExitIntegrity;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitIntegrity;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kExitIntegrity;
  }
  return 0;
}

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "capmem/report.hpp"
#include "capmem/runner.hpp"

namespace fs = std::filesystem;

namespace {

std::string default_out_dir(const std::string& preset_id) {
  const char* root = std::getenv("CAPMEM_OUT_ROOT");
  return (fs::path(root ? root : "runs") / preset_id).string();
}

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw capmem::TensorError("cannot open config file: " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int cmd_run(const std::string& preset_id, const std::string& config_file, std::string out_dir,
            bool have_seed, uint64_t seed, bool force, bool greedy, bool quiet,
            const std::string& checkpoint, int64_t max_iters) {
  capmem::ExperimentPreset preset;
  if (!config_file.empty())
    preset = capmem::parse_preset(read_file(config_file));
  else
    preset = capmem::find_preset(preset_id);
  if (out_dir.empty()) out_dir = default_out_dir(preset.id.empty() ? "run" : preset.id);

  capmem::RunRequest req;
  if (have_seed) req.seed = seed;
  if (max_iters >= 0) req.max_iters = max_iters;
  req.force = force;
  req.greedy_eval = greedy;
  req.verbose = !quiet;
  req.load_checkpoint = checkpoint;

  const auto outcome = capmem::run_experiment(preset, out_dir, req);
  std::cout << "run complete: " << outcome.out_dir << "\n";
  for (const char* key : {"best_score", "best_score_iter", "best.holdout_correct",
                          "best_val_loss", "ext.addition_acc", "ext.subtraction_acc"}) {
    auto it = outcome.summary.find(key);
    if (it != outcome.summary.end()) std::cout << "  " << key << " = " << it->second << "\n";
  }
  return 0;
}

int cmd_list_presets() {
  std::printf("%-26s %-8s %-11s %5s %3s %3s %3s %6s %6s %9s %8s %8s %9s\n", "id", "model", "task",
              "n", "L", "H", "m", "block", "batch", "lr", "min_lr", "dropout", "wd");
  for (const auto& p : capmem::all_presets()) {
    std::printf("%-26s %-8s %-11s %5lld %3lld %3lld %3lld %6lld %6lld %9.2g %8.2g %8.2g %9.2g\n",
                p.id.c_str(), p.size_label.c_str(), capmem::task_kind_name(p.task),
                static_cast<long long>(p.model.n_embd), static_cast<long long>(p.model.n_layer),
                static_cast<long long>(p.model.n_head),
                static_cast<long long>(p.model.mlp_expansion),
                static_cast<long long>(p.model.block_size),
                static_cast<long long>(p.train.batch_size), p.train.learning_rate, p.train.min_lr,
                p.train.dropout, p.train.weight_decay);
  }
  return 0;
}

int cmd_gen_data(const std::string& task, const std::string& out, bool eval_records) {
  const capmem::TaskDataset ds = capmem::dataset_for(capmem::task_kind_from_name(task));
  std::ostringstream os;
  if (eval_records) {
    os << "prompt\texpected\ttask\tholdout\n";
    for (const auto& r : ds.eval_records)
      os << r.prompt << '\t' << r.expected << '\t' << capmem::record_task_name(r.task) << '\t'
         << (r.holdout ? 1 : 0) << '\n';
  } else {
    os << ds.text;
  }
  if (out.empty() || out == "-") {
    std::cout << os.str();
  } else {
    std::ofstream f(out, std::ios::trunc | std::ios::binary);
    if (!f) throw capmem::TensorError("cannot write " + out);
    f << os.str();
    std::cout << "wrote " << out << " (" << os.str().size() << " bytes, vocab " << ds.vocab.size()
              << ")\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capmem: capacity vs. memorization experiments on tiny character-level transformers"};
  app.require_subcommand(1);

  // run
  std::string preset_id, config_file, out_dir, checkpoint;
  uint64_t seed = 0;
  bool force = false, greedy = false, quiet = false;
  int64_t max_iters = -1;
  auto* run = app.add_subcommand("run", "Train one experiment preset or config file");
  auto* preset_opt = run->add_option("--preset", preset_id, "Preset id (see list-presets)");
  auto* config_opt = run->add_option("--config", config_file, "Config file (key = value lines)");
  preset_opt->excludes(config_opt);
  run->add_option("--out", out_dir, "Output directory (default $CAPMEM_OUT_ROOT/<preset>)");
  auto* seed_opt = run->add_option("--seed", seed, "Override the preset seed");
  run->add_flag("--force", force, "Overwrite an existing run directory");
  run->add_flag("--greedy-eval", greedy, "Greedy decoding during evaluation");
  run->add_flag("--quiet", quiet, "Suppress per-evaluation progress lines");
  run->add_option("--checkpoint", checkpoint,
                  "Evaluate this checkpoint instead of training (extended-range probe)");
  run->add_option("--max-iters", max_iters, "Override the training budget (smoke runs)");

  // report
  std::vector<std::string> run_dirs;
  std::string report_out = "report";
  auto* report = app.add_subcommand("report", "Render result tables and plot data from runs");
  report->add_option("dirs", run_dirs, "Completed run directories");
  report->add_option("--out", report_out, "Report output directory");

  // list-presets
  auto* list = app.add_subcommand("list-presets", "Show every built-in experiment preset");

  // gen-data
  std::string task = "arithmetic", data_out;
  bool eval_records = false;
  auto* gen = app.add_subcommand("gen-data", "Write a task corpus as plain text");
  gen->add_option("--task", task, "arithmetic | facts | combined")->required();
  gen->add_option("--out", data_out, "Output file ('-' for stdout)");
  gen->add_flag("--eval-records", eval_records, "Emit evaluation records (TSV) instead");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      if (preset_id.empty() && config_file.empty())
        throw capmem::TensorError("run: need --preset or --config");
      return cmd_run(preset_id, config_file, out_dir, seed_opt->count() > 0, seed, force, greedy,
                     quiet, checkpoint, max_iters);
    }
    if (report->parsed()) {
      capmem::write_report(run_dirs, report_out);
      std::cout << "report written to " << report_out << "\n";
      return 0;
    }
    if (list->parsed()) return cmd_list_presets();
    if (gen->parsed()) return cmd_gen_data(task, data_out, eval_records);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

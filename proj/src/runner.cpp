#include "capmem/runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "capmem/checkpoint.hpp"
#include "capmem/eval.hpp"

namespace fs = std::filesystem;

namespace capmem {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void put_report_fields(std::map<std::string, std::string>& kv, const std::string& prefix,
                       const EvalReport& rep) {
  kv[prefix + ".iter"] = std::to_string(rep.iter);
  if (rep.addition_acc) kv[prefix + ".addition_acc"] = fmt_double(*rep.addition_acc);
  if (rep.subtraction_acc) kv[prefix + ".subtraction_acc"] = fmt_double(*rep.subtraction_acc);
  if (rep.facts_acc) kv[prefix + ".facts_acc"] = fmt_double(*rep.facts_acc);
  if (rep.addition_seen_acc) kv[prefix + ".addition_seen_acc"] = fmt_double(*rep.addition_seen_acc);
  if (rep.subtraction_seen_acc)
    kv[prefix + ".subtraction_seen_acc"] = fmt_double(*rep.subtraction_seen_acc);
  kv[prefix + ".score"] = fmt_double(rep.score);
  kv[prefix + ".holdout_correct"] = std::to_string(rep.holdout_correct);
  kv[prefix + ".val_loss"] = fmt_double(rep.val_loss);
}

void write_key_values(const std::string& path, const std::string& schema,
                      const std::map<std::string, std::string>& kv) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw TensorError("run: cannot write " + path);
  os << "# " << schema << "\n";
  for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
}

}  // namespace

TaskDataset dataset_for(TaskKind kind) {
  switch (kind) {
    case TaskKind::Arithmetic: return gen_arithmetic();
    case TaskKind::Facts: return gen_capitals();
    case TaskKind::Combined: return gen_combined();
  }
  throw TensorError("dataset_for: bad task kind");
}

std::map<std::string, std::string> read_summary(const std::string& out_dir) {
  const fs::path path = fs::path(out_dir) / "summary.txt";
  std::ifstream is(path);
  if (!is) throw TensorError("summary: cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    while (!key.empty() && key.back() == ' ') key.pop_back();
    while (!val.empty() && val.front() == ' ') val.erase(val.begin());
    kv[key] = val;
  }
  return kv;
}

RunOutcome run_experiment(const ExperimentPreset& preset_in, const std::string& out_dir,
                          const RunRequest& req) {
  ExperimentPreset preset = preset_in;
  if (req.seed) preset.train.seed = *req.seed;
  if (req.max_iters) preset.train.max_iters = *req.max_iters;

  const fs::path dir(out_dir);
  fs::create_directories(dir);
  const fs::path lock = dir / ".lock";
  const fs::path summary_path = dir / "summary.txt";
  if ((fs::exists(lock) || fs::exists(summary_path)) && !req.force)
    throw TensorError("run: output directory " + out_dir +
                      " already holds a run (use --force to overwrite)");
  for (const char* f : {".lock", "summary.txt", "metrics.csv", "ckpt.bin", "config.txt"})
    fs::remove(dir / f);
  { std::ofstream(lock.string()) << "pid\n"; }

  TaskDataset ds = dataset_for(preset.task);
  if (preset.model.vocab_size == 0) preset.model.vocab_size = ds.vocab.size();
  if (preset.model.block_size != ds.block_size)
    throw TensorError("run: preset block size does not match task block size");

  write_key_values((dir / "config.txt").string(), "capmem config schema 1",
                   preset_key_values(preset));

  const auto t0 = std::chrono::steady_clock::now();
  Model model;
  RunState state;
  if (!req.load_checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(req.load_checkpoint);
    model = std::move(ck.model);
    state.iter = ck.iter;
    state.best_val_loss = ck.best_val_loss;
    state.best_score = ck.best_score;
    state.best_score_iter = ck.best_score_iter;
  } else {
    model = Model(preset.model, Rng(preset.train.seed));
    TrainRunOptions topts;
    topts.metrics_csv_path = (dir / "metrics.csv").string();
    topts.checkpoint_path = (dir / "ckpt.bin").string();
    topts.greedy_eval = req.greedy_eval;
    topts.verbose = req.verbose;
    state = train_run(model, ds, preset.train, topts);
  }

  std::map<std::string, std::string> kv;
  kv["preset"] = preset.id;
  kv["size_label"] = preset.size_label;
  kv["task"] = task_kind_name(preset.task);
  kv["reg"] = reg_mode_name(preset.reg);
  kv["seed"] = std::to_string(preset.train.seed);
  kv["max_iters"] = std::to_string(preset.train.max_iters);
  kv["vocab_size"] = std::to_string(preset.model.vocab_size);
  kv["params_reported"] = std::to_string(model.count_params(true));
  kv["params_reported_pretty"] = format_param_count(model.count_params(true));
  kv["params_total"] = std::to_string(model.count_params(false));
  kv["iters_done"] = std::to_string(state.iter);
  kv["best_val_loss"] = fmt_double(state.best_val_loss);
  kv["best_score"] = fmt_double(state.best_score);
  kv["best_score_iter"] = std::to_string(state.best_score_iter);
  kv["holdout_batch_hits"] = std::to_string(state.holdout_batch_hits);
  if (!state.history.empty()) {
    put_report_fields(kv, "best", state.best_report);
    put_report_fields(kv, "final", state.history.back());
  }

  if (preset.extended_probe) {
    // Probe the checkpointed (best validation loss) weights when available;
    // prompts may exceed the training block, which generation crops.
    Model* probe = &model;
    Checkpoint ck;
    if (!state.checkpoint_path.empty()) {
      ck = load_checkpoint(state.checkpoint_path);
      probe = &ck.model;
    }
    const auto records = gen_extended_arithmetic();
    const Rng probe_rng(Rng(preset.train.seed).stream("eval/extended").next_u64());
    auto [add_acc, sub_acc] = eval_extended_range(*probe, records, ds.vocab, probe_rng);
    kv["ext.addition_acc"] = fmt_double(add_acc);
    kv["ext.subtraction_acc"] = fmt_double(sub_acc);
    kv["ext.records_per_op"] = "300";
  }

  const auto t1 = std::chrono::steady_clock::now();
  kv["runtime_s"] =
      fmt_double(std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count() / 1000.0);
  kv["status"] = "ok";
  write_key_values(summary_path.string(), "capmem summary schema 1", kv);
  fs::remove(lock);

  RunOutcome outcome;
  outcome.state = std::move(state);
  outcome.preset = std::move(preset);
  outcome.summary = std::move(kv);
  outcome.out_dir = out_dir;
  return outcome;
}

}  // namespace capmem

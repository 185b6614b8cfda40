#pragma once

#include <map>
#include <optional>
#include <string>

#include "capmem/presets.hpp"
#include "capmem/train.hpp"

namespace capmem {

struct RunRequest {
  std::optional<uint64_t> seed;     // overrides the preset seed
  std::optional<int64_t> max_iters; // overrides the preset budget (smoke runs)
  bool force = false;               // overwrite a completed/locked output dir
  bool greedy_eval = false;
  bool verbose = false;
  std::string load_checkpoint;      // extended probe: evaluate this checkpoint
                                    // instead of training from scratch
};

struct RunOutcome {
  RunState state;
  ExperimentPreset preset;  // as resolved (seed, vocab, overrides applied)
  std::map<std::string, std::string> summary;
  std::string out_dir;
};

TaskDataset dataset_for(TaskKind kind);

// Executes one experiment into its own output directory: config snapshot,
// metrics.csv, checkpoint, summary.txt. Refuses a directory that already
// holds a run (lock file or summary) unless forced.
RunOutcome run_experiment(const ExperimentPreset& preset, const std::string& out_dir,
                          const RunRequest& req = {});

std::map<std::string, std::string> read_summary(const std::string& out_dir);

}  // namespace capmem

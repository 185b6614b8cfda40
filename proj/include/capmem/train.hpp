#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capmem/data.hpp"
#include "capmem/eval.hpp"
#include "capmem/model.hpp"
#include "capmem/optim.hpp"

namespace capmem {

struct RunState {
  int64_t iter = 0;
  double best_val_loss = 0.0;
  double best_score = 0.0;
  int64_t best_score_iter = -1;
  std::vector<EvalReport> history;
  EvalReport best_report;  // the report that set best_score
  std::string checkpoint_path;
  int64_t holdout_batch_hits = 0;  // withheld-pattern sightings in sampled batches
};

struct TrainRunOptions {
  std::string metrics_csv_path;  // empty: keep metrics in memory only
  std::string checkpoint_path;   // empty: no checkpoint file
  bool audit_holdout = true;     // scan every sampled batch for withheld patterns
  bool greedy_eval = false;
  bool verbose = false;
  std::function<void(const EvalReport&)> on_eval;
};

// Mean loss over eval_iters freshly sampled batches in evaluation mode
// (dropout off). Deterministic in (seed, split, iter).
double estimate_loss(const Model& model, const TaskDataset& ds, const std::string& split,
                     int64_t eval_iters, const Rng& rng, int64_t iter);

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  int64_t holdout_hits = 0;
};

// One optimizer step at iteration `iter`: sample (stream "batch/<iter>"),
// loss with dropout stream "dropout/<iter>", backward, clip, adamw at
// lr_at(iter). Depends only on (model state, opt state, seed, iter), which is
// what makes checkpoint resumption bit-exact.
StepResult train_step(Model& model, const TaskDataset& ds, const TrainConfig& cfg, OptState& opt,
                      const Rng& rng, int64_t iter, bool audit_holdout = false);

// The training loop: sample -> loss -> backward -> clip -> adamw at the
// scheduled rate, with task evaluation, metrics logging and val-loss
// checkpointing every eval_interval iterations and at max_iters.
RunState train_run(Model& model, const TaskDataset& ds, const TrainConfig& cfg,
                   const TrainRunOptions& opts = {});

// Appends one metrics row; writes the schema header when the file is empty.
void append_metrics_row(const std::string& path, const EvalReport& rep);

extern const char* const kMetricsSchemaHeader;

}  // namespace capmem

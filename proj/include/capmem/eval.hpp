#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "capmem/data.hpp"
#include "capmem/model.hpp"
#include "capmem/rng.hpp"

namespace capmem {

struct EvalOptions {
  int attempts = 10;
  double temperature = 1.0;
  bool greedy = false;
  int64_t max_new = 0;  // 0: use the model's block size
};

// Per-checkpoint task metrics. Accuracies are fractions in [0,1]; `score` is
// the attempt-weighted mean over every record the dataset carries (the
// "combined score" when all three tasks are present).
struct EvalReport {
  int64_t iter = 0;
  std::optional<double> addition_acc;
  std::optional<double> subtraction_acc;
  std::optional<double> facts_acc;
  std::optional<double> addition_seen_acc;     // holdout records excluded
  std::optional<double> subtraction_seen_acc;  // holdout records excluded
  double score = 0.0;
  int holdout_correct = 0;  // out of 4 * attempts
  int attempts = 10;
  double val_loss = 0.0;
  double lr = 0.0;
  std::vector<int> record_successes;  // aligned with the dataset's eval records
};

// Samples each record's completion `attempts` times (streams
// "sample/<prompt>/<attempt>") and counts exact-match successes. Arithmetic
// compares the emitted text up to and including '>'; facts compare up to the
// newline. Results are independent of record order.
std::vector<int> eval_records(const Model& model, const std::vector<EvalRecord>& records,
                              const Vocab& vocab, const Rng& rng, const EvalOptions& opts = {});

// correct attempts / (records_of_task * attempts); holdout records included.
double task_accuracy(const std::vector<int>& successes, const std::vector<EvalRecord>& records,
                     RecordTask task, int attempts);

// Same denominator convention restricted to non-holdout records.
double task_accuracy_seen(const std::vector<int>& successes, const std::vector<EvalRecord>& records,
                          RecordTask task, int attempts);

int holdout_correct(const std::vector<int>& successes, const std::vector<EvalRecord>& records);

// Attempt-weighted mean over 100 addition + 100 subtraction + 50 fact prompts.
double combined_score(double addition_acc, double subtraction_acc, double facts_acc);

// Assembles the per-task aggregates for one checkpoint.
EvalReport build_eval_report(int64_t iter, const std::vector<EvalRecord>& records,
                             std::vector<int> successes, int attempts);

// Extended-range probe (operands beyond the training digits): returns
// (addition accuracy, subtraction accuracy).
std::pair<double, double> eval_extended_range(const Model& model,
                                              const std::vector<EvalRecord>& records,
                                              const Vocab& vocab, const Rng& rng,
                                              const EvalOptions& opts = {});

}  // namespace capmem

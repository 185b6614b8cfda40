#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace capmem {

struct MetricsRow {
  int64_t iter = 0;
  std::optional<double> addition_acc;
  std::optional<double> subtraction_acc;
  std::optional<double> facts_acc;
  double combined = 0.0;
  int holdout_correct = 0;
  double val_loss = 0.0;
  double lr = 0.0;
};

std::vector<MetricsRow> read_metrics_csv(const std::string& path);

struct ReportFile {
  std::string name;     // relative file name
  std::string content;
};

struct Report {
  std::string markdown;            // results tables + extrapolation flags
  std::vector<ReportFile> files;   // per-run series CSVs and SVG plots
};

// Renders result tables from completed run directories and emits per-run
// accuracy-vs-iteration series (with a both_100 flag on checkpoints where
// both arithmetic curves hit 100%). Pure function of the run files.
Report build_report(const std::vector<std::string>& run_dirs);

// build_report + write everything under out_dir.
void write_report(const std::vector<std::string>& run_dirs, const std::string& out_dir);

}  // namespace capmem

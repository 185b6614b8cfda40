#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "capmem/data.hpp"
#include "capmem/model.hpp"
#include "capmem/optim.hpp"

namespace capmem {

enum class RegMode { Paper, Controlled };

inline const char* reg_mode_name(RegMode m) {
  return m == RegMode::Paper ? "paper" : "controlled";
}

// A fully specified experiment: model family member x task x regularization
// mode, plus the two special entries (the long-schedule MLT run and the
// extended-range probe).
struct ExperimentPreset {
  std::string id;
  std::string size_label;  // n14 / n28 / n56 / MLT
  TaskKind task = TaskKind::Arithmetic;
  RegMode reg = RegMode::Paper;
  bool extended_probe = false;  // evaluate extended-range arithmetic after training
  ModelConfig model;            // vocab_size 0 means "resolve from the dataset"
  TrainConfig train;
  std::string notes;

  bool operator==(const ExperimentPreset&) const = default;
};

// Every built-in preset: {arith, facts, combined} x {n14, n28, n56, mlt} x
// {paper, controlled}, plus "grokking-mlt" and "extended-range-n14".
const std::vector<ExperimentPreset>& all_presets();

const ExperimentPreset& find_preset(const std::string& id);

// The Appendix-style long-schedule configuration (MLT on arithmetic with a
// stretched cosine: lr 1e-6 decaying toward 1e-7 over 1e7 iters, 1.5M steps).
const ExperimentPreset& grokking_preset();

// Flat key=value form; parse validates types and rejects unknown keys.
std::string serialize_preset(const ExperimentPreset& preset);
ExperimentPreset parse_preset(const std::string& text);
std::map<std::string, std::string> preset_key_values(const ExperimentPreset& preset);

const char* task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(const std::string& name);

}  // namespace capmem

#pragma once

#include <cstdint>
#include <string>

#include "capmem/model.hpp"
#include "capmem/optim.hpp"

namespace capmem {

// Versioned binary training snapshot: config, parameter tensors in
// enumeration order (64-bit shapes, 32-bit little-endian values), optimizer
// moments, progress counters. Round-trips bit-exactly.
struct Checkpoint {
  ModelConfig config;
  std::string vocab_chars;
  Model model;
  OptState opt;
  int64_t iter = 0;
  double best_val_loss = 0.0;
  double best_score = 0.0;
  int64_t best_score_iter = -1;
  uint64_t seed = 0;
};

void save_checkpoint(const std::string& path, const Model& model, const std::string& vocab_chars,
                     const OptState& opt, int64_t iter, double best_val_loss, double best_score,
                     int64_t best_score_iter, uint64_t seed);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace capmem

#include "capmem/optim.hpp"

#include <cmath>

namespace capmem {

double lr_at(int64_t iter, const TrainConfig& cfg) {
  if (iter < cfg.warmup_iters)
    return cfg.learning_rate * static_cast<double>(iter + 1) /
           static_cast<double>(cfg.warmup_iters + 1);
  if (iter > cfg.lr_decay_iters) return cfg.min_lr;
  const double ratio = static_cast<double>(iter - cfg.warmup_iters) /
                       static_cast<double>(cfg.lr_decay_iters - cfg.warmup_iters);
  const double coeff = 0.5 * (1.0 + std::cos(3.14159265358979323846 * ratio));
  return cfg.min_lr + coeff * (cfg.learning_rate - cfg.min_lr);
}

}  // namespace capmem

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "capmem/tensor.hpp"

namespace capmem {

struct TrainConfig {
  double learning_rate = 1e-2;
  double min_lr = 1e-4;
  int64_t max_iters = 30000;
  int64_t lr_decay_iters = 25000;
  int64_t warmup_iters = 100;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double dropout = 0.0;
  double grad_clip = 1.0;  // <= 0 disables clipping
  int64_t eval_interval = 250;
  int64_t eval_iters = 20;
  int64_t batch_size = 0;
  int64_t block_size = 0;
  uint64_t seed = 1337;

  void validate() const {
    // lr_decay_iters may exceed max_iters (a long-schedule run simply stops
    // inside the cosine segment).
    if (!(warmup_iters < lr_decay_iters))
      throw TensorError("TrainConfig: need warmup_iters < lr_decay_iters");
    if (min_lr > learning_rate) throw TensorError("TrainConfig: min_lr must be <= learning_rate");
    if (eval_interval <= 0) throw TensorError("TrainConfig: eval_interval must be positive");
    if (eval_iters <= 0) throw TensorError("TrainConfig: eval_iters must be positive");
  }

  bool operator==(const TrainConfig&) const = default;
};

// Linear warmup to learning_rate, cosine decay to min_lr over
// [warmup_iters, lr_decay_iters], constant min_lr afterwards.
double lr_at(int64_t iter, const TrainConfig& cfg);

// Per-parameter Adam moments. Stored at training precision so checkpoints
// round-trip bit-exactly.
template <class S>
struct OptStateT {
  std::vector<std::vector<S>> m;
  std::vector<std::vector<S>> v;
  int64_t step = 0;

  template <class P>
  static OptStateT for_params(const std::vector<P>& params) {
    OptStateT s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
      s.m.emplace_back(p.data().size(), S(0));
      s.v.emplace_back(p.data().size(), S(0));
    }
    return s;
  }
};

using OptState = OptStateT<float>;

// Decoupled weight decay applies to every tensor of rank >= 2 (all matrices,
// embeddings included); gains/biases are left undecayed.
template <class S>
bool in_decay_group(const TensorT<S>& p) {
  return p.shape().size() >= 2;
}

struct ClipResult {
  double norm = 0.0;
  double scale = 1.0;
};

// Global L2-norm clipping over all parameter grads; returns the norm and the
// scale that was applied. max_norm <= 0 disables scaling.
template <class S>
ClipResult clip_grad_norm(std::vector<TensorT<S>>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params)
    for (S g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  ClipResult res;
  res.norm = std::sqrt(sq);
  if (max_norm > 0.0 && res.norm > max_norm) {
    res.scale = max_norm / res.norm;
    const S s = static_cast<S>(res.scale);
    for (auto& p : params)
      for (S& g : p.grad()) g *= s;
  }
  return res;
}

// One bias-corrected AdamW step over all parameters, reading grads in place.
// Throws on non-finite gradients, naming the offending parameter.
template <class S>
void adamw_step(std::vector<TensorT<S>>& params, const std::vector<std::string>& names,
                OptStateT<S>& state, double lr, const TrainConfig& cfg) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    auto& pdata = p.data();
    const auto& pgrad = p.grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    const bool decay = in_decay_group(p) && cfg.weight_decay != 0.0;
    const S decay_mul = static_cast<S>(1.0 - lr * cfg.weight_decay);
    const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
    for (size_t i = 0; i < pdata.size(); ++i) {
      const S g = pgrad[i];
      if (!std::isfinite(static_cast<double>(g)))
        throw TensorError("adamw_step: non-finite gradient in parameter " +
                          (pi < names.size() ? names[pi] : std::to_string(pi)) + " at index " +
                          std::to_string(i));
      m[i] = b1 * m[i] + (S(1) - b1) * g;
      v[i] = b2 * v[i] + (S(1) - b2) * g * g;
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      if (decay) pdata[i] *= decay_mul;
      pdata[i] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace capmem

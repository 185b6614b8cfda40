#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "capmem/rng.hpp"
#include "capmem/tensor.hpp"

namespace capmem {

struct ModelConfig {
  int64_t n_embd = 0;
  int64_t n_layer = 1;
  int64_t n_head = 1;
  int64_t mlp_expansion = 1;  // MLP hidden width is mlp_expansion * n_embd
  int64_t block_size = 0;
  int64_t vocab_size = 0;
  double dropout = 0.0;
  bool use_bias = false;
  bool tie_output_head = true;

  void validate() const {
    if (n_embd <= 0) throw TensorError("ModelConfig: n_embd must be positive");
    if (n_layer <= 0) throw TensorError("ModelConfig: n_layer must be positive");
    if (n_head <= 0 || n_embd % n_head != 0)
      throw TensorError("ModelConfig: n_head must be positive and divide n_embd");
    if (mlp_expansion <= 0) throw TensorError("ModelConfig: mlp_expansion must be positive");
    if (block_size <= 0) throw TensorError("ModelConfig: block_size must be positive");
    if (vocab_size <= 0) throw TensorError("ModelConfig: vocab_size must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw TensorError("ModelConfig: dropout must be in [0,1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Closed-form reported parameter count: output head tied, no biases, position
// embedding excluded. This is the convention the result tables use.
inline int64_t reported_param_count(int64_t n, int64_t layers, int64_t m, int64_t vocab) {
  return vocab * n + layers * (4 * n * n + 2 * m * n * n + 2 * n) + n;
}

// Formats a count the way the result tables print it: k/M with two decimals.
std::string format_param_count(int64_t count);

// Decoder-only transformer: token+position embeddings, pre-norm blocks of
// single-projection qkv attention and a gelu MLP, final norm, tied output
// head. Parameter enumeration order is fixed and is the checkpoint order.
template <class S>
class ModelT {
 public:
  ModelT() = default;

  ModelT(const ModelConfig& cfg, const Rng& rng) : cfg_(cfg) {
    cfg.validate();
    RngStream init = rng.stream("init");
    const int64_t n = cfg.n_embd, v = cfg.vocab_size, hidden = cfg.mlp_expansion * n;
    // Residual output projections start smaller to keep the residual stream
    // near unit scale at any depth.
    const double base_std = 0.02;
    const double resid_std = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layer));

    auto normal = [&init](Shape shape, double std) {
      Vec<S> data(static_cast<size_t>(numel_of(shape)));
      for (auto& x : data) x = static_cast<S>(init.normal() * std);
      return TensorT<S>::param(std::move(shape), std::move(data));
    };
    auto ones = [](Shape shape) {
      auto t = TensorT<S>::filled(std::move(shape), S(1));
      t.set_requires_grad(true);
      return t;
    };
    auto zeros_p = [](Shape shape) {
      auto t = TensorT<S>::zeros(std::move(shape));
      t.set_requires_grad(true);
      return t;
    };

    auto push = [this](const std::string& name, TensorT<S> t) {
      names_.push_back(name);
      params_.push_back(t);
      return t;
    };

    wte_ = push("wte", normal({v, n}, base_std));
    wpe_ = push("wpe", normal({cfg.block_size, n}, base_std));
    layers_.resize(static_cast<size_t>(cfg.n_layer));
    for (int64_t l = 0; l < cfg.n_layer; ++l) {
      auto& blk = layers_[static_cast<size_t>(l)];
      const std::string p = "h" + std::to_string(l) + ".";
      blk.ln1_g = push(p + "ln1.g", ones({n}));
      if (cfg.use_bias) blk.ln1_b = push(p + "ln1.b", zeros_p({n}));
      blk.qkv_w = push(p + "attn.qkv.w", normal({n, 3 * n}, base_std));
      if (cfg.use_bias) blk.qkv_b = push(p + "attn.qkv.b", zeros_p({3 * n}));
      blk.attn_out_w = push(p + "attn.out.w", normal({n, n}, resid_std));
      if (cfg.use_bias) blk.attn_out_b = push(p + "attn.out.b", zeros_p({n}));
      blk.ln2_g = push(p + "ln2.g", ones({n}));
      if (cfg.use_bias) blk.ln2_b = push(p + "ln2.b", zeros_p({n}));
      blk.mlp_in_w = push(p + "mlp.in.w", normal({n, hidden}, base_std));
      if (cfg.use_bias) blk.mlp_in_b = push(p + "mlp.in.b", zeros_p({hidden}));
      blk.mlp_out_w = push(p + "mlp.out.w", normal({hidden, n}, resid_std));
      if (cfg.use_bias) blk.mlp_out_b = push(p + "mlp.out.b", zeros_p({n}));
    }
    lnf_g_ = push("lnf.g", ones({n}));
    if (cfg.use_bias) lnf_b_ = push("lnf.b", zeros_p({n}));
    if (!cfg.tie_output_head) lm_head_ = push("lm_head", normal({v, n}, base_std));
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<TensorT<S>>& params() { return params_; }
  const std::vector<TensorT<S>>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }
  TensorT<S>& token_embedding() { return wte_; }
  TensorT<S>& position_embedding() { return wpe_; }

  // Next-token logits [B, T, V]. `dropout_stream` is consumed only when
  // training with a nonzero dropout rate.
  TensorT<S> forward(const IntTensor& tokens, bool training = false,
                     RngStream* dropout_stream = nullptr) const {
    if (tokens.shape.size() != 2)
      throw TensorError("forward: tokens must be [batch, time], got " + shape_str(tokens.shape));
    const int64_t t = tokens.shape[1];
    if (t > cfg_.block_size)
      throw TensorError("forward: sequence length " + std::to_string(t) +
                        " exceeds block size " + std::to_string(cfg_.block_size));
    const double rate = cfg_.dropout;
    auto drop = [&](const TensorT<S>& x) { return dropout(x, rate, training, dropout_stream); };

    std::vector<int32_t> pos(static_cast<size_t>(t));
    for (int64_t i = 0; i < t; ++i) pos[static_cast<size_t>(i)] = static_cast<int32_t>(i);
    auto x = drop(add(embedding_gather(wte_, tokens), embedding_gather(wpe_, IntTensor({t}, pos))));

    const int64_t head_dim = cfg_.n_embd / cfg_.n_head;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (const auto& blk : layers_) {
      auto h = norm(x, blk.ln1_g, blk.ln1_b);
      auto qkv = linear(h, blk.qkv_w, blk.qkv_b);
      auto q = reshape_split_heads(qkv, cfg_.n_head, 0);
      auto k = reshape_split_heads(qkv, cfg_.n_head, 1);
      auto v = reshape_split_heads(qkv, cfg_.n_head, 2);
      auto att = softmax_lastdim(causal_mask_fill(scale(matmul(q, k, /*transpose_b=*/true), att_scale)));
      auto y = merge_heads(matmul(drop(att), v));
      x = add(x, drop(linear(y, blk.attn_out_w, blk.attn_out_b)));
      auto m = norm(x, blk.ln2_g, blk.ln2_b);
      auto mlp = linear(gelu(linear(m, blk.mlp_in_w, blk.mlp_in_b)), blk.mlp_out_w, blk.mlp_out_b);
      x = add(x, drop(mlp));
    }
    x = norm(x, lnf_g_, lnf_b_);
    return matmul(x, cfg_.tie_output_head ? wte_ : lm_head_, /*transpose_b=*/true);
  }

  // Mean cross-entropy over all positions.
  TensorT<S> loss(const IntTensor& tokens, const IntTensor& targets, bool training = false,
                  RngStream* dropout_stream = nullptr) const {
    return cross_entropy_from_logits(forward(tokens, training, dropout_stream), targets);
  }

  // Autoregressive sampling. Context is cropped to the last block_size tokens
  // once it grows past the block. Stops after emitting a stop token (which is
  // included in the result) or after max_new tokens. greedy == argmax chain.
  std::vector<int32_t> generate(const std::vector<int32_t>& prompt, int64_t max_new,
                                RngStream stream, double temperature = 1.0,
                                const std::set<int32_t>& stop_set = {}, bool greedy = false) const {
    if (prompt.empty()) throw TensorError("generate: prompt must be nonempty");
    if (temperature <= 0.0) throw TensorError("generate: temperature must be positive");
    NoGradGuard ng;
    std::vector<int32_t> ctx = prompt;
    std::vector<int32_t> out;
    for (int64_t step = 0; step < max_new; ++step) {
      const int64_t t = std::min<int64_t>(static_cast<int64_t>(ctx.size()), cfg_.block_size);
      std::vector<int32_t> window(ctx.end() - t, ctx.end());
      auto logits = forward(IntTensor({1, t}, std::move(window)));
      const S* row = logits.data().data() + (t - 1) * cfg_.vocab_size;
      const int32_t next = greedy ? argmax_id(row) : sample_id(row, temperature, stream);
      ctx.push_back(next);
      out.push_back(next);
      if (stop_set.count(next)) break;
    }
    return out;
  }

  // Reported count excludes the position embedding; the inclusive count is
  // the full checkpoint size.
  int64_t count_params(bool exclude_position_embedding = true) const {
    int64_t total = 0;
    for (const auto& p : params_) total += p.numel();
    if (exclude_position_embedding) total -= wpe_.numel();
    return total;
  }

  int32_t sample_id(const S* logits, double temperature, RngStream& stream) const {
    const int64_t v = cfg_.vocab_size;
    double m = logits[0] / temperature;
    for (int64_t j = 1; j < v; ++j) m = std::max(m, static_cast<double>(logits[j]) / temperature);
    std::vector<double> p(static_cast<size_t>(v));
    double sum = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      p[static_cast<size_t>(j)] = std::exp(static_cast<double>(logits[j]) / temperature - m);
      sum += p[static_cast<size_t>(j)];
    }
    const double u = stream.next_double() * sum;
    double acc = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      acc += p[static_cast<size_t>(j)];
      if (u < acc) return static_cast<int32_t>(j);
    }
    return static_cast<int32_t>(v - 1);
  }

  int32_t argmax_id(const S* logits) const {
    int32_t best = 0;
    for (int64_t j = 1; j < cfg_.vocab_size; ++j)
      if (logits[j] > logits[best]) best = static_cast<int32_t>(j);
    return best;
  }

 private:
  struct Block {
    TensorT<S> ln1_g, ln1_b, qkv_w, qkv_b, attn_out_w, attn_out_b;
    TensorT<S> ln2_g, ln2_b, mlp_in_w, mlp_in_b, mlp_out_w, mlp_out_b;
  };

  TensorT<S> norm(const TensorT<S>& x, const TensorT<S>& g, const TensorT<S>& b) const {
    auto y = layernorm(x, g);
    return b.defined() ? add(y, b) : y;
  }

  TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) const {
    auto y = matmul(x, w);
    return b.defined() ? add(y, b) : y;
  }

  ModelConfig cfg_;
  TensorT<S> wte_, wpe_, lnf_g_, lnf_b_, lm_head_;
  std::vector<Block> layers_;
  std::vector<TensorT<S>> params_;
  std::vector<std::string> names_;
};

using Model = ModelT<float>;

}  // namespace capmem

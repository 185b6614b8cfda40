#include "capmem/train.hpp"

#include <array>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "capmem/checkpoint.hpp"

namespace capmem {

const char* const kMetricsSchemaHeader =
    "# capmem metrics schema 1\n"
    "iter,addition_acc,subtraction_acc,facts_acc,combined,holdout_correct,val_loss,lr\n";

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : ""; }

// Withheld (5,7) expressions must never be seen by the optimizer; count any
// sighting in the decoded batch windows.
int64_t count_holdout_hits(const TaskDataset& ds, const IntTensor& x, const IntTensor& y) {
  static const std::array<std::string, 4> kPatterns = {"5+7", "7+5", "5-7", "7-5"};
  const int64_t batch = x.shape[0], block = x.shape[1];
  int64_t hits = 0;
  std::string row;
  for (int64_t i = 0; i < batch; ++i) {
    row.clear();
    for (int64_t t = 0; t < block; ++t)
      row.push_back(ds.vocab.chars()[static_cast<size_t>(x.data[static_cast<size_t>(i * block + t)])]);
    // y extends the window by one character.
    row.push_back(ds.vocab.chars()[static_cast<size_t>(y.data[static_cast<size_t>((i + 1) * block - 1)])]);
    for (const auto& pat : kPatterns)
      for (size_t at = row.find(pat); at != std::string::npos; at = row.find(pat, at + 1)) ++hits;
  }
  return hits;
}

}  // namespace

void append_metrics_row(const std::string& path, const EvalReport& rep) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream os(path, std::ios::app);
  if (!os) throw TensorError("metrics: cannot open for append: " + path);
  if (fresh) os << kMetricsSchemaHeader;
  os << rep.iter << ',' << fmt_opt(rep.addition_acc) << ',' << fmt_opt(rep.subtraction_acc) << ','
     << fmt_opt(rep.facts_acc) << ',' << fmt_double(rep.score) << ',' << rep.holdout_correct << ','
     << fmt_double(rep.val_loss) << ',' << fmt_double(rep.lr) << '\n';
}

double estimate_loss(const Model& model, const TaskDataset& ds, const std::string& split,
                     int64_t eval_iters, const Rng& rng, int64_t iter) {
  if (eval_iters < 1) throw TensorError("estimate_loss: eval_iters must be >= 1");
  NoGradGuard ng;
  RngStream stream = rng.stream("estloss/" + split + "/" + std::to_string(iter));
  double total = 0.0;
  for (int64_t k = 0; k < eval_iters; ++k) {
    auto [x, y] = sample_batch(ds, stream);
    total += static_cast<double>(model.loss(x, y, /*training=*/false).item());
  }
  return total / static_cast<double>(eval_iters);
}

StepResult train_step(Model& model, const TaskDataset& ds, const TrainConfig& cfg, OptState& opt,
                      const Rng& rng, int64_t iter, bool audit_holdout) {
  const double lr = lr_at(iter, cfg);
  RngStream batch_stream = rng.stream("batch/" + std::to_string(iter));
  auto [x, y] = sample_batch(ds, batch_stream);
  StepResult res;
  if (audit_holdout) res.holdout_hits = count_holdout_hits(ds, x, y);

  auto& params = model.params();
  for (auto& p : params) p.zero_grad();
  RngStream drop_stream = rng.stream("dropout/" + std::to_string(iter));
  auto loss = model.loss(x, y, /*training=*/true, &drop_stream);
  res.loss = loss.item();
  if (!std::isfinite(res.loss)) {
    backward(loss);
    const double norm = clip_grad_norm(params, 0.0).norm;
    throw TensorError("train_run: non-finite loss " + fmt_double(res.loss) + " at iter " +
                      std::to_string(iter) + " (lr " + fmt_double(lr) + ", grad norm " +
                      fmt_double(norm) + ")");
  }
  backward(loss);
  res.grad_norm = clip_grad_norm(params, cfg.grad_clip).norm;
  adamw_step(params, model.param_names(), opt, lr, cfg);
  return res;
}

RunState train_run(Model& model, const TaskDataset& ds, const TrainConfig& cfg,
                   const TrainRunOptions& opts) {
  cfg.validate();
  if (model.config().block_size != ds.block_size)
    throw TensorError("train_run: model block size " + std::to_string(model.config().block_size) +
                      " does not match dataset block size " + std::to_string(ds.block_size));
  if (model.config().vocab_size != ds.vocab.size())
    throw TensorError("train_run: model vocab " + std::to_string(model.config().vocab_size) +
                      " does not match dataset vocab " + std::to_string(ds.vocab.size()));

  const Rng rng(cfg.seed);
  OptState opt = OptState::for_params(model.params());

  RunState state;
  state.best_val_loss = std::numeric_limits<double>::infinity();
  const bool audit = opts.audit_holdout && ds.kind != TaskKind::Facts;

  for (int64_t iter = 0; iter < cfg.max_iters; ++iter) {
    const StepResult step = train_step(model, ds, cfg, opt, rng, iter, audit);
    state.holdout_batch_hits += step.holdout_hits;
    const double lr = lr_at(iter, cfg);
    const double loss_val = step.loss;

    const int64_t completed = iter + 1;
    if (completed % cfg.eval_interval == 0 || completed == cfg.max_iters) {
      const double val_loss = estimate_loss(model, ds, "val", cfg.eval_iters, rng, completed);

      // Fresh per-checkpoint randomness; record/attempt streams inside stay
      // order-invariant.
      const Rng eval_rng(rng.stream("eval/" + std::to_string(completed)).next_u64());
      EvalOptions eopts;
      eopts.greedy = opts.greedy_eval;
      auto successes = eval_records(model, ds.eval_records, ds.vocab, eval_rng, eopts);
      EvalReport rep = build_eval_report(completed, ds.eval_records, std::move(successes),
                                         eopts.attempts);
      rep.val_loss = val_loss;
      rep.lr = lr;

      if (val_loss < state.best_val_loss) {
        state.best_val_loss = val_loss;
        if (!opts.checkpoint_path.empty()) {
          save_checkpoint(opts.checkpoint_path, model, ds.vocab.chars(), opt, completed,
                          state.best_val_loss, state.best_score, state.best_score_iter, cfg.seed);
          state.checkpoint_path = opts.checkpoint_path;
        }
      }
      if (rep.score > state.best_score || state.best_score_iter < 0) {
        state.best_score = rep.score;
        state.best_score_iter = completed;
        state.best_report = rep;
      }
      if (!opts.metrics_csv_path.empty()) append_metrics_row(opts.metrics_csv_path, rep);
      if (opts.on_eval) opts.on_eval(rep);
      if (opts.verbose) {
        std::printf("iter %6" PRId64 "  loss %.4f  val %.4f  score %.4f  holdout %d/%d  lr %.3g\n",
                    completed, loss_val, val_loss, rep.score, rep.holdout_correct,
                    4 * rep.attempts, lr);
        std::fflush(stdout);
      }
      state.history.push_back(std::move(rep));
    }
    state.iter = completed;
  }
  return state;
}

}  // namespace capmem

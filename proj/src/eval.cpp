#include "capmem/eval.hpp"

#include <algorithm>

namespace capmem {

namespace {

// Runs all attempts for one record as a single batched generation; rows only
// differ once sampling diverges, and each row draws from its own stream, so
// the result is identical to generating the attempts one at a time.
int run_record(const Model& model, const EvalRecord& rec, const Vocab& vocab, const Rng& rng,
               const EvalOptions& opts) {
  for (char c : rec.prompt)
    if (!vocab.contains(c))
      throw TensorError("eval: prompt '" + rec.prompt +
                        "' contains a character outside the model vocabulary");
  const bool arith = rec.task != RecordTask::Fact;
  const char stop_char = arith ? '>' : '\n';
  const int32_t stop_id = vocab.contains(stop_char) ? vocab.id(stop_char) : -1;
  const int64_t block = model.config().block_size;
  const int64_t max_new = opts.max_new > 0 ? opts.max_new : block;
  const int rows = opts.attempts;

  const std::vector<int32_t> prompt = vocab.encode(rec.prompt);
  std::vector<std::vector<int32_t>> ctx(static_cast<size_t>(rows), prompt);
  std::vector<std::string> emitted(static_cast<size_t>(rows));
  std::vector<bool> done(static_cast<size_t>(rows), false);
  std::vector<RngStream> streams;
  streams.reserve(static_cast<size_t>(rows));
  for (int a = 0; a < rows; ++a)
    streams.push_back(rng.stream("sample/" + rec.prompt + "/" + std::to_string(a)));

  NoGradGuard ng;
  for (int64_t step = 0; step < max_new; ++step) {
    if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
    const int64_t t = std::min<int64_t>(static_cast<int64_t>(ctx[0].size()), block);
    std::vector<int32_t> window(static_cast<size_t>(rows * t));
    for (int r = 0; r < rows; ++r)
      std::copy(ctx[static_cast<size_t>(r)].end() - t, ctx[static_cast<size_t>(r)].end(),
                window.begin() + r * t);
    auto logits = model.forward(IntTensor({rows, t}, std::move(window)));
    const int64_t v = model.config().vocab_size;
    for (int r = 0; r < rows; ++r) {
      auto& c = ctx[static_cast<size_t>(r)];
      if (done[static_cast<size_t>(r)]) {
        c.push_back(0);  // keep row lengths aligned; never sampled or compared
        continue;
      }
      const float* row = logits.data().data() + (r * t + (t - 1)) * v;
      const int32_t next = opts.greedy ? model.argmax_id(row)
                                       : model.sample_id(row, opts.temperature,
                                                         streams[static_cast<size_t>(r)]);
      c.push_back(next);
      emitted[static_cast<size_t>(r)].push_back(vocab.chars()[static_cast<size_t>(next)]);
      if (next == stop_id) done[static_cast<size_t>(r)] = true;
    }
  }

  int successes = 0;
  for (int r = 0; r < rows; ++r) {
    const std::string& e = emitted[static_cast<size_t>(r)];
    std::string got;
    if (arith) {
      const size_t at = e.find('>');
      if (at == std::string::npos) continue;  // never closed the expression
      got = e.substr(0, at + 1);
    } else {
      got = e.substr(0, e.find('\n'));
    }
    if (got == rec.expected) ++successes;
  }
  return successes;
}

}  // namespace

std::vector<int> eval_records(const Model& model, const std::vector<EvalRecord>& records,
                              const Vocab& vocab, const Rng& rng, const EvalOptions& opts) {
  if (vocab.size() != model.config().vocab_size)
    throw TensorError("eval: vocabulary size " + std::to_string(vocab.size()) +
                      " does not match model vocab " + std::to_string(model.config().vocab_size));
  std::vector<int> successes;
  successes.reserve(records.size());
  for (const auto& rec : records) successes.push_back(run_record(model, rec, vocab, rng, opts));
  return successes;
}

double task_accuracy(const std::vector<int>& successes, const std::vector<EvalRecord>& records,
                     RecordTask task, int attempts) {
  int64_t correct = 0, total = 0;
  for (size_t i = 0; i < records.size(); ++i) {
    if (records[i].task != task) continue;
    correct += successes[i];
    total += attempts;
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double task_accuracy_seen(const std::vector<int>& successes, const std::vector<EvalRecord>& records,
                          RecordTask task, int attempts) {
  int64_t correct = 0, total = 0;
  for (size_t i = 0; i < records.size(); ++i) {
    if (records[i].task != task || records[i].holdout) continue;
    correct += successes[i];
    total += attempts;
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

int holdout_correct(const std::vector<int>& successes, const std::vector<EvalRecord>& records) {
  int correct = 0;
  for (size_t i = 0; i < records.size(); ++i)
    if (records[i].holdout) correct += successes[i];
  return correct;
}

double combined_score(double addition_acc, double subtraction_acc, double facts_acc) {
  return (100.0 * addition_acc + 100.0 * subtraction_acc + 50.0 * facts_acc) / 250.0;
}

EvalReport build_eval_report(int64_t iter, const std::vector<EvalRecord>& records,
                             std::vector<int> successes, int attempts) {
  EvalReport rep;
  rep.iter = iter;
  rep.attempts = attempts;
  bool has_add = false, has_sub = false, has_fact = false;
  for (const auto& r : records) {
    has_add |= r.task == RecordTask::Addition;
    has_sub |= r.task == RecordTask::Subtraction;
    has_fact |= r.task == RecordTask::Fact;
  }
  if (has_add) {
    rep.addition_acc = task_accuracy(successes, records, RecordTask::Addition, attempts);
    rep.addition_seen_acc = task_accuracy_seen(successes, records, RecordTask::Addition, attempts);
  }
  if (has_sub) {
    rep.subtraction_acc = task_accuracy(successes, records, RecordTask::Subtraction, attempts);
    rep.subtraction_seen_acc =
        task_accuracy_seen(successes, records, RecordTask::Subtraction, attempts);
  }
  if (has_fact) rep.facts_acc = task_accuracy(successes, records, RecordTask::Fact, attempts);
  rep.holdout_correct = holdout_correct(successes, records);

  // Attempt-weighted mean over whatever records the dataset carries; equals
  // combined_score() when all three tasks are present.
  int64_t correct = 0;
  for (int s : successes) correct += s;
  const int64_t total = static_cast<int64_t>(records.size()) * attempts;
  rep.score = total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  rep.record_successes = std::move(successes);
  return rep;
}

std::pair<double, double> eval_extended_range(const Model& model,
                                              const std::vector<EvalRecord>& records,
                                              const Vocab& vocab, const Rng& rng,
                                              const EvalOptions& opts) {
  const auto successes = eval_records(model, records, vocab, rng, opts);
  return {task_accuracy(successes, records, RecordTask::Addition, opts.attempts),
          task_accuracy(successes, records, RecordTask::Subtraction, opts.attempts)};
}

}  // namespace capmem

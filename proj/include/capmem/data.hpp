#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "capmem/rng.hpp"
#include "capmem/tensor.hpp"

namespace capmem {

// Character-level vocabulary: ids are 0..|chars|-1 in sorted character order.
class Vocab {
 public:
  Vocab() { index_.fill(-1); }

  static Vocab from_text(const std::string& text);

  int64_t size() const { return static_cast<int64_t>(chars_.size()); }
  const std::string& chars() const { return chars_; }

  bool contains(char c) const { return index_[static_cast<unsigned char>(c)] >= 0; }

  int32_t id(char c) const {
    const int32_t i = index_[static_cast<unsigned char>(c)];
    if (i < 0) throw TensorError(std::string("vocab: character not in vocabulary: '") + c + "'");
    return i;
  }

  std::vector<int32_t> encode(const std::string& s) const {
    std::vector<int32_t> out;
    out.reserve(s.size());
    for (char c : s) out.push_back(id(c));
    return out;
  }

  std::string decode(const std::vector<int32_t>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int32_t i : ids) {
      if (i < 0 || i >= size())
        throw TensorError("vocab: id out of range: " + std::to_string(i));
      out.push_back(chars_[static_cast<size_t>(i)]);
    }
    return out;
  }

 private:
  std::string chars_;  // sorted, unique
  std::array<int32_t, 256> index_{};
};

enum class TaskKind { Arithmetic, Facts, Combined };

enum class RecordTask { Addition, Subtraction, Fact };

inline const char* record_task_name(RecordTask t) {
  switch (t) {
    case RecordTask::Addition: return "addition";
    case RecordTask::Subtraction: return "subtraction";
    case RecordTask::Fact: return "fact";
  }
  return "?";
}

// One evaluation prompt. prompt + expected (plus padding) reconstructs a
// corpus line; holdout marks the four excluded (5,7) expressions.
struct EvalRecord {
  std::string prompt;
  std::string expected;
  RecordTask task = RecordTask::Addition;
  bool holdout = false;
};

struct TaskDataset {
  std::string name;
  TaskKind kind = TaskKind::Arithmetic;
  std::string text;  // training text; validation uses the same text
  int64_t block_size = 0;
  int64_t batch_size = 0;
  Vocab vocab;
  std::vector<EvalRecord> eval_records;
};

// The four expressions withheld from training: both operand orders of (5,7)
// under both operators.
inline std::vector<std::pair<int, int>> default_holdout_pairs() {
  return {{5, 7}, {7, 5}};
}

// Single-digit addition/subtraction corpus: lines "<a+b=c>" space-padded to 8
// characters plus a newline, holdout pairs excluded from the text but present
// (flagged) in the eval records. Block 9, batch 882.
TaskDataset gen_arithmetic(const std::vector<std::pair<int, int>>& holdout_pairs = default_holdout_pairs());

// Fifty "Capital of X is Y" lines from the bundled gazetteer, every line at
// most 24 characters including the newline. Block 24, batch 576.
TaskDataset gen_capitals();

// Arithmetic followed by capitals; union vocabulary; block 24, batch 576.
TaskDataset gen_combined();

// Extended-range arithmetic probe: all pairs in [lo, hi] for both operators,
// excluding pairs where both operands are single-digit. Evaluation-only.
std::vector<EvalRecord> gen_extended_arithmetic(int lo = 0, int hi = 19);

// The raw bundled facts corpus (one "Capital of X is Y" line per entry).
const std::string& capitals_corpus_text();

// Uniform random block windows: x[i] is a block_size window of the encoded
// text, y[i] the same window shifted one character ahead. Offsets depend only
// on the stream, so a given (seed, label) always yields the same batch.
std::pair<IntTensor, IntTensor> sample_batch(const TaskDataset& ds, RngStream& stream);

}  // namespace capmem

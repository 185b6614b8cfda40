#include "capmem/data.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace capmem {

namespace detail {
const std::string& embedded_capitals_corpus();
}

Vocab Vocab::from_text(const std::string& text) {
  std::set<char> uniq(text.begin(), text.end());
  Vocab v;
  v.chars_.assign(uniq.begin(), uniq.end());
  for (size_t i = 0; i < v.chars_.size(); ++i)
    v.index_[static_cast<unsigned char>(v.chars_[i])] = static_cast<int32_t>(i);
  return v;
}

namespace {

constexpr int kArithLineWidth = 9;  // 8 content characters + newline

std::string arith_line(int a, char op, int b) {
  const int c = (op == '+') ? a + b : a - b;
  std::string line = "<" + std::to_string(a) + op + std::to_string(b) + "=" + std::to_string(c) + ">";
  while (line.size() < static_cast<size_t>(kArithLineWidth - 1)) line.push_back(' ');
  line.push_back('\n');
  return line;
}

bool is_holdout(int a, int b, const std::vector<std::pair<int, int>>& holdout) {
  return std::find(holdout.begin(), holdout.end(), std::make_pair(a, b)) != holdout.end();
}

}  // namespace

TaskDataset gen_arithmetic(const std::vector<std::pair<int, int>>& holdout_pairs) {
  TaskDataset ds;
  ds.name = "arithmetic";
  ds.kind = TaskKind::Arithmetic;
  ds.block_size = 9;
  ds.batch_size = 882;
  for (const auto& [a, b] : holdout_pairs)
    if (a < 0 || a > 9 || b < 0 || b > 9)
      throw TensorError("gen_arithmetic: holdout operand out of range: " + std::to_string(a) +
                        "," + std::to_string(b));
  for (char op : {'+', '-'}) {
    for (int a = 0; a <= 9; ++a) {
      for (int b = 0; b <= 9; ++b) {
        const bool held = is_holdout(a, b, holdout_pairs);
        if (!held) ds.text += arith_line(a, op, b);
        const int c = (op == '+') ? a + b : a - b;
        EvalRecord rec;
        rec.prompt = "<" + std::to_string(a) + op + std::to_string(b) + "=";
        rec.expected = std::to_string(c) + ">";
        rec.task = (op == '+') ? RecordTask::Addition : RecordTask::Subtraction;
        rec.holdout = held;
        ds.eval_records.push_back(std::move(rec));
      }
    }
  }
  ds.vocab = Vocab::from_text(ds.text);
  return ds;
}

TaskDataset gen_capitals() {
  TaskDataset ds;
  ds.name = "capitals";
  ds.kind = TaskKind::Facts;
  ds.block_size = 24;
  ds.batch_size = 576;
  ds.text = detail::embedded_capitals_corpus();

  // Parse records back out of the corpus lines.
  const std::string prefix = "Capital of ";
  const std::string sep = " is ";
  size_t pos = 0;
  while (pos < ds.text.size()) {
    size_t nl = ds.text.find('\n', pos);
    if (nl == std::string::npos) nl = ds.text.size();
    const std::string line = ds.text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    const size_t sep_at = line.rfind(sep);
    if (line.rfind(prefix, 0) != 0 || sep_at == std::string::npos)
      throw TensorError("gen_capitals: malformed corpus line: " + line);
    EvalRecord rec;
    rec.prompt = line.substr(0, sep_at + sep.size());
    rec.expected = line.substr(sep_at + sep.size());
    rec.task = RecordTask::Fact;
    rec.holdout = false;
    ds.eval_records.push_back(std::move(rec));
  }
  ds.vocab = Vocab::from_text(ds.text);
  return ds;
}

TaskDataset gen_combined() {
  TaskDataset arith = gen_arithmetic();
  TaskDataset facts = gen_capitals();
  TaskDataset ds;
  ds.name = "combined";
  ds.kind = TaskKind::Combined;
  ds.block_size = 24;
  ds.batch_size = 576;
  ds.text = arith.text + facts.text;
  ds.eval_records = arith.eval_records;
  ds.eval_records.insert(ds.eval_records.end(), facts.eval_records.begin(),
                         facts.eval_records.end());
  ds.vocab = Vocab::from_text(ds.text);
  return ds;
}

std::vector<EvalRecord> gen_extended_arithmetic(int lo, int hi) {
  if (lo > hi) throw TensorError("gen_extended_arithmetic: lo must be <= hi");
  std::vector<EvalRecord> records;
  for (char op : {'+', '-'}) {
    for (int a = lo; a <= hi; ++a) {
      for (int b = lo; b <= hi; ++b) {
        if (a <= 9 && b <= 9) continue;  // single-digit pairs are the training domain
        const int c = (op == '+') ? a + b : a - b;
        EvalRecord rec;
        rec.prompt = "<" + std::to_string(a) + op + std::to_string(b) + "=";
        rec.expected = std::to_string(c) + ">";
        rec.task = (op == '+') ? RecordTask::Addition : RecordTask::Subtraction;
        rec.holdout = false;
        records.push_back(std::move(rec));
      }
    }
  }
  return records;
}

const std::string& capitals_corpus_text() { return detail::embedded_capitals_corpus(); }

std::pair<IntTensor, IntTensor> sample_batch(const TaskDataset& ds, RngStream& stream) {
  const int64_t len = static_cast<int64_t>(ds.text.size());
  const int64_t block = ds.block_size;
  if (len <= block + 1)
    throw TensorError("sample_batch: corpus of " + std::to_string(len) +
                      " chars is too short for block size " + std::to_string(block));
  const int64_t batch = ds.batch_size;
  std::vector<int32_t> x(static_cast<size_t>(batch * block));
  std::vector<int32_t> y(static_cast<size_t>(batch * block));
  for (int64_t i = 0; i < batch; ++i) {
    const int64_t off = stream.uniform_int(len - block);
    for (int64_t t = 0; t < block; ++t) {
      x[static_cast<size_t>(i * block + t)] = ds.vocab.id(ds.text[static_cast<size_t>(off + t)]);
      y[static_cast<size_t>(i * block + t)] =
          ds.vocab.id(ds.text[static_cast<size_t>(off + t + 1)]);
    }
  }
  return {IntTensor({batch, block}, std::move(x)), IntTensor({batch, block}, std::move(y))};
}

}  // namespace capmem

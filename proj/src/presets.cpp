#include "capmem/presets.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

namespace capmem {

const char* task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Arithmetic: return "arithmetic";
    case TaskKind::Facts: return "facts";
    case TaskKind::Combined: return "combined";
  }
  return "?";
}

TaskKind task_kind_from_name(const std::string& name) {
  if (name == "arithmetic") return TaskKind::Arithmetic;
  if (name == "facts") return TaskKind::Facts;
  if (name == "combined") return TaskKind::Combined;
  throw TensorError("config: unknown task '" + name + "'");
}

namespace {

struct SizeSpec {
  const char* key;    // preset id fragment
  const char* label;  // display label
  int64_t n, layers, heads, m;
};

constexpr SizeSpec kSizes[] = {
    {"n14", "n14", 14, 1, 1, 1},
    {"n28", "n28", 28, 1, 1, 1},
    {"n56", "n56", 56, 1, 1, 1},
    {"mlt", "MLT", 384, 6, 6, 4},
};

struct TaskSpec {
  const char* key;
  TaskKind kind;
  int64_t block, batch;
};

constexpr TaskSpec kTasks[] = {
    {"arith", TaskKind::Arithmetic, 9, 882},
    {"facts", TaskKind::Facts, 24, 576},
    {"combined", TaskKind::Combined, 24, 576},
};

ExperimentPreset make_preset(const SizeSpec& size, const TaskSpec& task, RegMode reg) {
  const bool mlt = size.n == 384;
  ExperimentPreset p;
  p.id = std::string(task.key) + "-" + size.key + "-" + reg_mode_name(reg);
  p.size_label = size.label;
  p.task = task.kind;
  p.reg = reg;

  p.model.n_embd = size.n;
  p.model.n_layer = size.layers;
  p.model.n_head = size.heads;
  p.model.mlp_expansion = size.m;
  p.model.block_size = task.block;
  p.model.vocab_size = 0;  // from the dataset

  p.train.learning_rate = mlt ? 1e-5 : 1e-2;
  p.train.min_lr = mlt ? 1e-6 : 1e-4;
  p.train.weight_decay = mlt ? 0.1 : 0.0;
  double drop = mlt ? 0.2 : 0.0;
  if (reg == RegMode::Controlled) {
    drop = 0.0;
    p.train.weight_decay = 0.1;
  }
  p.model.dropout = drop;
  p.train.dropout = drop;
  p.train.batch_size = task.batch;
  p.train.block_size = task.block;
  p.notes = std::string(size.label) + " on " + task_kind_name(task.kind) +
            (reg == RegMode::Controlled ? ", controlled regularization" : ", paper settings");
  return p;
}

std::vector<ExperimentPreset> build_presets() {
  std::vector<ExperimentPreset> out;
  for (const auto& task : kTasks)
    for (const auto& size : kSizes)
      for (RegMode reg : {RegMode::Paper, RegMode::Controlled})
        out.push_back(make_preset(size, task, reg));

  // Long-schedule probe: same MLT arithmetic setup, only the learning-rate
  // schedule changes and training runs for 1.5M iterations.
  ExperimentPreset grok = make_preset(kSizes[3], kTasks[0], RegMode::Paper);
  grok.id = "grokking-mlt";
  grok.train.learning_rate = 1e-6;
  grok.train.min_lr = 1e-7;
  grok.train.lr_decay_iters = 10000000;
  grok.train.max_iters = 1500000;
  grok.notes = "MLT on arithmetic, stretched schedule, 1.5M iterations";
  out.push_back(grok);

  ExperimentPreset ext = make_preset(kSizes[0], kTasks[0], RegMode::Paper);
  ext.id = "extended-range-n14";
  ext.extended_probe = true;
  ext.notes = "n14 on arithmetic, then 0-19 extended-range evaluation";
  out.push_back(ext);
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

const std::vector<ExperimentPreset>& all_presets() {
  static const std::vector<ExperimentPreset> presets = build_presets();
  return presets;
}

const ExperimentPreset& find_preset(const std::string& id) {
  for (const auto& p : all_presets())
    if (p.id == id) return p;
  throw TensorError("unknown preset '" + id + "' (see list-presets)");
}

const ExperimentPreset& grokking_preset() { return find_preset("grokking-mlt"); }

std::map<std::string, std::string> preset_key_values(const ExperimentPreset& p) {
  std::map<std::string, std::string> kv;
  kv["preset"] = p.id;
  kv["size_label"] = p.size_label;
  kv["task"] = task_kind_name(p.task);
  kv["reg"] = reg_mode_name(p.reg);
  kv["extended_probe"] = p.extended_probe ? "true" : "false";
  kv["notes"] = p.notes;
  kv["model.n_embd"] = std::to_string(p.model.n_embd);
  kv["model.n_layer"] = std::to_string(p.model.n_layer);
  kv["model.n_head"] = std::to_string(p.model.n_head);
  kv["model.mlp_expansion"] = std::to_string(p.model.mlp_expansion);
  kv["model.block_size"] = std::to_string(p.model.block_size);
  kv["model.vocab_size"] = std::to_string(p.model.vocab_size);
  kv["model.dropout"] = fmt_double(p.model.dropout);
  kv["model.use_bias"] = p.model.use_bias ? "true" : "false";
  kv["model.tie_output_head"] = p.model.tie_output_head ? "true" : "false";
  kv["train.learning_rate"] = fmt_double(p.train.learning_rate);
  kv["train.min_lr"] = fmt_double(p.train.min_lr);
  kv["train.max_iters"] = std::to_string(p.train.max_iters);
  kv["train.lr_decay_iters"] = std::to_string(p.train.lr_decay_iters);
  kv["train.warmup_iters"] = std::to_string(p.train.warmup_iters);
  kv["train.beta1"] = fmt_double(p.train.beta1);
  kv["train.beta2"] = fmt_double(p.train.beta2);
  kv["train.eps"] = fmt_double(p.train.eps);
  kv["train.weight_decay"] = fmt_double(p.train.weight_decay);
  kv["train.dropout"] = fmt_double(p.train.dropout);
  kv["train.grad_clip"] = fmt_double(p.train.grad_clip);
  kv["train.eval_interval"] = std::to_string(p.train.eval_interval);
  kv["train.eval_iters"] = std::to_string(p.train.eval_iters);
  kv["train.batch_size"] = std::to_string(p.train.batch_size);
  kv["train.block_size"] = std::to_string(p.train.block_size);
  kv["train.seed"] = std::to_string(p.train.seed);
  return kv;
}

std::string serialize_preset(const ExperimentPreset& p) {
  std::ostringstream os;
  os << "# capmem config schema 1\n";
  for (const auto& [k, v] : preset_key_values(p)) os << k << " = " << v << "\n";
  return os.str();
}

namespace {

int64_t parse_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw TensorError("config: field '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

uint64_t parse_uint(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw TensorError("config: field '" + key + "' expects an unsigned integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw TensorError("config: field '" + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw TensorError("config: field '" + key + "' expects true/false, got '" + v + "'");
}

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

ExperimentPreset parse_preset(const std::string& text) {
  ExperimentPreset p;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw TensorError("config: malformed line '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "preset") p.id = val;
    else if (key == "size_label") p.size_label = val;
    else if (key == "task") p.task = task_kind_from_name(val);
    else if (key == "reg") {
      if (val == "paper") p.reg = RegMode::Paper;
      else if (val == "controlled") p.reg = RegMode::Controlled;
      else throw TensorError("config: field 'reg' expects paper/controlled, got '" + val + "'");
    }
    else if (key == "extended_probe") p.extended_probe = parse_bool(key, val);
    else if (key == "notes") p.notes = val;
    else if (key == "model.n_embd") p.model.n_embd = parse_int(key, val);
    else if (key == "model.n_layer") p.model.n_layer = parse_int(key, val);
    else if (key == "model.n_head") p.model.n_head = parse_int(key, val);
    else if (key == "model.mlp_expansion") p.model.mlp_expansion = parse_int(key, val);
    else if (key == "model.block_size") p.model.block_size = parse_int(key, val);
    else if (key == "model.vocab_size") p.model.vocab_size = parse_int(key, val);
    else if (key == "model.dropout") p.model.dropout = parse_double(key, val);
    else if (key == "model.use_bias") p.model.use_bias = parse_bool(key, val);
    else if (key == "model.tie_output_head") p.model.tie_output_head = parse_bool(key, val);
    else if (key == "train.learning_rate") p.train.learning_rate = parse_double(key, val);
    else if (key == "train.min_lr") p.train.min_lr = parse_double(key, val);
    else if (key == "train.max_iters") p.train.max_iters = parse_int(key, val);
    else if (key == "train.lr_decay_iters") p.train.lr_decay_iters = parse_int(key, val);
    else if (key == "train.warmup_iters") p.train.warmup_iters = parse_int(key, val);
    else if (key == "train.beta1") p.train.beta1 = parse_double(key, val);
    else if (key == "train.beta2") p.train.beta2 = parse_double(key, val);
    else if (key == "train.eps") p.train.eps = parse_double(key, val);
    else if (key == "train.weight_decay") p.train.weight_decay = parse_double(key, val);
    else if (key == "train.dropout") p.train.dropout = parse_double(key, val);
    else if (key == "train.grad_clip") p.train.grad_clip = parse_double(key, val);
    else if (key == "train.eval_interval") p.train.eval_interval = parse_int(key, val);
    else if (key == "train.eval_iters") p.train.eval_iters = parse_int(key, val);
    else if (key == "train.batch_size") p.train.batch_size = parse_int(key, val);
    else if (key == "train.block_size") p.train.block_size = parse_int(key, val);
    else if (key == "train.seed") p.train.seed = parse_uint(key, val);
    else throw TensorError("config: unknown field '" + key + "'");
  }
  if (p.model.dropout != p.train.dropout)
    throw TensorError("config: model.dropout and train.dropout disagree");
  if (p.model.block_size != p.train.block_size)
    throw TensorError("config: model.block_size and train.block_size disagree");
  return p;
}

}  // namespace capmem

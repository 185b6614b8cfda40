#include "capmem/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "capmem/runner.hpp"
#include "capmem/tensor.hpp"

namespace fs = std::filesystem;

namespace capmem {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::optional<double> opt_field(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

struct RunInfo {
  std::string dir;
  std::string name;  // directory basename
  std::map<std::string, std::string> summary;
  std::vector<MetricsRow> rows;
};

int size_rank(const std::string& label) {
  if (label == "n14") return 0;
  if (label == "n28") return 1;
  if (label == "n56") return 2;
  if (label == "MLT") return 3;
  return 4;
}

int task_rank(const std::string& task) {
  if (task == "arithmetic") return 0;
  if (task == "facts") return 1;
  if (task == "combined") return 2;
  return 3;
}

std::string pct(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f%%", std::stod(it->second) * 100.0);
  return buf;
}

std::string get_or(const std::map<std::string, std::string>& kv, const std::string& key,
                   const std::string& fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

std::string holdout_cell(const std::map<std::string, std::string>& kv) {
  auto it = kv.find("best.holdout_correct");
  if (it == kv.end()) return "-";
  return it->second + "/40";
}

std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string series_csv(const RunInfo& run) {
  std::ostringstream os;
  os << "# capmem series schema 1\n";
  os << "iter,addition_acc,subtraction_acc,facts_acc,combined,holdout_correct,val_loss,lr,both_100\n";
  for (const auto& r : run.rows) {
    const bool both = r.addition_acc && r.subtraction_acc && *r.addition_acc == 1.0 &&
                      *r.subtraction_acc == 1.0;
    os << r.iter << ',' << (r.addition_acc ? fmt_num(*r.addition_acc) : "") << ','
       << (r.subtraction_acc ? fmt_num(*r.subtraction_acc) : "") << ','
       << (r.facts_acc ? fmt_num(*r.facts_acc) : "") << ',' << fmt_num(r.combined) << ','
       << r.holdout_correct << ',' << fmt_num(r.val_loss) << ',' << fmt_num(r.lr) << ','
       << (both ? 1 : 0) << '\n';
  }
  return os.str();
}

// Minimal static plot: accuracy curves against iteration, with dots where
// both arithmetic curves are at 100%.
std::string series_svg(const RunInfo& run) {
  const double w = 720, h = 360, ml = 50, mr = 15, mt = 15, mb = 35;
  int64_t max_iter = 1;
  for (const auto& r : run.rows) max_iter = std::max(max_iter, r.iter);
  auto sx = [&](double iter) { return ml + (w - ml - mr) * (iter / static_cast<double>(max_iter)); };
  auto sy = [&](double acc) { return mt + (h - mt - mb) * (1.0 - acc); };

  std::ostringstream os;
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";
  os << "<line x1='" << ml << "' y1='" << sy(0) << "' x2='" << w - mr << "' y2='" << sy(0)
     << "' stroke='black'/>\n";
  os << "<line x1='" << ml << "' y1='" << sy(0) << "' x2='" << ml << "' y2='" << sy(1)
     << "' stroke='black'/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double acc = tick / 4.0;
    os << "<text x='" << ml - 8 << "' y='" << sy(acc) + 4
       << "' font-size='11' text-anchor='end'>" << static_cast<int>(acc * 100) << "%</text>\n";
  }
  os << "<text x='" << (ml + w - mr) / 2 << "' y='" << h - 8
     << "' font-size='11' text-anchor='middle'>iteration (max " << max_iter << ")</text>\n";

  struct Curve {
    const char* color;
    const char* label;
    std::optional<double> MetricsRow::* field;
  };
  const Curve curves[] = {
      {"#1f77b4", "addition", &MetricsRow::addition_acc},
      {"#ff7f0e", "subtraction", &MetricsRow::subtraction_acc},
      {"#2ca02c", "facts", &MetricsRow::facts_acc},
  };
  double legend_x = ml + 10;
  for (const auto& c : curves) {
    std::ostringstream pts;
    bool any = false;
    for (const auto& r : run.rows) {
      const auto& v = r.*(c.field);
      if (!v) continue;
      pts << sx(static_cast<double>(r.iter)) << ',' << sy(*v) << ' ';
      any = true;
    }
    if (!any) continue;
    os << "<polyline fill='none' stroke='" << c.color << "' stroke-width='1.5' points='"
       << pts.str() << "'/>\n";
    os << "<text x='" << legend_x << "' y='" << mt + 12 << "' font-size='11' fill='" << c.color
       << "'>" << c.label << "</text>\n";
    legend_x += 90;
  }
  for (const auto& r : run.rows) {
    if (r.addition_acc && r.subtraction_acc && *r.addition_acc == 1.0 && *r.subtraction_acc == 1.0)
      os << "<circle cx='" << sx(static_cast<double>(r.iter)) << "' cy='" << sy(1.0)
         << "' r='3' fill='red'/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw TensorError("report: cannot open metrics csv: " + path);
  std::vector<MetricsRow> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("iter,", 0) == 0) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 8) throw TensorError("report: malformed metrics row: " + line);
    MetricsRow r;
    r.iter = std::stoll(f[0]);
    r.addition_acc = opt_field(f[1]);
    r.subtraction_acc = opt_field(f[2]);
    r.facts_acc = opt_field(f[3]);
    r.combined = std::stod(f[4]);
    r.holdout_correct = std::stoi(f[5]);
    r.val_loss = std::stod(f[6]);
    r.lr = std::stod(f[7]);
    rows.push_back(r);
  }
  return rows;
}

Report build_report(const std::vector<std::string>& run_dirs) {
  std::vector<RunInfo> runs;
  for (const auto& dir : run_dirs) {
    RunInfo info;
    info.dir = dir;
    info.name = fs::path(dir).filename().string();
    if (info.name.empty()) info.name = fs::path(dir).parent_path().filename().string();
    info.summary = read_summary(dir);
    const fs::path csv = fs::path(dir) / "metrics.csv";
    if (fs::exists(csv)) info.rows = read_metrics_csv(csv.string());
    runs.push_back(std::move(info));
  }
  std::sort(runs.begin(), runs.end(), [](const RunInfo& a, const RunInfo& b) {
    const auto ka = std::tuple(task_rank(get_or(a.summary, "task", "")),
                               get_or(a.summary, "reg", ""),
                               size_rank(get_or(a.summary, "size_label", "")), a.name);
    const auto kb = std::tuple(task_rank(get_or(b.summary, "task", "")),
                               get_or(b.summary, "reg", ""),
                               size_rank(get_or(b.summary, "size_label", "")), b.name);
    return ka < kb;
  });

  Report rep;
  std::ostringstream md;
  md << "# Results\n";

  struct Section {
    const char* task;
    const char* reg;
    const char* title;
  };
  const Section sections[] = {
      {"arithmetic", "paper", "Arithmetic"},
      {"arithmetic", "controlled", "Arithmetic (controlled regularization)"},
      {"facts", "paper", "Factual recall"},
      {"facts", "controlled", "Factual recall (controlled regularization)"},
      {"combined", "paper", "Combined"},
      {"combined", "controlled", "Combined (controlled regularization)"},
  };
  for (const auto& sec : sections) {
    std::vector<const RunInfo*> group;
    for (const auto& r : runs)
      if (get_or(r.summary, "task", "") == sec.task && get_or(r.summary, "reg", "") == sec.reg)
        group.push_back(&r);
    if (group.empty()) continue;
    md << "\n## " << sec.title << "\n\n";
    const bool facts_only = std::string(sec.task) == "facts";
    const bool combined = std::string(sec.task) == "combined";
    if (facts_only) {
      md << "| Model | Parameters | Facts Accuracy |\n|---|---|---|\n";
    } else if (combined) {
      md << "| Model | Parameters | Addition | Subtraction | Facts | Combined | (5,7) |\n"
         << "|---|---|---|---|---|---|---|\n";
    } else {
      md << "| Model | Parameters | Addition | Subtraction | (5,7) |\n|---|---|---|---|---|\n";
    }
    for (const auto* r : group) {
      const auto& kv = r->summary;
      md << "| " << get_or(kv, "size_label", r->name) << " | "
         << get_or(kv, "params_reported_pretty", "-") << " | ";
      if (facts_only) {
        md << pct(kv, "best.facts_acc") << " |\n";
      } else if (combined) {
        md << pct(kv, "best.addition_acc") << " | " << pct(kv, "best.subtraction_acc") << " | "
           << pct(kv, "best.facts_acc") << " | " << pct(kv, "best.score") << " | "
           << holdout_cell(kv) << " |\n";
      } else {
        md << pct(kv, "best.addition_acc") << " | " << pct(kv, "best.subtraction_acc") << " | "
           << holdout_cell(kv) << " |\n";
      }
    }
  }

  // Extrapolation flags: checkpoints where both arithmetic curves hit 100%.
  std::ostringstream flags;
  for (const auto& r : runs) {
    std::vector<int64_t> iters;
    for (const auto& row : r.rows)
      if (row.addition_acc && row.subtraction_acc && *row.addition_acc == 1.0 &&
          *row.subtraction_acc == 1.0)
        iters.push_back(row.iter);
    if (iters.empty()) continue;
    flags << "- " << r.name << ":";
    for (int64_t it : iters) flags << ' ' << it;
    flags << '\n';
  }
  if (!flags.str().empty())
    md << "\n## Checkpoints with both arithmetic curves at 100%\n\n" << flags.str();

  for (const auto& r : runs) {
    if (r.rows.empty()) continue;
    rep.files.push_back({r.name + "-series.csv", series_csv(r)});
    rep.files.push_back({r.name + "-accuracy.svg", series_svg(r)});
  }
  rep.markdown = md.str();
  return rep;
}

void write_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  const Report rep = build_report(run_dirs);
  fs::create_directories(out_dir);
  std::ofstream(fs::path(out_dir) / "report.md") << rep.markdown;
  for (const auto& f : rep.files) std::ofstream(fs::path(out_dir) / f.name) << f.content;
}

}  // namespace capmem

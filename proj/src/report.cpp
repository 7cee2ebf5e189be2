#include "gradsed/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "gradsed/experiment.hpp"

namespace gradsed::report {

namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr const char* kCouplingHeader =
    "run_id,op,estimator,step,grok_step,W,K,eps_rel,R1,R2,R3,Rbar,A_v1,A_v2,A_v3,A_rand_median,rank90";
constexpr const char* kAblationHeader = "run_id,axis,value,peak_R1,peak_Rbar,peak_step";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double num(const std::string& s) { return s.empty() ? kNaN : std::stod(s); }

std::string fmt(double v, int digits = 2) {
  if (!std::isfinite(v)) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

double mean(std::span<const double> v) {
  if (v.empty()) return kNaN;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

int op_rank(const std::string& op) {
  static const std::vector<std::string> order{"add", "sub", "mul", "sq"};
  const auto it = std::find(order.begin(), order.end(), op);
  return it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin());
}

int estimator_rank(const std::string& e) {
  static const std::vector<std::string> order{"update", "gradient", "per_op", "per_example"};
  const auto it = std::find(order.begin(), order.end(), e);
  return it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin());
}

bool op_less(const std::string& a, const std::string& b) {
  return std::make_pair(op_rank(a), a) < std::make_pair(op_rank(b), b);
}

// ---- SVG ----

struct Series {
  std::string name;
  std::vector<double> x, y;
  bool dashed = false;
};

const char* colour(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  return palette[i % (sizeof palette / sizeof palette[0])];
}

std::string svg_plot(const std::string& title, const std::vector<Series>& series, bool log_y,
                     std::optional<double> marker) {
  const double w = 640, h = 360, left = 60, right = 150, top = 30, bottom = 40;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  const auto ty = [&](double v) { return log_y ? std::log10(v) : v; };
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i]) || (log_y && s.y[i] <= 0)) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
  const auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * (h - top - bottom); };
  const auto ylabel = [&](double y) { return log_y ? fmt_g(std::pow(10.0, y)) : fmt_g(y); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << title << (log_y ? " (log scale)" : "") << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << fmt(w - left - right) << "\" height=\""
    << fmt(h - top - bottom) << "\" fill=\"none\" stroke=\"#444\"/>\n";
  o << "<text x=\"" << left - 4 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\">" << ylabel(y1) << "</text>\n";
  o << "<text x=\"" << left - 4 << "\" y=\"" << h - bottom << "\" text-anchor=\"end\">" << ylabel(y0) << "</text>\n";
  o << "<text x=\"" << left << "\" y=\"" << h - bottom + 14 << "\">" << fmt_g(x0) << "</text>\n";
  o << "<text x=\"" << w - right << "\" y=\"" << h - bottom + 14 << "\" text-anchor=\"end\">" << fmt_g(x1) << "</text>\n";
  o << "<text x=\"" << (w - right + left) / 2 << "\" y=\"" << h - 8 << "\" text-anchor=\"middle\">step</text>\n";
  if (marker && *marker >= x0 && *marker <= x1) {
    const std::string mx = fmt(px(*marker));
    o << "<line x1=\"" << mx << "\" y1=\"" << top << "\" x2=\"" << mx << "\" y2=\"" << h - bottom
      << "\" stroke=\"#000\" stroke-dasharray=\"2,3\"/>\n";
    o << "<text x=\"" << mx << "\" y=\"" << top - 3 << "\" text-anchor=\"middle\">grok " << fmt_g(*marker) << "</text>\n";
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    o << "<polyline fill=\"none\" stroke=\"" << colour(si) << "\" stroke-width=\"1.5\"";
    if (s.dashed) o << " stroke-dasharray=\"5,3\"";
    o << " points=\"";
    bool first = true;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i]) || (log_y && s.y[i] <= 0)) continue;
      if (!first) o << ' ';
      o << fmt(px(s.x[i])) << ',' << fmt(py(ty(s.y[i])));
      first = false;
    }
    o << "\"/>\n";
    const double ly = top + 14.0 * static_cast<double>(si + 1);
    o << "<line x1=\"" << w - right + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << w - right + 30 << "\" y2=\"" << ly - 4
      << "\" stroke=\"" << colour(si) << "\"" << (s.dashed ? " stroke-dasharray=\"5,3\"" : "") << "/>\n";
    o << "<text x=\"" << w - right + 34 << "\" y=\"" << ly << "\">" << s.name << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string file_safe(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  return s;
}

// ---- sections ----

void coupling_section(std::ostringstream& md, const Inputs& in) {
  if (in.coupling.empty()) return;
  md << "## Coupling peaks by op\n\n";
  // one table per (estimator, W, K, eps_rel)
  using Key = std::tuple<int, std::string, std::size_t, std::size_t, double>;
  std::map<Key, std::vector<const CouplingRow*>> groups;
  for (const auto& r : in.coupling)
    groups[{estimator_rank(r.estimator), r.estimator, r.window, r.k, r.eps_rel}].push_back(&r);

  for (const auto& [key, rows] : groups) {
    const auto& [rank, est, W, K, eps] = key;
    md << "### " << est << " SED (W=" << W << ", K=" << K << ", eps_rel=" << fmt_g(eps) << ")\n\n";
    std::set<std::string> runs;
    std::set<std::string, bool (*)(const std::string&, const std::string&)> ops(op_less);
    // (op, run) -> rows in step order
    std::map<std::pair<std::string, std::string>, std::vector<const CouplingRow*>> cells;
    for (const auto* r : rows) {
      runs.insert(r->run_id);
      ops.insert(r->op);
      cells[{r->op, r->run_id}].push_back(r);
    }
    for (auto& [_, v] : cells)
      std::sort(v.begin(), v.end(), [](const CouplingRow* a, const CouplingRow* b) { return a->step < b->step; });

    md << "| op |";
    for (const auto& run : runs) md << ' ' << run << " peak |";
    md << " mean peak Rbar | mean final Rbar | peak R1 (max) |\n|---|";
    for (std::size_t i = 0; i < runs.size(); ++i) md << "---:|";
    md << "---:|---:|---:|\n";
    std::vector<double> mean_peaks, mean_finals;
    for (const auto& op : ops) {
      md << "| " << op << " |";
      std::vector<double> peaks, finals;
      double r1 = 0.0;
      for (const auto& run : runs) {
        const auto it = cells.find({op, run});
        if (it == cells.end()) {
          md << " |";
          continue;
        }
        double peak = 0.0;
        for (const auto* r : it->second) {
          peak = std::max(peak, r->r_bar);
          if (!r->ratios.empty() && std::isfinite(r->ratios[0])) r1 = std::max(r1, r->ratios[0]);
        }
        peaks.push_back(peak);
        finals.push_back(it->second.back()->r_bar);
        md << ' ' << fmt(peak) << " |";
      }
      mean_peaks.push_back(mean(peaks));
      mean_finals.push_back(mean(finals));
      md << " **" << fmt(mean_peaks.back()) << "** | " << fmt(mean_finals.back()) << " | " << fmt(r1) << " |\n";
    }
    if (ops.size() > 1) {
      md << "| spread max/min |";
      for (std::size_t i = 0; i < runs.size(); ++i) md << " |";
      md << ' ' << fmt(spread(mean_peaks)) << "x | " << fmt(spread(mean_finals)) << "x | |\n";
    }
    md << '\n';

    bool any_rank = false;
    for (const auto* r : rows) any_rank = any_rank || r->rank90 > 0;
    if (any_rank) {
      md << "| run | op | rank-90 first | rank-90 last | rank-90 range |\n|---|---|---:|---:|---|\n";
      for (const auto& [k2, v] : cells) {
        std::size_t lo = std::numeric_limits<std::size_t>::max(), hi = 0;
        for (const auto* r : v) lo = std::min(lo, r->rank90), hi = std::max(hi, r->rank90);
        if (hi == 0) continue;  // analysed without rank-90
        md << "| " << k2.second << " | " << k2.first << " | " << v.front()->rank90 << " | " << v.back()->rank90 << " | "
           << lo << "-" << hi << " |\n";
      }
      md << '\n';
    }
  }
}

void ablation_section(std::ostringstream& md, const Inputs& in) {
  if (in.ablation.empty()) return;
  md << "## Ablations (gradient SED)\n\n| run | axis | value | peak R1 | peak Rbar | R1 peak step |\n"
        "|---|---|---:|---:|---:|---:|\n";
  std::vector<const AblationEntry*> rows;
  for (const auto& a : in.ablation) rows.push_back(&a);
  std::stable_sort(rows.begin(), rows.end(), [](const AblationEntry* a, const AblationEntry* b) {
    return std::tie(a->run_id, a->axis, a->value) < std::tie(b->run_id, b->axis, b->value);
  });
  for (const auto* a : rows)
    md << "| " << a->run_id << " | " << a->axis << " | " << fmt_g(a->value) << " | " << fmt(a->peak_r1) << " | "
       << fmt(a->peak_rbar) << " | " << a->peak_step << " |\n";
  md << '\n';
}

void intervention_section(std::ostringstream& md, const Inputs& in) {
  if (in.interventions.empty()) return;
  md << "## Interventions\n\nGrok step per seed; speedups are mean(A) / mean(mode).\n\n";
  using Key = std::tuple<std::string, std::string, double>;  // flavor, op, weight decay
  std::map<Key, std::vector<const InterventionEntry*>> groups;
  for (const auto& e : in.interventions) groups[{e.flavor, e.op, e.weight_decay}].push_back(&e);
  for (const auto& [key, entries] : groups) {
    const auto& [flavor, op, wd] = key;
    md << "### " << flavor << "-projected, " << op << ", weight decay " << fmt_g(wd) << "\n\n";
    std::set<std::uint64_t> seeds;
    std::set<std::string> modes;
    std::map<std::pair<std::string, std::uint64_t>, const InterventionEntry*> cell;
    for (const auto* e : entries) {
      seeds.insert(e->seed);
      modes.insert(e->mode);
      if (!cell.emplace(std::make_pair(e->mode, e->seed), e).second)
        throw std::runtime_error("report: duplicate intervention " + e->mode + " seed " + std::to_string(e->seed) +
                                 " in " + e->run_id);
    }
    md << "| mode |";
    for (auto s : seeds) md << " seed " << s << " |";
    md << " mean |\n|---|";
    for (std::size_t i = 0; i < seeds.size(); ++i) md << "---:|";
    md << "---:|\n";
    std::map<std::string, std::vector<double>> grok;
    std::map<std::string, bool> complete;
    for (const auto& mode : modes) {
      md << "| " << mode << " |";
      complete[mode] = true;
      for (auto s : seeds) {
        const auto it = cell.find({mode, s});
        if (it == cell.end()) {
          md << " |";
          complete[mode] = false;
        } else if (!it->second->grok_step) {
          md << " none (>" << it->second->final_step << ") |";
          complete[mode] = false;
        } else {
          grok[mode].push_back(static_cast<double>(*it->second->grok_step));
          md << ' ' << *it->second->grok_step << " |";
        }
      }
      md << ' ' << (complete[mode] ? fmt(mean(grok[mode]), 0) : "n/a") << " |\n";
    }
    if (modes.count("A") && complete["A"]) {
      for (const auto& mode : modes) {
        if (mode == "A") continue;
        md << "| " << mode << "/A speedup |";
        for (std::size_t i = 0; i < seeds.size(); ++i) md << " |";
        md << ' ' << (complete[mode] ? fmt(speedup(grok["A"], grok[mode])) + "x" : "n/a") << " |\n";
      }
    }
    md << "\nruns:";
    std::vector<std::string> ids;
    for (const auto* e : entries) ids.push_back(e->run_id);
    std::sort(ids.begin(), ids.end());
    for (const auto& id : ids) md << ' ' << id;
    md << "\n\n";
  }
}

void plots_section(std::ostringstream& md, const Inputs& in, std::map<std::string, std::string>& svgs) {
  // coupling trajectories per (run, op), one line per estimator configuration
  std::map<std::pair<std::string, std::string>, std::map<std::string, Series>> by_run;
  std::map<std::pair<std::string, std::string>, std::int64_t> grok;
  for (const auto& r : in.coupling) {
    Series& s = by_run[{r.run_id, r.op}][r.estimator + " W=" + std::to_string(r.window)];
    s.x.push_back(static_cast<double>(r.step));
    s.y.push_back(r.r_bar);
    if (r.grok_step >= 0) grok[{r.run_id, r.op}] = r.grok_step;
  }
  if (!by_run.empty() || !in.traces.empty()) md << "## Trajectories\n\n";
  for (auto& [key, named] : by_run) {
    std::vector<Series> series;
    for (auto& [name, s] : named) {
      std::vector<std::size_t> idx(s.x.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.x[a] < s.x[b]; });
      Series sorted;
      sorted.name = name;
      for (std::size_t i : idx) sorted.x.push_back(s.x[i]), sorted.y.push_back(s.y[i]);
      series.push_back(std::move(sorted));
    }
    const auto g = grok.find(key);
    const std::string file = "rbar_" + file_safe(key.first) + "_" + file_safe(key.second) + ".svg";
    svgs[file] = svg_plot("Rbar: " + key.first + " / " + key.second, series, true,
                          g == grok.end() ? std::nullopt : std::optional<double>(static_cast<double>(g->second)));
    md << "![" << key.first << " " << key.second << "](" << file << ")\n\n";
  }
  std::vector<const TraceSeries*> traces;
  for (const auto& t : in.traces) traces.push_back(&t);
  std::stable_sort(traces.begin(), traces.end(), [](auto* a, auto* b) { return a->run_id < b->run_id; });
  for (const auto* t : traces) {
    std::vector<Series> series;
    std::vector<experiment::EvalPoint> pts;
    for (std::size_t i = 0; i < t->steps.size(); ++i) pts.push_back({t->steps[i], {}, {t->test_acc[0][i]}});
    const auto g = experiment::detect_grok(pts, {});
    for (std::size_t h = 0; h < t->test_acc.size(); ++h) {
      Series tr, te;
      tr.name = "train " + std::to_string(h);
      te.name = "test " + std::to_string(h);
      tr.dashed = true;
      for (std::size_t i = 0; i < t->steps.size(); ++i) {
        const auto x = static_cast<double>(t->steps[i]);
        if (std::isfinite(t->train_acc[h][i])) tr.x.push_back(x), tr.y.push_back(t->train_acc[h][i]);
        te.x.push_back(x), te.y.push_back(t->test_acc[h][i]);
      }
      series.push_back(std::move(tr));
      series.push_back(std::move(te));
    }
    const std::string file = "acc_" + file_safe(t->run_id) + ".svg";
    svgs[file] = svg_plot("accuracy: " + t->run_id, series, false,
                          g ? std::optional<double>(static_cast<double>(*g)) : std::nullopt);
    md << "![" << t->run_id << " accuracy](" << file << ")\n\n";
  }
}

}  // namespace

void write_intervention_csv(std::ostream& out, const InterventionEntry& e, bool header) {
  if (header) out << kInterventionHeader << '\n';
  std::ostringstream row;
  row.precision(10);
  row << e.run_id << ',' << e.op << ',' << e.mode << ',' << e.flavor << ',' << e.seed << ',' << e.weight_decay << ','
      << (e.grok_step ? std::to_string(*e.grok_step) : "none") << ',' << e.final_step << ',' << e.final_test_acc
      << '\n';
  out << row.str();
}

void load_csv(const fs::path& file, Inputs& into) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("report: cannot open " + file.string());
  std::string header;
  std::getline(in, header);
  if (!header.empty() && header.back() == '\r') header.pop_back();
  const auto hcells = split_csv(header);
  const auto bad = [&](std::size_t line) {
    return std::runtime_error("report: schema mismatch in " + file.string() + " line " + std::to_string(line));
  };

  enum class Kind { coupling, ablation, intervention, trace } kind;
  std::string trace_run;
  if (header == kCouplingHeader) {
    kind = Kind::coupling;
  } else if (header == kAblationHeader) {
    kind = Kind::ablation;
  } else if (header == kInterventionHeader) {
    kind = Kind::intervention;
  } else if (!hcells.empty() && hcells[0] == "step" && hcells.size() >= 3 && hcells.size() % 2 == 1) {
    kind = Kind::trace;
    const std::size_t heads = (hcells.size() - 1) / 2;
    for (std::size_t h = 0; h < heads; ++h)
      if (hcells[1 + h] != "train_acc_" + std::to_string(h) || hcells[1 + heads + h] != "test_acc_" + std::to_string(h))
        throw bad(1);
    into.traces.push_back({});
    into.traces.back().run_id = fs::absolute(file).parent_path().filename().string();
    into.traces.back().train_acc.resize(heads);
    into.traces.back().test_acc.resize(heads);
  } else {
    throw std::runtime_error("report: unrecognized CSV header in " + file.string());
  }

  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != hcells.size()) throw bad(lineno);
    try {
      switch (kind) {
        case Kind::coupling: {
          CouplingRow r;
          r.run_id = c[0];
          r.op = c[1];
          r.estimator = c[2];
          r.step = std::stoll(c[3]);
          r.grok_step = std::stoll(c[4]);
          r.window = std::stoul(c[5]);
          r.k = std::stoul(c[6]);
          r.eps_rel = std::stod(c[7]);
          r.ratios = {num(c[8]), num(c[9]), num(c[10])};
          r.r_bar = std::stod(c[11]);
          r.a_random_median = std::stod(c[15]);
          r.rank90 = std::stoul(c[16]);
          into.coupling.push_back(std::move(r));
          break;
        }
        case Kind::ablation:
          into.ablation.push_back({c[0], c[1], std::stod(c[2]), std::stod(c[3]), std::stod(c[4]), std::stoll(c[5])});
          break;
        case Kind::intervention: {
          InterventionEntry e;
          e.run_id = c[0];
          e.op = c[1];
          e.mode = c[2];
          e.flavor = c[3];
          e.seed = std::stoull(c[4]);
          e.weight_decay = std::stod(c[5]);
          if (c[6] != "none") e.grok_step = std::stoll(c[6]);
          e.final_step = std::stoll(c[7]);
          e.final_test_acc = std::stod(c[8]);
          into.interventions.push_back(std::move(e));
          break;
        }
        case Kind::trace: {
          auto& t = into.traces.back();
          const std::size_t heads = t.test_acc.size();
          t.steps.push_back(std::stoll(c[0]));
          for (std::size_t h = 0; h < heads; ++h) {
            t.train_acc[h].push_back(num(c[1 + h]));
            t.test_acc[h].push_back(std::stod(c[1 + heads + h]));
          }
          break;
        }
      }
    } catch (const std::logic_error&) {  // stoll/stod failures
      throw bad(lineno);
    }
  }
}

Inputs load_inputs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("report: no such directory " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Inputs in;
  for (const auto& f : files) load_csv(f, in);
  return in;
}

double speedup(std::span<const double> control, std::span<const double> mode) {
  if (control.empty() || mode.empty()) throw std::invalid_argument("speedup: empty sample");
  return mean(control) / mean(mode);
}

double spread(std::span<const double> values) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (double v : values)
    if (std::isfinite(v) && v > 0) lo = std::min(lo, v), hi = std::max(hi, v);
  return std::isfinite(lo) ? hi / lo : kNaN;
}

Rendered render(const Inputs& in) {
  if (in.empty()) throw std::runtime_error("report: no input rows");
  Rendered out;
  std::ostringstream md;
  md << "# Coupling and intervention report\n\n";
  std::set<std::string> runs;
  for (const auto& r : in.coupling) runs.insert(r.run_id);
  for (const auto& r : in.ablation) runs.insert(r.run_id);
  for (const auto& r : in.interventions) runs.insert(r.run_id);
  for (const auto& r : in.traces) runs.insert(r.run_id);
  md << "Runs (" << runs.size() << "):";
  for (const auto& r : runs) md << ' ' << r;
  md << "\n\n";
  coupling_section(md, in);
  ablation_section(md, in);
  intervention_section(md, in);
  plots_section(md, in, out.svgs);
  out.markdown = md.str();
  return out;
}

void emit_report(const fs::path& in_dir, const fs::path& out_md) {
  const Rendered r = render(load_inputs(in_dir));
  const fs::path dir = out_md.has_parent_path() ? out_md.parent_path() : fs::path(".");
  fs::create_directories(dir);
  for (const auto& [name, svg] : r.svgs) {
    std::ofstream f(dir / name, std::ios::binary);
    f << svg;
    if (!f) throw std::runtime_error("report: cannot write " + (dir / name).string());
  }
  std::ofstream f(out_md, std::ios::binary);
  f << r.markdown;
  if (!f) throw std::runtime_error("report: cannot write " + out_md.string());
}

}  // namespace gradsed::report

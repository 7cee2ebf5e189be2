#include "gradsed/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "gradsed/analysis.hpp"
#include "gradsed/report.hpp"

namespace gradsed::cli {

namespace fs = std::filesystem;
using namespace gradsed::experiment;

namespace {

std::pair<std::string, std::string> split_kv(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + s + "' is not key=value");
  auto trim = [](std::string t) {
    const auto a = t.find_first_not_of(" \t");
    const auto b = t.find_last_not_of(" \t");
    return a == std::string::npos ? std::string() : t.substr(a, b - a + 1);
  };
  return {trim(s.substr(0, eq)), trim(s.substr(eq + 1))};
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::logic_error&) {
      throw ConfigError("bad number '" + cell + "' in list '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty value list");
  return out;
}

std::string default_run_id(const fs::path& dir) {
  return fs::absolute(dir).lexically_normal().filename().string();
}

struct TrainArgs {
  std::string task, out, config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps, checkpoint_every;
  std::optional<double> weight_decay;
};

struct AnalyzeArgs {
  std::string store, estimator = "gradient", out, ops;
  std::size_t window = 20, k = 3, points = 40, n_random = centroid::kRandomDirections;
  double eps_rel = centroid::kDefaultEpsRel;
  std::uint64_t probe_seed = 0;
  std::optional<std::int64_t> step;
  bool no_rank90 = false;
};

struct AblateArgs {
  std::string store, axis, values, out;
  std::size_t window = 20, k = 3, points = 20;
  double eps_rel = centroid::kDefaultEpsRel;
  std::uint64_t probe_seed = 0;
};

struct InterveneArgs {
  TrainArgs base;
  std::string mode = "A", flavor = "gradient";
  std::size_t k = 3, window = 20;
};

RunConfig config_from(const TrainArgs& a) {
  RunConfig cfg = resolve_config(a.task, a.config, a.overrides);
  if (a.seed) cfg.seed = *a.seed;
  if (a.steps) cfg.max_steps = *a.steps;
  if (a.checkpoint_every) cfg.checkpoint_every = *a.checkpoint_every;
  if (a.weight_decay) cfg.adamw.weight_decay = *a.weight_decay;
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

void add_run_options(CLI::App* sub, TrainArgs& a) {
  sub->add_option("--task", a.task, "op name (add, sub, mul, sq) or multitask");
  sub->add_option("--seed", a.seed, "master seed");
  sub->add_option("--steps", a.steps, "maximum training steps");
  sub->add_option("--out", a.out, "output directory")->required();
  sub->add_option("--checkpoint-every", a.checkpoint_every, "checkpoint cadence in steps (0 disables)");
  sub->add_option("--weight-decay", a.weight_decay, "AdamW weight decay");
  sub->add_option("--config", a.config, "key = value config file")->check(CLI::ExistingFile);
  sub->add_option("--set", a.overrides, "key=value override (repeatable)");
}

void do_train(const TrainArgs& a, std::ostream& out) {
  const RunConfig cfg = config_from(a);
  const TrainResult r = cfg.task == TaskMode::multitask ? train_multitask(cfg, a.out) : train_dense(cfg, a.out);
  out << "run " << default_run_id(a.out) << ": final_step " << r.final_step;
  for (int h = 0; h < cfg.n_heads(); ++h) {
    const auto& g = r.grok_steps[static_cast<std::size_t>(h)];
    out << " | " << data::op_name(cfg.op_for_head(h)) << " grok " << (g ? std::to_string(*g) : "none") << " test_acc "
        << r.final_test_acc[static_cast<std::size_t>(h)];
  }
  out << '\n';
}

void do_analyze(const AnalyzeArgs& a, std::ostream& out) {
  const auto kind = sed::parse_estimator(a.estimator);
  if (!kind) throw ConfigError("unknown estimator '" + a.estimator + "'");
  AnalysisConfig ac;
  ac.estimator = *kind;
  ac.window = a.window;
  ac.k = a.k;
  ac.eps_rel = a.eps_rel;
  ac.probe_seed = a.probe_seed;
  ac.n_points = a.points;
  ac.n_random = a.n_random;
  ac.rank90 = !a.no_rank90;
  if (!a.ops.empty()) {
    std::stringstream ss(a.ops);
    std::string name;
    while (std::getline(ss, name, ',')) {
      const auto op = data::parse_op(name);
      if (!op) throw ConfigError("unknown op '" + name + "'");
      ac.ops.push_back(*op);
    }
  }
  RunAnalyzer an(a.store);
  std::vector<std::size_t> points = a.step ? std::vector<std::size_t>{an.index_of(*a.step)} : an.select_points(a.points);
  const AnalysisResult res = an.analyze_at(ac, points);

  const fs::path path = a.out.empty() ? fs::path(a.store) / ("analysis_" + a.estimator + "_W" + std::to_string(a.window) +
                                                             "_K" + std::to_string(a.k) + ".csv")
                                      : fs::path(a.out);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  write_analysis_csv(f, res);
  out << "wrote " << res.rows.size() << " rows to " << path.string() << '\n';
  std::vector<data::OpKind> ops = ac.ops;
  if (ops.empty())
    for (int h = 0; h < an.config().n_heads(); ++h) ops.push_back(an.config().op_for_head(h));
  for (data::OpKind op : ops)
    out << data::op_name(op) << ": peak Rbar " << res.peak_rbar(op) << " peak R1 " << res.peak_r1(op) << '\n';

  if (*kind == sed::EstimatorKind::per_example && a.step) {
    for (data::OpKind op : ops) {
      const PerExampleReport pe = an.per_example(*a.step, op, ac);
      out << data::op_name(op) << " step " << pe.step << ": per-example R1 " << pe.per_example.ratios.front()
          << ", mean-gradient R " << pe.mean_gradient.ratios.front() << ", rolling R1 " << pe.rolling.ratios.front()
          << ", |cos(top1, mean)| " << pe.cos_top1_vs_mean << ", mean-vs-batch rel error " << pe.mean_gradient_rel_error
          << '\n';
    }
  }
}

void do_ablate(const AblateArgs& a, std::ostream& out) {
  const auto axis = parse_axis(a.axis);
  if (!axis) throw ConfigError("unknown ablation axis '" + a.axis + "'");
  const auto values = parse_list(a.values);
  AnalysisConfig base;
  base.window = a.window;
  base.k = a.k;
  base.eps_rel = a.eps_rel;
  base.probe_seed = a.probe_seed;
  base.n_points = a.points;
  RunAnalyzer an(a.store);
  const auto rows = ablate(an, *axis, values, base);
  const fs::path path = a.out.empty() ? fs::path(a.store) / ("ablation_" + a.axis + ".csv") : fs::path(a.out);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  write_ablation_csv(f, an.run_id(), rows);
  for (const auto& r : rows)
    out << a.axis << '=' << r.value << ": peak R1 " << r.peak_r1 << " peak Rbar " << r.peak_rbar << " at step "
        << r.peak_step << '\n';
}

void do_intervene(const InterveneArgs& a, std::ostream& out) {
  RunConfig cfg = config_from(a.base);
  if (cfg.task != TaskMode::single) throw ConfigError("interventions run on a single-task config");
  InterventionConfig ic;
  const auto mode = parse_mode(a.mode);
  if (!mode) throw ConfigError("unknown mode '" + a.mode + "'");
  const auto flavor = parse_flavor(a.flavor);
  if (!flavor) throw ConfigError("unknown flavor '" + a.flavor + "'");
  ic.mode = *mode;
  ic.flavor = *flavor;
  ic.k = a.k;
  ic.window = a.window;
  if (fs::exists(fs::path(a.base.out) / "intervention.csv"))
    throw std::runtime_error("refusing to overwrite " + a.base.out);
  const auto e = intervene_to_dir(ic, cfg, a.base.out);
  out << e.run_id << ": mode " << e.mode << " flavor " << e.flavor << " grok "
      << (e.grok_step ? std::to_string(*e.grok_step) : "none") << " final_step " << e.final_step << '\n';
}

}  // namespace

report::InterventionEntry intervene_to_dir(const InterventionConfig& ic, const RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  Manifest m;
  cfg.to_manifest(m);
  m.set("intervention.mode", std::string(mode_name(ic.mode)));
  m.set("intervention.flavor", std::string(flavor_name(ic.flavor)));
  m.set("intervention.k", static_cast<std::int64_t>(ic.k));
  m.set("intervention.window", static_cast<std::int64_t>(ic.window));
  m.set("status", "running");
  m.write(dir / "manifest.txt");

  const InterventionResult r = run_intervention(ic, cfg);
  write_trace_csv(dir / "trace.csv", r.trace, 1);
  report::InterventionEntry e;
  e.run_id = default_run_id(dir);
  e.op = std::string(data::op_name(cfg.op));
  e.mode = std::string(mode_name(ic.mode));
  e.flavor = std::string(flavor_name(ic.flavor));
  e.seed = cfg.seed;
  e.weight_decay = ic.weight_decay.value_or(cfg.adamw.weight_decay);
  e.grok_step = r.grok_step;
  e.final_step = r.final_step;
  e.final_test_acc = r.trace.empty() ? 0.0 : r.trace.back().test_acc.front();
  {
    std::ofstream f(dir / "intervention.csv");
    report::write_intervention_csv(f, e);
    if (!f) throw std::runtime_error("cannot write " + (dir / "intervention.csv").string());
  }
  m.set("status", "complete");
  m.set("final_step", r.final_step);
  m.set("grok_step.0", r.grok_step ? std::to_string(*r.grok_step) : "none");
  m.write(dir / "manifest.txt");
  return e;
}

RunConfig resolve_config(const std::string& task, const std::string& config_path,
                         const std::vector<std::string>& overrides) {
  std::map<std::string, std::string> entries;
  if (!config_path.empty()) {
    try {
      const Manifest file = Manifest::read(config_path);
      for (const auto& [k, v] : file.entries()) entries[k] = v;
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config file: ") + e.what());
    }
  }
  for (const auto& o : overrides) {
    auto [k, v] = split_kv(o);
    entries[k] = v;
  }

  std::string t = task;
  if (t.empty()) {
    if (entries.count("task") && entries["task"] == "multitask")
      t = "multitask";
    else if (entries.count("op"))
      t = entries["op"];
    else
      throw ConfigError("no task given (--task or task/op in the config)");
  }
  RunConfig base;
  if (t == "multitask") {
    base = RunConfig::multitask(42);
  } else {
    const auto op = data::parse_op(t);
    if (!op) throw ConfigError("unknown task '" + t + "'");
    base = RunConfig::single_task(*op, 42);
  }
  Manifest m;
  base.to_manifest(m);
  for (const auto& [k, v] : entries) {
    if (k == "task" || k == "op") continue;
    if (!m.has(k) || k.rfind("arch.", 0) == 0 || k == "seed_labels") throw ConfigError("unknown config key '" + k + "'");
    m.set(k, v);
  }
  try {
    return RunConfig::from_manifest(m);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"gradsed: spectral-edge diagnostics and centroid coupling on modular-arithmetic grokking", "gradsed"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train with dense checkpoints");
  add_run_options(t, train);

  AnalyzeArgs an;
  auto* a = app.add_subcommand("analyze", "coupling ratios over a checkpoint store");
  a->add_option("--store", an.store, "checkpoint store")->required()->check(CLI::ExistingDirectory);
  a->add_option("--estimator", an.estimator, "update, gradient, per_op or per_example");
  a->add_option("--W", an.window, "rolling window");
  a->add_option("--K", an.k, "basis size");
  a->add_option("--eps-rel", an.eps_rel, "perturbation size relative to the attention norm");
  a->add_option("--probe-seed", an.probe_seed, "probe set seed");
  a->add_option("--points", an.points, "evenly spaced analysis checkpoints");
  a->add_option("--random", an.n_random, "random comparison directions");
  a->add_option("--ops", an.ops, "comma-separated ops (default: all trained)");
  a->add_option("--step", an.step, "analyze a single checkpoint");
  a->add_flag("--no-rank90", an.no_rank90, "skip the centroid rank");
  a->add_option("--out", an.out, "CSV path (default: inside the store)");

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "peak coupling across one axis");
  b->add_option("--store", ab.store, "checkpoint store")->required()->check(CLI::ExistingDirectory);
  b->add_option("--axis", ab.axis, "W, K, eps or probe_seed")->required();
  b->add_option("--values", ab.values, "comma-separated values")->required();
  b->add_option("--W", ab.window, "base window");
  b->add_option("--K", ab.k, "base basis size");
  b->add_option("--eps-rel", ab.eps_rel, "base eps_rel");
  b->add_option("--probe-seed", ab.probe_seed, "base probe seed");
  b->add_option("--points", ab.points, "evenly spaced checkpoints");
  b->add_option("--out", ab.out, "CSV path (default: inside the store)");

  InterveneArgs iv;
  auto* v = app.add_subcommand("intervene", "training run with a rank-K attention projection");
  add_run_options(v, iv.base);
  v->add_option("--mode", iv.mode, "A control, B remove SED, C keep SED, D remove random, E keep random");
  v->add_option("--flavor", iv.flavor, "update or gradient");
  v->add_option("--K", iv.k, "projection rank");
  v->add_option("--W", iv.window, "SED window");

  std::string report_in, report_out;
  auto* r = app.add_subcommand("report", "markdown tables and SVG plots from CSVs");
  r->add_option("--in", report_in, "directory scanned for CSVs")->required()->check(CLI::ExistingDirectory);
  r->add_option("--out", report_out, "markdown path")->required();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*t) {
      do_train(train, out);
    } else if (*a) {
      do_analyze(an, out);
    } else if (*b) {
      do_ablate(ab, out);
    } else if (*v) {
      do_intervene(iv, out);
    } else if (*r) {
      report::emit_report(report_in, report_out);
      out << "wrote " << report_out << '\n';
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace gradsed::cli

#include "gradsed/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <stdexcept>

namespace gradsed::experiment {

namespace fs = std::filesystem;

namespace {

std::optional<std::int64_t> parse_grok(const std::string& s) {
  if (s == "none") return std::nullopt;
  return std::stoll(s);
}

std::span<const double> row_of(const linalg::Matrix& m, Eigen::Index i) {
  return {m.row(i).data(), static_cast<std::size_t>(m.cols())};
}

}  // namespace

std::vector<const AnalysisRow*> AnalysisResult::rows_for(data::OpKind op) const {
  std::vector<const AnalysisRow*> out;
  for (const auto& r : rows)
    if (r.op == op) out.push_back(&r);
  return out;
}

double AnalysisResult::peak_rbar(data::OpKind op) const {
  double best = 0.0;
  for (const auto* r : rows_for(op)) best = std::max(best, r->report.r_bar);
  return best;
}

double AnalysisResult::peak_r1(data::OpKind op) const {
  double best = 0.0;
  for (const auto* r : rows_for(op)) best = std::max(best, r->report.ratios.front());
  return best;
}

RunAnalyzer::RunAnalyzer(const fs::path& store_dir)
    : dir_(store_dir),
      cfg_(RunConfig::from_manifest(Manifest::read(store_dir / "manifest.txt"))),
      store_(CheckpointStore::open(store_dir)),
      net_(cfg_.architecture()),
      split_(data::build_split(cfg_.split_spec(), RngStream(cfg_.seed, "split"))),
      rand_dirs_(cfg_.seed, "rand-dirs") {
  const Manifest m = Manifest::read(store_dir / "manifest.txt");
  if (m.find("status") != "complete") throw std::runtime_error("analysis: store " + store_dir.string() + " is incomplete");
  if (std::stoull(m.get("split_fingerprint")) != split_.fingerprint)
    throw std::runtime_error("analysis: split does not match the stored fingerprint");
  if (store_.steps().size() < 2) throw std::runtime_error("analysis: store holds fewer than two checkpoints");
  RngStream rng(cfg_.seed, "analysis-batch");
  batch_ = data::sample_batch(split_.train, kAnalysisBatch, rng);
  for (int h = 0; h < cfg_.n_heads(); ++h) grok_steps_.push_back(parse_grok(m.get("grok_step." + std::to_string(h))));
  run_id_ = fs::absolute(store_dir).lexically_normal().filename().string();
  if (run_id_.empty()) run_id_ = fs::absolute(store_dir).lexically_normal().parent_path().filename().string();
}

std::vector<std::size_t> RunAnalyzer::select_points(std::size_t n) const {
  const std::size_t last = store_.steps().size() - 1;
  if (n == 0) throw std::invalid_argument("select_points: need at least one point");
  std::vector<std::size_t> out;
  if (n >= last) {
    for (std::size_t i = 1; i <= last; ++i) out.push_back(i);
    return out;
  }
  if (n == 1) return {last};
  for (std::size_t j = 0; j < n; ++j) {
    const double x = 1.0 + static_cast<double>(j) * static_cast<double>(last - 1) / static_cast<double>(n - 1);
    out.push_back(static_cast<std::size_t>(std::llround(x)));
  }
  return out;
}

std::size_t RunAnalyzer::index_of(std::int64_t step) const {
  const auto& s = store_.steps();
  const auto it = std::lower_bound(s.begin(), s.end(), step);
  if (it == s.end() || *it != step) throw std::runtime_error("analysis: no checkpoint at step " + std::to_string(step));
  return static_cast<std::size_t>(it - s.begin());
}

model::ParamVector RunAnalyzer::params_at(std::size_t index) const { return store_.load(store_.steps().at(index)); }

int RunAnalyzer::head_for(data::OpKind op) const {
  if (cfg_.task == TaskMode::single) {
    if (op != cfg_.op) throw std::invalid_argument("analysis: op not trained by this run");
    return 0;
  }
  return static_cast<int>(op);
}

const data::Batch& RunAnalyzer::probes(std::uint64_t seed) {
  auto it = probe_sets_.find(seed);
  if (it == probe_sets_.end()) it = probe_sets_.emplace(seed, data::make_probe_set(seed).probes).first;
  return it->second;
}

// head -1 is the summed multitask loss.
const std::vector<double>& RunAnalyzer::gradient_row(std::size_t index, int head) {
  const auto key = std::make_pair(index, head);
  auto it = grad_rows_.find(key);
  if (it != grad_rows_.end()) return it->second;
  const model::ParamVector p = params_at(index);
  model::LossAndGrad lg;
  if (head < 0)
    lg = net_.multitask_loss_and_grad(p, batch_);
  else
    lg = net_.loss_and_param_grad(p, batch_.inputs, batch_.labels_for(cfg_.op_for_head(head)), head);
  return grad_rows_.emplace(key, model::extract_attention(net_.layout(), lg.grad.values)).first->second;
}

const std::vector<double>& RunAnalyzer::attention_row(std::size_t index) {
  auto it = attn_rows_.find(index);
  if (it == attn_rows_.end())
    it = attn_rows_.emplace(index, model::extract_attention(net_.layout(), params_at(index).values)).first;
  return it->second;
}

linalg::Matrix RunAnalyzer::window_rows(sed::EstimatorKind kind, std::size_t index, std::size_t window, int head) {
  const std::size_t first_valid = kind == sed::EstimatorKind::update ? 1 : 0;
  if (index < first_valid) throw std::invalid_argument("analysis: no update before the first checkpoint");
  const std::size_t first = index + 1 >= first_valid + window ? index + 1 - window : first_valid;
  const auto dim = static_cast<Eigen::Index>(net_.layout().attention_size());
  linalg::Matrix rows(static_cast<Eigen::Index>(index - first + 1), dim);
  for (std::size_t i = first; i <= index; ++i) {
    const auto r = static_cast<Eigen::Index>(i - first);
    if (kind == sed::EstimatorKind::update) {
      const auto& now = attention_row(i);
      const auto& before = attention_row(i - 1);
      for (Eigen::Index j = 0; j < dim; ++j) rows(r, j) = now[static_cast<std::size_t>(j)] - before[static_cast<std::size_t>(j)];
    } else {
      const auto& g = gradient_row(i, head);
      std::copy(g.begin(), g.end(), rows.row(r).data());
    }
  }
  // Rows older than this window are not needed by later, increasing points.
  for (auto it = attn_rows_.begin(); it != attn_rows_.end();)
    it = it->first + 1 < first ? attn_rows_.erase(it) : std::next(it);
  return rows;
}

std::size_t RunAnalyzer::rank90_at(std::int64_t step, data::OpKind op, std::uint64_t probe_seed) {
  const int head = head_for(op);
  const auto key = std::make_tuple(step, head, probe_seed);
  if (auto it = rank90_.find(key); it != rank90_.end()) return it->second;
  const model::ParamVector p = store_.load(step);
  const auto& pr = probes(probe_seed);
  const std::size_t r = centroid::rank90(centroid::centroid_matrix(net_, p, centroid::probes_for(pr, op, head)));
  rank90_[key] = r;
  return r;
}

AnalysisResult RunAnalyzer::analyze(const AnalysisConfig& cfg) { return analyze_at(cfg, select_points(cfg.n_points)); }

AnalysisResult RunAnalyzer::analyze_at(const AnalysisConfig& cfg, const std::vector<std::size_t>& indices) {
  if (cfg.window == 0 || cfg.k == 0) throw std::invalid_argument("analysis: W and K must be positive");
  if (store_.steps().size() < cfg.window + 1 && cfg.estimator != sed::EstimatorKind::per_example)
    throw std::runtime_error("analysis: fewer stored checkpoints than the window");
  std::vector<data::OpKind> ops = cfg.ops;
  if (ops.empty())
    for (int h = 0; h < cfg_.n_heads(); ++h) ops.push_back(cfg_.op_for_head(h));
  const bool multitask = cfg_.task == TaskMode::multitask;

  AnalysisResult result;
  result.run_id = run_id_;
  result.config = cfg;
  result.grok_steps = grok_steps_;
  centroid::CouplingOptions opts;
  opts.eps_rel = cfg.eps_rel;
  opts.n_random = cfg.n_random;
  opts.probe_seed = cfg.probe_seed;
  opts.with_rank90 = false;
  const data::Batch& probe_batch = probes(cfg.probe_seed);

  for (std::size_t idx : indices) {
    const std::int64_t step = store_.steps().at(idx);
    const model::ParamVector params = params_at(idx);
    result.steps.push_back(step);

    std::optional<linalg::Matrix> shared;
    if (cfg.estimator == sed::EstimatorKind::update || cfg.estimator == sed::EstimatorKind::gradient) {
      const linalg::Matrix rows = window_rows(cfg.estimator, idx, cfg.window, multitask ? -1 : 0);
      shared = sed::sed_from_rows(rows, cfg.k, cfg.estimator, cfg.window, step).directions;
    }
    std::vector<linalg::Matrix> top1;
    for (data::OpKind op : ops) {
      const int head = head_for(op);
      linalg::Matrix basis;
      if (shared) {
        basis = *shared;
      } else if (cfg.estimator == sed::EstimatorKind::per_op) {
        basis = sed::sed_from_rows(window_rows(sed::EstimatorKind::gradient, idx, cfg.window, head), cfg.k,
                                   sed::EstimatorKind::per_op, cfg.window, step)
                    .directions;
      } else {
        basis = sed::per_example_sed(net_, params, batch_, batch_.labels_for(op), head, cfg.k, step).basis.directions;
      }
      top1.push_back(basis.topRows(1));
      AnalysisRow row;
      row.op = op;
      row.head = head;
      row.report = centroid::coupling_ratio(net_, params, basis, centroid::probes_for(probe_batch, op, head), rand_dirs_,
                                            step, opts, &baselines_);
      if (cfg.rank90) row.report.rank90 = rank90_at(step, op, cfg.probe_seed);
      result.rows.push_back(std::move(row));
    }
    if (cfg.estimator == sed::EstimatorKind::per_op) {
      std::vector<double> cos;
      for (std::size_t a = 0; a < top1.size(); ++a)
        for (std::size_t b = a + 1; b < top1.size(); ++b) cos.push_back(sed::abs_cosine(row_of(top1[a], 0), row_of(top1[b], 0)));
      result.per_op_top1_cos.push_back(std::move(cos));
    }
  }
  return result;
}

PerExampleReport RunAnalyzer::per_example(std::int64_t step, data::OpKind op, const AnalysisConfig& cfg) {
  const std::size_t idx = index_of(step);
  const int head = head_for(op);
  const model::ParamVector params = params_at(idx);
  const auto labels = batch_.labels_for(op);
  const auto pe = sed::per_example_sed(net_, params, batch_, labels, head, cfg.k, step);

  PerExampleReport rep;
  rep.step = step;
  const std::vector<double>& g = gradient_row(idx, head);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    num += (pe.mean_gradient[i] - g[i]) * (pe.mean_gradient[i] - g[i]);
    den += g[i] * g[i];
  }
  rep.mean_gradient_rel_error = std::sqrt(num / den);
  rep.cos_top1_vs_mean = sed::abs_cosine(row_of(pe.basis.directions, 0), g);

  centroid::CouplingOptions opts;
  opts.eps_rel = cfg.eps_rel;
  opts.n_random = cfg.n_random;
  opts.probe_seed = cfg.probe_seed;
  opts.with_rank90 = false;
  const auto pr = centroid::probes_for(probes(cfg.probe_seed), op, head);
  rep.per_example = centroid::coupling_ratio(net_, params, pe.basis.directions, pr, rand_dirs_, step, opts, &baselines_);

  linalg::Matrix mean_dir(1, static_cast<Eigen::Index>(g.size()));
  const double norm = std::sqrt(den);
  for (std::size_t i = 0; i < g.size(); ++i) mean_dir(0, static_cast<Eigen::Index>(i)) = g[i] / norm;
  rep.mean_gradient = centroid::coupling_ratio(net_, params, mean_dir, pr, rand_dirs_, step, opts, &baselines_);

  const auto rolling = sed::sed_from_rows(window_rows(sed::EstimatorKind::gradient, idx, cfg.window, head), cfg.k,
                                          sed::EstimatorKind::gradient, cfg.window, step);
  rep.rolling = centroid::coupling_ratio(net_, params, rolling.directions, pr, rand_dirs_, step, opts, &baselines_);
  return rep;
}

void write_analysis_csv(std::ostream& out, const AnalysisResult& result, bool header) {
  if (header) centroid::write_csv_header(out);
  for (const auto& row : result.rows) {
    centroid::ReportMeta meta;
    meta.run_id = result.run_id;
    meta.op = std::string(data::op_name(row.op));
    meta.estimator = std::string(sed::estimator_name(result.config.estimator));
    const auto& g = result.grok_steps.at(static_cast<std::size_t>(row.head));
    meta.grok_step = g ? *g : -1;
    meta.window = result.config.window;
    meta.k = result.config.k;
    meta.eps_rel = result.config.eps_rel;
    centroid::write_csv_row(out, meta, row.report);
  }
}

std::string_view axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::window: return "W";
    case AblationAxis::k: return "K";
    case AblationAxis::eps: return "eps";
    case AblationAxis::probe_seed: return "probe_seed";
  }
  return "?";
}

std::optional<AblationAxis> parse_axis(std::string_view s) {
  for (auto a : {AblationAxis::window, AblationAxis::k, AblationAxis::eps, AblationAxis::probe_seed})
    if (axis_name(a) == s) return a;
  return std::nullopt;
}

std::vector<AblationRow> ablate(RunAnalyzer& analyzer, AblationAxis axis, const std::vector<double>& values,
                                AnalysisConfig base) {
  if (values.empty()) throw std::invalid_argument("ablate: no values");
  base.estimator = sed::EstimatorKind::gradient;
  base.n_points = 20;
  base.rank90 = false;
  const data::OpKind op = analyzer.config().op_for_head(0);
  base.ops = {op};
  std::vector<AblationRow> out;
  for (double v : values) {
    AnalysisConfig cfg = base;
    switch (axis) {
      case AblationAxis::window: cfg.window = static_cast<std::size_t>(v); break;
      case AblationAxis::k: cfg.k = static_cast<std::size_t>(v); break;
      case AblationAxis::eps: cfg.eps_rel = v; break;
      case AblationAxis::probe_seed: cfg.probe_seed = static_cast<std::uint64_t>(v); break;
    }
    const AnalysisResult res = analyzer.analyze(cfg);
    AblationRow row;
    row.axis = axis;
    row.value = v;
    for (const auto& r : res.rows) {
      if (r.report.ratios.front() > row.peak_r1) {
        row.peak_r1 = r.report.ratios.front();
        row.peak_step = r.report.step;
      }
      row.peak_rbar = std::max(row.peak_rbar, r.report.r_bar);
    }
    out.push_back(row);
  }
  return out;
}

void write_ablation_csv(std::ostream& out, const std::string& run_id, const std::vector<AblationRow>& rows, bool header) {
  if (header) out << "run_id,axis,value,peak_R1,peak_Rbar,peak_step\n";
  out << std::setprecision(10);
  for (const auto& r : rows)
    out << run_id << ',' << axis_name(r.axis) << ',' << r.value << ',' << r.peak_r1 << ',' << r.peak_rbar << ','
        << r.peak_step << '\n';
}

}  // namespace gradsed::experiment

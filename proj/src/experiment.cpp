#include "gradsed/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "gradsed/sed.hpp"

namespace gradsed::experiment {

namespace fs = std::filesystem;

// ---- configuration ----

RunConfig RunConfig::single_task(data::OpKind op, std::uint64_t seed) {
  RunConfig c;
  c.op = op;
  c.seed = seed;
  return c;
}

RunConfig RunConfig::multitask(std::uint64_t seed) {
  RunConfig c;
  c.task = TaskMode::multitask;
  c.seed = seed;
  c.max_steps = 50000;
  c.checkpoint_every = 200;
  c.grok_margin = 1000;
  return c;
}

void RunConfig::validate() const {
  adamw.validate();
  if (max_steps < 0) throw std::invalid_argument("RunConfig: max_steps must be non-negative");
  if (checkpoint_every < 0) throw std::invalid_argument("RunConfig: checkpoint_every must be non-negative");
  if (eval_every <= 0) throw std::invalid_argument("RunConfig: eval_every must be positive");
  if (train_eval_every <= 0 || train_eval_every % eval_every != 0)
    throw std::invalid_argument("RunConfig: train_eval_every must be a positive multiple of eval_every");
  if (checkpoint_every > 0 && checkpoint_every % eval_every != 0 && eval_every % checkpoint_every != 0)
    throw std::invalid_argument("RunConfig: checkpoint and eval cadences must nest");
  if (batch_size == 0) throw std::invalid_argument("RunConfig: batch_size must be positive");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("RunConfig: train_fraction outside (0,1)");
  if (!(grok_threshold > 0.0 && grok_threshold <= 1.0) || grok_patience < 0)
    throw std::invalid_argument("RunConfig: invalid grok detector");
}

data::OpKind RunConfig::op_for_head(int head) const {
  if (task == TaskMode::single) return op;
  return data::kAllOps.at(static_cast<std::size_t>(head));
}

model::Architecture RunConfig::architecture() const {
  model::Architecture a = task == TaskMode::multitask ? model::Architecture::multitask() : model::Architecture::single_task();
  a.readout = readout;
  return a;
}

data::SplitSpec RunConfig::split_spec() const { return {data::kPrime, train_fraction, seed}; }

std::string_view task_name(TaskMode t) { return t == TaskMode::multitask ? "multitask" : "single"; }

void RunConfig::to_manifest(Manifest& m) const {
  m.set("task", std::string(task_name(task)));
  m.set("op", std::string(data::op_name(op)));
  m.set("seed", std::to_string(seed));
  m.set("max_steps", max_steps);
  m.set("checkpoint_every", checkpoint_every);
  m.set("eval_every", eval_every);
  m.set("train_eval_every", train_eval_every);
  m.set("batch_size", static_cast<std::int64_t>(batch_size));
  m.set("train_fraction", train_fraction);
  m.set("lr", adamw.lr);
  m.set("beta1", adamw.beta1);
  m.set("beta2", adamw.beta2);
  m.set("adam_eps", adamw.eps);
  m.set("weight_decay", adamw.weight_decay);
  m.set("readout", std::string(model::readout_name(readout)));
  m.set("grok_threshold", grok_threshold);
  m.set("grok_patience", static_cast<std::int64_t>(grok_patience));
  m.set("grok_margin", grok_margin);
  m.set("multitask_final_accuracy", multitask_final_accuracy);
  const model::Architecture a = architecture();
  m.set("arch.d_model", static_cast<std::int64_t>(a.d_model));
  m.set("arch.n_heads", static_cast<std::int64_t>(a.n_heads));
  m.set("arch.d_ff", static_cast<std::int64_t>(a.d_ff));
  m.set("arch.n_layers", static_cast<std::int64_t>(a.n_layers));
  m.set("arch.vocab", static_cast<std::int64_t>(a.vocab));
  m.set("arch.output_heads", static_cast<std::int64_t>(a.n_heads_out));
  m.set("seed_labels", "init,split,batches,analysis-batch,rand-dirs,proj-random");
}

RunConfig RunConfig::from_manifest(const Manifest& m) {
  RunConfig c;
  const std::string& task = m.get("task");
  if (task == "multitask")
    c.task = TaskMode::multitask;
  else if (task != "single")
    throw std::runtime_error("manifest: unknown task '" + task + "'");
  const auto op = data::parse_op(m.get("op"));
  if (!op) throw std::runtime_error("manifest: unknown op");
  c.op = *op;
  c.seed = std::stoull(m.get("seed"));
  c.max_steps = m.get_int("max_steps");
  c.checkpoint_every = m.get_int("checkpoint_every");
  c.eval_every = m.get_int("eval_every");
  c.train_eval_every = m.get_int("train_eval_every");
  c.batch_size = static_cast<std::size_t>(m.get_int("batch_size"));
  c.train_fraction = m.get_double("train_fraction");
  c.adamw.lr = m.get_double("lr");
  c.adamw.beta1 = m.get_double("beta1");
  c.adamw.beta2 = m.get_double("beta2");
  c.adamw.eps = m.get_double("adam_eps");
  c.adamw.weight_decay = m.get_double("weight_decay");
  const std::string& readout = m.get("readout");
  if (readout == model::readout_name(model::Readout::last_position))
    c.readout = model::Readout::last_position;
  else if (readout != model::readout_name(model::Readout::mean_pool))
    throw std::runtime_error("manifest: unknown readout '" + readout + "'");
  c.grok_threshold = m.get_double("grok_threshold");
  c.grok_patience = static_cast<int>(m.get_int("grok_patience"));
  c.grok_margin = m.get_int("grok_margin");
  c.multitask_final_accuracy = m.get_double("multitask_final_accuracy");
  c.validate();
  return c;
}

// ---- grok detection ----

std::optional<std::int64_t> GrokTracker::push(std::int64_t step, double accuracy) {
  if (grok_) return std::nullopt;
  if (accuracy >= det_.threshold) {
    if (run_length_ == 0) run_start_ = step;
    ++run_length_;
  } else {
    run_length_ = 0;
  }
  if (run_length_ > det_.patience) {
    grok_ = run_start_;
    return grok_;
  }
  return std::nullopt;
}

std::optional<std::int64_t> detect_grok(std::span<const std::int64_t> steps, std::span<const double> accuracy,
                                        const GrokDetector& det) {
  if (steps.size() != accuracy.size()) throw std::invalid_argument("detect_grok: length mismatch");
  GrokTracker tracker(det);
  for (std::size_t i = 0; i < steps.size(); ++i)
    if (auto g = tracker.push(steps[i], accuracy[i])) return g;
  return std::nullopt;
}

std::optional<std::int64_t> detect_grok(std::span<const EvalPoint> trace, const GrokDetector& det, int head) {
  GrokTracker tracker(det);
  for (const auto& e : trace)
    if (auto g = tracker.push(e.step, e.test_acc.at(static_cast<std::size_t>(head)))) return g;
  return std::nullopt;
}

// ---- training ----

std::vector<double> head_accuracies(const model::Transformer& net, const model::ParamVector& params,
                                    const data::Batch& set, const RunConfig& cfg) {
  constexpr std::size_t kChunk = 1024;
  const int heads = cfg.n_heads();
  std::vector<std::size_t> correct(static_cast<std::size_t>(heads), 0);
  const std::span<const data::Pair> inputs(set.inputs);
  for (std::size_t start = 0; start < inputs.size(); start += kChunk) {
    const std::size_t count = std::min(kChunk, inputs.size() - start);
    const auto logits = net.forward_all_heads(params, inputs.subspan(start, count));
    for (int h = 0; h < heads; ++h) {
      const auto labels = set.labels_for(cfg.op_for_head(h));
      const auto& l = logits[static_cast<std::size_t>(h)];
      for (Eigen::Index r = 0; r < l.rows(); ++r) {
        Eigen::Index arg = 0;
        l.row(r).maxCoeff(&arg);
        if (arg == labels[start + static_cast<std::size_t>(r)]) ++correct[static_cast<std::size_t>(h)];
      }
    }
  }
  std::vector<double> acc;
  for (std::size_t c : correct) acc.push_back(static_cast<double>(c) / static_cast<double>(inputs.size()));
  return acc;
}

namespace {

// State shared by the dense and intervention loops.
struct Session {
  RunConfig cfg;
  model::Transformer net;
  model::ParamVector params;
  data::Split split;
  optim::AdamWState state;
  RngStream batch_root;

  explicit Session(const RunConfig& c)
      : cfg(c),
        net(c.architecture()),
        params(net.init_params(RngStream(c.seed, "init"))),
        split(data::build_split(c.split_spec(), RngStream(c.seed, "split"))),
        state(optim::AdamWState::zeros(params.size())),
        batch_root(c.seed, "batches") {
    cfg.validate();
  }

  model::LossAndGrad gradient(std::int64_t step) const {
    RngStream rng = batch_root.derive(static_cast<std::uint64_t>(step));
    const data::Batch batch = data::sample_batch(split.train, cfg.batch_size, rng);
    model::LossAndGrad lg = cfg.task == TaskMode::multitask
                                ? net.multitask_loss_and_grad(params, batch)
                                : net.loss_and_param_grad(params, batch.inputs, batch.labels_for(cfg.op), 0);
    if (!std::isfinite(lg.loss))
      throw std::runtime_error("training diverged: non-finite loss at step " + std::to_string(step));
    return lg;
  }

  EvalPoint evaluate(std::int64_t step) const {
    EvalPoint e;
    e.step = step;
    e.test_acc = head_accuracies(net, params, split.test, cfg);
    if (step % cfg.train_eval_every == 0) e.train_acc = head_accuracies(net, params, split.train, cfg);
    return e;
  }
};

// Decides when to stop after each evaluation.
class StopRule {
 public:
  explicit StopRule(const RunConfig& cfg) : cfg_(cfg) {
    for (int h = 0; h < cfg.n_heads(); ++h) trackers_.emplace_back(GrokDetector{cfg.grok_threshold, cfg.grok_patience});
  }

  // Returns true once training should end at this (evaluated) step.
  bool update(const EvalPoint& e) {
    bool all_grokked = true, all_accurate = true;
    for (std::size_t h = 0; h < trackers_.size(); ++h) {
      trackers_[h].push(e.step, e.test_acc[h]);
      all_grokked = all_grokked && trackers_[h].grok_step().has_value();
      all_accurate = all_accurate && e.test_acc[h] >= cfg_.multitask_final_accuracy;
    }
    const bool done = cfg_.task == TaskMode::multitask ? all_grokked && all_accurate : all_grokked;
    if (cfg_.grok_margin >= 0 && done && !stop_at_) stop_at_ = e.step + cfg_.grok_margin;
    if (!stop_at_ || e.step < *stop_at_) return false;
    return cfg_.checkpoint_every == 0 || e.step % cfg_.checkpoint_every == 0;
  }

  [[nodiscard]] std::vector<std::optional<std::int64_t>> grok_steps() const {
    std::vector<std::optional<std::int64_t>> out;
    for (const auto& t : trackers_) out.push_back(t.grok_step());
    return out;
  }

 private:
  const RunConfig& cfg_;
  std::vector<GrokTracker> trackers_;
  std::optional<std::int64_t> stop_at_;
};

std::string format_grok(const std::optional<std::int64_t>& g) { return g ? std::to_string(*g) : "none"; }

}  // namespace

void write_trace_csv(const fs::path& path, std::span<const EvalPoint> trace, int n_heads) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("trace: cannot write " + path.string());
  out << "step";
  for (int h = 0; h < n_heads; ++h) out << ",train_acc_" << h;
  for (int h = 0; h < n_heads; ++h) out << ",test_acc_" << h;
  out << '\n' << std::setprecision(17);
  for (const auto& e : trace) {
    out << e.step;
    for (int h = 0; h < n_heads; ++h) {
      out << ',';
      if (!e.train_acc.empty()) out << e.train_acc[static_cast<std::size_t>(h)];
    }
    for (int h = 0; h < n_heads; ++h) out << ',' << e.test_acc[static_cast<std::size_t>(h)];
    out << '\n';
  }
}

std::vector<EvalPoint> read_trace_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("trace: cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  if (columns == 0 || columns % 2 != 0) throw std::runtime_error("trace: malformed header in " + path.string());
  const std::size_t heads = columns / 2;
  std::vector<EvalPoint> trace;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() == columns) cells.emplace_back();  // trailing empty cell
    if (cells.size() != columns + 1) throw std::runtime_error("trace: malformed row in " + path.string());
    EvalPoint e;
    e.step = std::stoll(cells[0]);
    if (!cells[1].empty())
      for (std::size_t h = 0; h < heads; ++h) e.train_acc.push_back(std::stod(cells[1 + h]));
    for (std::size_t h = 0; h < heads; ++h) e.test_acc.push_back(std::stod(cells[1 + heads + h]));
    trace.push_back(std::move(e));
  }
  return trace;
}

TrainResult train_dense(const RunConfig& cfg, const fs::path& store_dir) {
  Session s(cfg);
  CheckpointStore store = CheckpointStore::create(store_dir);
  Manifest manifest;
  cfg.to_manifest(manifest);
  manifest.set("split_fingerprint", std::to_string(s.split.fingerprint));
  manifest.set("status", "running");
  manifest.write(store_dir / "manifest.txt");

  StopRule stop(s.cfg);
  TrainResult result;
  std::int64_t step = 0;
  for (;; ++step) {
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) store.save(step, s.params);
    bool finished = step == cfg.max_steps;
    if (step % cfg.eval_every == 0) {
      result.trace.push_back(s.evaluate(step));
      finished = stop.update(result.trace.back()) || finished;
      // partial trace for long runs; rewritten in full at the end
      if (result.trace.size() % 40 == 0) write_trace_csv(store_dir / "trace.csv", result.trace, cfg.n_heads());
    }
    if (finished) break;
    const auto lg = s.gradient(step);
    optim::adamw_step(s.state, s.params.span(), lg.grad.values, s.cfg.adamw);
  }

  result.grok_steps = stop.grok_steps();
  result.final_step = step;
  result.final_params = s.params;
  result.final_test_acc = head_accuracies(s.net, s.params, s.split.test, s.cfg);
  write_trace_csv(store_dir / "trace.csv", result.trace, cfg.n_heads());

  manifest.set("status", "complete");
  manifest.set("final_step", step);
  manifest.set("checkpoint_count", static_cast<std::int64_t>(store.steps().size()));
  for (int h = 0; h < cfg.n_heads(); ++h) {
    manifest.set("grok_step." + std::to_string(h), format_grok(result.grok_steps[static_cast<std::size_t>(h)]));
    manifest.set("final_test_acc." + std::to_string(h), result.final_test_acc[static_cast<std::size_t>(h)]);
  }
  manifest.write(store_dir / "manifest.txt");
  return result;
}

TrainResult train_multitask(const RunConfig& cfg, const fs::path& store_dir) {
  if (cfg.task != TaskMode::multitask) throw std::invalid_argument("train_multitask: config is single-task");
  return train_dense(cfg, store_dir);
}

// ---- interventions ----

std::string_view mode_name(InterventionMode m) {
  static constexpr std::string_view names[] = {"A", "B", "C", "D", "E"};
  return names[static_cast<int>(m)];
}

std::optional<InterventionMode> parse_mode(std::string_view s) {
  for (auto m : {InterventionMode::A, InterventionMode::B, InterventionMode::C, InterventionMode::D, InterventionMode::E})
    if (mode_name(m) == s) return m;
  return std::nullopt;
}

std::string_view flavor_name(Flavor f) { return f == Flavor::update_projected ? "update" : "gradient"; }

std::optional<Flavor> parse_flavor(std::string_view s) {
  if (s == "update" || s == "update_projected") return Flavor::update_projected;
  if (s == "gradient" || s == "gradient_projected") return Flavor::gradient_projected;
  return std::nullopt;
}

InterventionResult run_intervention(const InterventionConfig& icfg, const RunConfig& base,
                                    const std::function<void(const StepRecord&)>& observer) {
  if (base.task != TaskMode::single) throw std::invalid_argument("run_intervention: single-task runs only");
  if (icfg.k == 0 || icfg.window == 0) throw std::invalid_argument("run_intervention: K and W must be positive");
  RunConfig cfg = base;
  if (icfg.weight_decay) cfg.adamw.weight_decay = *icfg.weight_decay;
  cfg.grok_margin = 0;
  cfg.checkpoint_every = 0;
  Session s(cfg);

  const auto& layout = s.net.layout();
  const std::size_t p_attn = layout.attention_size();
  const bool projecting = icfg.mode != InterventionMode::A;
  const bool sed_basis = icfg.mode == InterventionMode::B || icfg.mode == InterventionMode::C;
  optim::ProjectionHook hook;
  hook.target = icfg.flavor == Flavor::gradient_projected ? optim::HookTarget::gradient_pre_moments
                                                          : optim::HookTarget::update_post_step;
  hook.mode = icfg.mode == InterventionMode::B || icfg.mode == InterventionMode::D ? optim::ProjectionMode::remove
                                                                                  : optim::ProjectionMode::keep;
  hook.source = sed_basis ? optim::BasisSource::sed : optim::BasisSource::random;
  hook.rank = static_cast<int>(icfg.k);

  // Only B/C read the rows; D/E use the row count for the shared warm-up.
  sed::RollingBuffer buffer(icfg.window, sed_basis ? p_attn : 1);
  const std::vector<double> placeholder_row(1, 0.0);
  std::vector<double> previous_delta;
  const RngStream random_root(cfg.seed, "proj-random");

  StopRule stop(s.cfg);
  InterventionResult result;
  linalg::Matrix basis;
  std::int64_t step = 0;
  for (;; ++step) {
    bool finished = step == cfg.max_steps;
    if (step % cfg.eval_every == 0) {
      result.trace.push_back(s.evaluate(step));
      finished = stop.update(result.trace.back()) || finished;
    }
    if (finished) break;

    const auto lg = s.gradient(step);
    bool active = false;
    if (projecting) {
      if (icfg.flavor == Flavor::gradient_projected) {
        buffer.push(sed_basis ? model::extract_attention(layout, lg.grad.values) : placeholder_row);
      } else if (!previous_delta.empty()) {
        buffer.push(sed_basis ? previous_delta : placeholder_row);
      }
      if (buffer.size() >= icfg.k) {
        if (sed_basis) {
          basis = linalg::topk_right_singular(buffer.rows(), icfg.k).directions;
        } else {
          RngStream rng = random_root.derive(static_cast<std::uint64_t>(step));
          basis = linalg::random_orthonormal(p_attn, icfg.k, rng);
        }
        active = true;
      }
    }
    const auto delta = optim::adamw_step(s.state, s.params, lg.grad.values, s.cfg.adamw, layout,
                                         active ? hook : optim::ProjectionHook{}, active ? &basis : nullptr);
    if (projecting && icfg.flavor == Flavor::update_projected) previous_delta = model::extract_attention(layout, delta);
    if (observer) observer({step, active ? &basis : nullptr, delta});
  }

  result.grok_step = stop.grok_steps().front();
  result.final_step = step;
  result.final_params = std::move(s.params);
  return result;
}

}  // namespace gradsed::experiment

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradsed/data.hpp"
#include "gradsed/model.hpp"
#include "gradsed/optim.hpp"
#include "gradsed/store.hpp"

namespace gradsed::experiment {

enum class TaskMode { single, multitask };

struct RunConfig {
  TaskMode task = TaskMode::single;
  data::OpKind op = data::OpKind::add;  // single-task only
  std::uint64_t seed = 42;
  std::int64_t max_steps = 8000;
  std::int64_t checkpoint_every = 25;   // 0 disables checkpoints
  std::int64_t eval_every = 25;
  std::int64_t train_eval_every = 25;   // multiple of eval_every
  std::size_t batch_size = 512;
  double train_fraction = 0.5;
  optim::AdamWConfig adamw;
  model::Readout readout = model::Readout::mean_pool;
  double grok_threshold = 0.98;
  int grok_patience = 20;
  // Training continues this many steps past the evaluation that confirms
  // grokking; negative disables the early stop.
  std::int64_t grok_margin = 500;
  // Multitask only: every head must also reach this test accuracy.
  double multitask_final_accuracy = 0.99;

  static RunConfig single_task(data::OpKind op, std::uint64_t seed);
  static RunConfig multitask(std::uint64_t seed);

  void validate() const;
  [[nodiscard]] int n_heads() const { return task == TaskMode::multitask ? data::kNumOps : 1; }
  [[nodiscard]] data::OpKind op_for_head(int head) const;
  [[nodiscard]] model::Architecture architecture() const;
  [[nodiscard]] data::SplitSpec split_spec() const;

  void to_manifest(Manifest& m) const;
  static RunConfig from_manifest(const Manifest& m);
};

std::string_view task_name(TaskMode t);

struct GrokDetector {
  double threshold = 0.98;
  int patience = 20;
};

struct EvalPoint {
  std::int64_t step = 0;
  std::vector<double> train_acc;  // per head; empty when not evaluated at this step
  std::vector<double> test_acc;   // per head
};

// grok step = first eval step s with accuracy >= threshold at s and at each
// of the next `patience` evaluations.
std::optional<std::int64_t> detect_grok(std::span<const EvalPoint> trace, const GrokDetector& det, int head = 0);
std::optional<std::int64_t> detect_grok(std::span<const std::int64_t> steps, std::span<const double> accuracy,
                                        const GrokDetector& det);

// Online form of detect_grok.
class GrokTracker {
 public:
  explicit GrokTracker(GrokDetector det) : det_(det) {}
  // Returns the grok step on the evaluation that confirms it, once.
  std::optional<std::int64_t> push(std::int64_t step, double accuracy);
  [[nodiscard]] std::optional<std::int64_t> grok_step() const { return grok_; }

 private:
  GrokDetector det_;
  std::int64_t run_start_ = -1;
  int run_length_ = 0;
  std::optional<std::int64_t> grok_;
};

struct TrainResult {
  std::vector<EvalPoint> trace;
  std::vector<std::optional<std::int64_t>> grok_steps;  // per head
  std::int64_t final_step = 0;
  model::ParamVector final_params;
  std::vector<double> final_test_acc;
};

// Per-head accuracy against the configured ops, one encoder pass per chunk.
std::vector<double> head_accuracies(const model::Transformer& net, const model::ParamVector& params,
                                    const data::Batch& set, const RunConfig& cfg);

// Trains with dense checkpoints into `store_dir` (a new or empty directory)
// and writes manifest.txt and trace.csv there. Single-task and multitask
// share the loop; the config decides heads, cadence and stop rule.
TrainResult train_dense(const RunConfig& cfg, const std::filesystem::path& store_dir);
TrainResult train_multitask(const RunConfig& cfg, const std::filesystem::path& store_dir);

void write_trace_csv(const std::filesystem::path& path, std::span<const EvalPoint> trace, int n_heads);
std::vector<EvalPoint> read_trace_csv(const std::filesystem::path& path);

// ---- interventions ----

enum class InterventionMode { A, B, C, D, E };
enum class Flavor { update_projected, gradient_projected };

std::string_view mode_name(InterventionMode m);
std::optional<InterventionMode> parse_mode(std::string_view s);
std::string_view flavor_name(Flavor f);
std::optional<Flavor> parse_flavor(std::string_view s);

struct InterventionConfig {
  InterventionMode mode = InterventionMode::A;
  Flavor flavor = Flavor::gradient_projected;
  std::size_t k = 3;
  std::size_t window = 20;
  std::optional<double> weight_decay;  // overrides the run's AdamW decay
};

// What one training step did, for tests and diagnostics.
struct StepRecord {
  std::int64_t step = 0;
  const linalg::Matrix* basis = nullptr;  // null when no projection was applied
  std::span<const double> realized_delta;  // full parameter vector
};

struct InterventionResult {
  std::vector<EvalPoint> trace;
  std::optional<std::int64_t> grok_step;
  std::int64_t final_step = 0;
  model::ParamVector final_params;
};

// Single-task run with a rank-K projection hook on the attention slice.
// Stops at the evaluation confirming grokking (or max_steps); checkpoints
// are not written.
InterventionResult run_intervention(const InterventionConfig& icfg, const RunConfig& base,
                                    const std::function<void(const StepRecord&)>& observer = {});

}  // namespace gradsed::experiment

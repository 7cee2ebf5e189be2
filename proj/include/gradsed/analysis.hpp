#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "gradsed/centroid.hpp"
#include "gradsed/data.hpp"
#include "gradsed/experiment.hpp"
#include "gradsed/sed.hpp"
#include "gradsed/store.hpp"

namespace gradsed::experiment {

inline constexpr std::size_t kAnalysisBatch = 512;

struct AnalysisConfig {
  sed::EstimatorKind estimator = sed::EstimatorKind::gradient;
  std::size_t window = 20;
  std::size_t k = 3;
  double eps_rel = centroid::kDefaultEpsRel;
  std::uint64_t probe_seed = 0;
  std::size_t n_points = 40;
  std::size_t n_random = centroid::kRandomDirections;
  std::vector<data::OpKind> ops;  // empty: every op the run trains
  bool rank90 = true;
};

struct AnalysisRow {
  data::OpKind op = data::OpKind::add;
  int head = 0;
  centroid::CouplingReport report;
};

struct AnalysisResult {
  std::string run_id;
  AnalysisConfig config;
  std::vector<std::optional<std::int64_t>> grok_steps;  // per head
  std::vector<std::int64_t> steps;                     // analysis checkpoints
  std::vector<AnalysisRow> rows;                       // step-major, then op
  // Per-op estimator only: pairwise |cos| of the ops' top-1 directions at
  // each analysis step, pairs in (0,1),(0,2),...,(2,3) order.
  std::vector<std::vector<double>> per_op_top1_cos;

  [[nodiscard]] std::vector<const AnalysisRow*> rows_for(data::OpKind op) const;
  [[nodiscard]] double peak_rbar(data::OpKind op) const;
  [[nodiscard]] double peak_r1(data::OpKind op) const;
};

// Instantaneous comparison at one checkpoint: per-example SVD basis, the
// normalized mean gradient (W=1) and the rolling-window gradient basis.
struct PerExampleReport {
  std::int64_t step = 0;
  centroid::CouplingReport per_example;
  centroid::CouplingReport mean_gradient;
  centroid::CouplingReport rolling;
  double cos_top1_vs_mean = 0.0;
  double mean_gradient_rel_error = 0.0;  // ||mean of rows - batch gradient|| / ||batch gradient||
};

// Offline analysis over one checkpoint store. Holds the probe set, the fixed
// analysis batch and memoized gradient rows and baselines, so repeated
// analyses of the same store (both estimators, ablations) share work.
class RunAnalyzer {
 public:
  explicit RunAnalyzer(const std::filesystem::path& store_dir);

  [[nodiscard]] const RunConfig& config() const { return cfg_; }
  [[nodiscard]] const CheckpointStore& store() const { return store_; }
  [[nodiscard]] const model::Transformer& net() const { return net_; }
  [[nodiscard]] const data::Batch& analysis_batch() const { return batch_; }
  [[nodiscard]] const std::vector<std::optional<std::int64_t>>& grok_steps() const { return grok_steps_; }
  [[nodiscard]] const std::string& run_id() const { return run_id_; }

  // n indices evenly spaced over [1, N-1] of the stored checkpoints.
  [[nodiscard]] std::vector<std::size_t> select_points(std::size_t n) const;
  [[nodiscard]] std::size_t index_of(std::int64_t step) const;

  AnalysisResult analyze(const AnalysisConfig& cfg);
  AnalysisResult analyze_at(const AnalysisConfig& cfg, const std::vector<std::size_t>& indices);
  PerExampleReport per_example(std::int64_t step, data::OpKind op, const AnalysisConfig& cfg);

  std::size_t rank90_at(std::int64_t step, data::OpKind op, std::uint64_t probe_seed);
  model::ParamVector params_at(std::size_t index) const;

  void clear_rows() { grad_rows_.clear(); attn_rows_.clear(); }

 private:
  int head_for(data::OpKind op) const;
  const data::Batch& probes(std::uint64_t seed);
  const std::vector<double>& gradient_row(std::size_t index, int head);
  const std::vector<double>& attention_row(std::size_t index);
  linalg::Matrix window_rows(sed::EstimatorKind kind, std::size_t index, std::size_t window, int head);

  std::filesystem::path dir_;
  RunConfig cfg_;
  CheckpointStore store_;
  model::Transformer net_;
  data::Split split_;
  data::Batch batch_;
  std::vector<std::optional<std::int64_t>> grok_steps_;
  std::string run_id_;
  std::map<std::uint64_t, data::Batch> probe_sets_;
  std::map<std::pair<std::size_t, int>, std::vector<double>> grad_rows_;
  std::map<std::size_t, std::vector<double>> attn_rows_;
  std::map<std::tuple<std::int64_t, int, std::uint64_t>, std::size_t> rank90_;
  centroid::BaselineCache baselines_;
  RngStream rand_dirs_;
};

void write_analysis_csv(std::ostream& out, const AnalysisResult& result, bool header = true);

enum class AblationAxis { window, k, eps, probe_seed };
std::string_view axis_name(AblationAxis a);
std::optional<AblationAxis> parse_axis(std::string_view s);

struct AblationRow {
  AblationAxis axis = AblationAxis::window;
  double value = 0.0;
  double peak_r1 = 0.0;
  double peak_rbar = 0.0;
  std::int64_t peak_step = 0;  // step of the R_1 peak
};

// Gradient-SED peak R_1 / R_bar per value on 20 evenly spaced checkpoints.
std::vector<AblationRow> ablate(RunAnalyzer& analyzer, AblationAxis axis, const std::vector<double>& values,
                                AnalysisConfig base = {});

void write_ablation_csv(std::ostream& out, const std::string& run_id, const std::vector<AblationRow>& rows,
                        bool header = true);

}  // namespace gradsed::experiment

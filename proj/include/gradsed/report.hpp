#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gradsed::report {

// One coupling row as written by the analysis CSV.
struct CouplingRow {
  std::string run_id, op, estimator;
  std::int64_t step = 0;
  std::int64_t grok_step = -1;
  std::size_t window = 0, k = 0;
  double eps_rel = 0.0;
  std::vector<double> ratios;  // R1..R3, NaN where absent
  double r_bar = 0.0;
  double a_random_median = 0.0;
  std::size_t rank90 = 0;
};

struct AblationEntry {
  std::string run_id, axis;
  double value = 0.0, peak_r1 = 0.0, peak_rbar = 0.0;
  std::int64_t peak_step = 0;
};

struct InterventionEntry {
  std::string run_id, op, mode, flavor;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  std::optional<std::int64_t> grok_step;
  std::int64_t final_step = 0;
  double final_test_acc = 0.0;
};

struct TraceSeries {
  std::string run_id;
  std::vector<std::int64_t> steps;
  std::vector<std::vector<double>> train_acc;  // per head; NaN where not evaluated
  std::vector<std::vector<double>> test_acc;   // per head
};

struct Inputs {
  std::vector<CouplingRow> coupling;
  std::vector<AblationEntry> ablation;
  std::vector<InterventionEntry> interventions;
  std::vector<TraceSeries> traces;
  [[nodiscard]] bool empty() const {
    return coupling.empty() && ablation.empty() && interventions.empty() && traces.empty();
  }
};

inline constexpr const char* kInterventionHeader =
    "run_id,op,mode,flavor,seed,weight_decay,grok_step,final_step,final_test_acc";

void write_intervention_csv(std::ostream& out, const InterventionEntry& e, bool header = true);

// Reads every *.csv below `dir` (sorted by path). Files are classified by
// header; an unknown header or a malformed row throws.
Inputs load_inputs(const std::filesystem::path& dir);
void load_csv(const std::filesystem::path& file, Inputs& into);

// mean(control) / mean(mode): the ratio-of-means speedup convention.
double speedup(std::span<const double> control, std::span<const double> mode);
// max / min over positive values.
double spread(std::span<const double> values);

struct Rendered {
  std::string markdown;
  std::map<std::string, std::string> svgs;  // file name -> content
};

// Pure function of the inputs. Throws on empty input.
Rendered render(const Inputs& inputs);

// Renders, then writes `out_md` and the SVGs next to it. Nothing is written
// if rendering fails.
void emit_report(const std::filesystem::path& in_dir, const std::filesystem::path& out_md);

}  // namespace gradsed::report

#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "gradsed/data.hpp"
#include "gradsed/linalg.hpp"
#include "gradsed/model.hpp"
#include "gradsed/rng.hpp"

namespace gradsed::centroid {

using linalg::Matrix;

inline constexpr double kDefaultEpsRel = 0.005;
inline constexpr std::size_t kRandomDirections = 20;

// Probe inputs with the labels of one head.
struct Probes {
  const data::Batch* batch = nullptr;
  std::span<const int> labels;
  int head = 0;
};

Probes probes_for(const data::Batch& batch, data::OpKind op, int head);

// N x 256 matrix; row i is the centroid of probe i.
Matrix centroid_matrix(const model::Transformer& net, const model::ParamVector& params, const Probes& probes);

std::size_t rank90(const Matrix& centroids);

// eps_rel * ||attention slice||; throws on a zero attention slice.
double perturbation_size(const model::ParamLayout& layout, const model::ParamVector& params, double eps_rel);

// Mean squared norm of the central-difference centroid derivative along a
// unit attention direction.
double sensitivity(const model::Transformer& net, const model::ParamVector& params, std::span<const double> direction,
                   double eps_rel, const Probes& probes);

// Normalized Gaussian attention directions, one derived stream per index.
std::vector<double> random_direction(std::size_t dim, const RngStream& stream, std::size_t index);

// Median with the even-count convention: mean of the two middle order
// statistics (the 10th and 11th of 20).
double median(std::vector<double> values);

struct CouplingReport {
  std::int64_t step = 0;
  double eps = 0.0;
  std::vector<double> a_dirs;    // sensitivity along each basis direction
  std::vector<double> a_random;  // baseline sensitivities
  double a_random_median = 0.0;
  std::vector<double> ratios;    // R_k
  double r_bar = 0.0;            // mean of R_1..R_K
  std::size_t rank90 = 0;
};

// Random-direction sensitivities are reusable across estimators that share
// a checkpoint, so they are memoized by (step, eps_rel, probe_seed, head).
class BaselineCache {
 public:
  using Key = std::tuple<std::int64_t, double, std::uint64_t, int>;
  const std::vector<double>* find(const Key& key) const;
  void store(const Key& key, std::vector<double> values);
  [[nodiscard]] std::size_t size() const { return entries_.size(); }

 private:
  std::map<Key, std::vector<double>> entries_;
};

struct CouplingOptions {
  double eps_rel = kDefaultEpsRel;
  std::size_t n_random = kRandomDirections;
  std::uint64_t probe_seed = 0;
  bool with_rank90 = true;
};

// R_k = A(v_k) / median_j A(r_j). `directions` rows are unit attention
// vectors. Random directions come from rand_stream.derive(step).derive(j).
CouplingReport coupling_ratio(const model::Transformer& net, const model::ParamVector& params,
                              const Matrix& directions, const Probes& probes, const RngStream& rand_stream,
                              std::int64_t step, const CouplingOptions& opts, BaselineCache* cache = nullptr);

// CSV rows keyed by run metadata.
struct ReportMeta {
  std::string run_id;
  std::string op;
  std::string estimator;
  std::int64_t grok_step = -1;
  std::size_t window = 0;
  std::size_t k = 0;
  double eps_rel = kDefaultEpsRel;
};

void write_csv_header(std::ostream& out);
void write_csv_row(std::ostream& out, const ReportMeta& meta, const CouplingReport& report);

}  // namespace gradsed::centroid

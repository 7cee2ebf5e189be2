#include "gradsed/centroid.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <stdexcept>

namespace gradsed::centroid {

Probes probes_for(const data::Batch& batch, data::OpKind op, int head) {
  return {&batch, batch.labels_for(op), head};
}

Matrix centroid_matrix(const model::Transformer& net, const model::ParamVector& params, const Probes& probes) {
  if (probes.batch == nullptr) throw std::invalid_argument("centroid_matrix: no probes");
  return net.centroids(params, probes.batch->inputs, probes.labels, probes.head);
}

std::size_t rank90(const Matrix& centroids) {
  return linalg::rank_at_energy(linalg::singular_values(centroids), 0.9);
}

double perturbation_size(const model::ParamLayout& layout, const model::ParamVector& params, double eps_rel) {
  if (!(eps_rel > 0.0)) throw std::invalid_argument("perturbation_size: eps_rel must be positive");
  const double norm = model::attention_norm(layout, params.values);
  if (!(norm > 0.0)) throw std::invalid_argument("perturbation_size: zero attention norm");
  return eps_rel * norm;
}

namespace {

double sensitivity_at(const model::Transformer& net, const model::ParamVector& params,
                      std::span<const double> direction, double eps, const Probes& probes) {
  model::ParamVector shifted = params;
  model::add_to_attention(net.layout(), direction, eps, shifted.values);
  const Matrix up = centroid_matrix(net, shifted, probes);
  shifted = params;
  model::add_to_attention(net.layout(), direction, -eps, shifted.values);
  const Matrix down = centroid_matrix(net, shifted, probes);
  const double a = ((up - down) / (2.0 * eps)).rowwise().squaredNorm().mean();
  if (!std::isfinite(a)) throw std::runtime_error("sensitivity: non-finite centroid");
  return a;
}

}  // namespace

double sensitivity(const model::Transformer& net, const model::ParamVector& params, std::span<const double> direction,
                   double eps_rel, const Probes& probes) {
  if (direction.size() != net.layout().attention_size()) throw std::invalid_argument("sensitivity: direction size");
  double sq = 0.0;
  for (double x : direction) sq += x * x;
  if (std::abs(std::sqrt(sq) - 1.0) > 1e-8) throw std::invalid_argument("sensitivity: direction is not unit norm");
  return sensitivity_at(net, params, direction, perturbation_size(net.layout(), params, eps_rel), probes);
}

std::vector<double> random_direction(std::size_t dim, const RngStream& stream, std::size_t index) {
  RngStream rng = stream.derive(static_cast<std::uint64_t>(index));
  std::vector<double> v(dim);
  double sq = 0.0;
  for (double& x : v) {
    x = rng.normal();
    sq += x * x;
  }
  const double inv = 1.0 / std::sqrt(sq);
  for (double& x : v) x *= inv;
  return v;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: empty input");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

const std::vector<double>* BaselineCache::find(const Key& key) const {
  const auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

void BaselineCache::store(const Key& key, std::vector<double> values) { entries_[key] = std::move(values); }

CouplingReport coupling_ratio(const model::Transformer& net, const model::ParamVector& params,
                              const Matrix& directions, const Probes& probes, const RngStream& rand_stream,
                              std::int64_t step, const CouplingOptions& opts, BaselineCache* cache) {
  const std::size_t dim = net.layout().attention_size();
  if (directions.rows() == 0 || static_cast<std::size_t>(directions.cols()) != dim)
    throw std::invalid_argument("coupling_ratio: degenerate basis");
  if (linalg::orthonormality_error(directions) > 1e-8) throw std::invalid_argument("coupling_ratio: basis not orthonormal");
  if (opts.n_random == 0) throw std::invalid_argument("coupling_ratio: need random directions");

  CouplingReport rep;
  rep.step = step;
  rep.eps = perturbation_size(net.layout(), params, opts.eps_rel);

  const BaselineCache::Key key{step, opts.eps_rel, opts.probe_seed, probes.head};
  if (const auto* hit = cache ? cache->find(key) : nullptr; hit && hit->size() == opts.n_random) {
    rep.a_random = *hit;
  } else {
    const RngStream per_step = rand_stream.derive(static_cast<std::uint64_t>(step));
    for (std::size_t j = 0; j < opts.n_random; ++j)
      rep.a_random.push_back(sensitivity_at(net, params, random_direction(dim, per_step, j), rep.eps, probes));
    if (cache) cache->store(key, rep.a_random);
  }
  rep.a_random_median = median(rep.a_random);
  if (!(rep.a_random_median > 0.0)) throw std::runtime_error("coupling_ratio: zero random baseline");

  for (Eigen::Index k = 0; k < directions.rows(); ++k) {
    const std::span<const double> v(directions.row(k).data(), dim);
    const double a = sensitivity_at(net, params, v, rep.eps, probes);
    rep.a_dirs.push_back(a);
    rep.ratios.push_back(a / rep.a_random_median);
  }
  double sum = 0.0;
  for (double r : rep.ratios) sum += r;
  rep.r_bar = sum / static_cast<double>(rep.ratios.size());
  if (opts.with_rank90) rep.rank90 = rank90(centroid_matrix(net, params, probes));
  return rep;
}

void write_csv_header(std::ostream& out) {
  out << "run_id,op,estimator,step,grok_step,W,K,eps_rel,R1,R2,R3,Rbar,A_v1,A_v2,A_v3,A_rand_median,rank90\n";
}

void write_csv_row(std::ostream& out, const ReportMeta& meta, const CouplingReport& r) {
  const auto cell = [&](const std::vector<double>& v, std::size_t i) {
    if (i < v.size()) out << v[i];
    out << ',';
  };
  out << std::setprecision(10);
  out << meta.run_id << ',' << meta.op << ',' << meta.estimator << ',' << r.step << ',' << meta.grok_step << ','
      << meta.window << ',' << meta.k << ',' << meta.eps_rel << ',';
  for (std::size_t i = 0; i < 3; ++i) cell(r.ratios, i);
  out << r.r_bar << ',';
  for (std::size_t i = 0; i < 3; ++i) cell(r.a_dirs, i);
  out << r.a_random_median << ',' << r.rank90 << '\n';
}

}  // namespace gradsed::centroid

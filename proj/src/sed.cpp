#include "gradsed/sed.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gradsed::sed {

std::string_view estimator_name(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::update: return "update";
    case EstimatorKind::gradient: return "gradient";
    case EstimatorKind::per_op: return "per_op";
    case EstimatorKind::per_example: return "per_example";
  }
  return "?";
}

std::optional<EstimatorKind> parse_estimator(std::string_view name) {
  for (auto kind : {EstimatorKind::update, EstimatorKind::gradient, EstimatorKind::per_op, EstimatorKind::per_example})
    if (estimator_name(kind) == name) return kind;
  return std::nullopt;
}

RollingBuffer::RollingBuffer(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), storage_(static_cast<Eigen::Index>(capacity), static_cast<Eigen::Index>(dim)) {
  if (capacity == 0) throw std::invalid_argument("RollingBuffer: capacity must be positive");
}

void RollingBuffer::push(std::span<const double> row) {
  if (row.size() != dim_) throw std::invalid_argument("RollingBuffer: row dimension mismatch");
  std::copy(row.begin(), row.end(), storage_.row(static_cast<Eigen::Index>(next_)).data());
  next_ = (next_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

void RollingBuffer::clear() {
  size_ = 0;
  next_ = 0;
}

Matrix RollingBuffer::stacked() const {
  Matrix out(static_cast<Eigen::Index>(size_), static_cast<Eigen::Index>(dim_));
  const std::size_t oldest = size_ < capacity_ ? 0 : next_;
  for (std::size_t i = 0; i < size_; ++i)
    out.row(static_cast<Eigen::Index>(i)) = storage_.row(static_cast<Eigen::Index>((oldest + i) % capacity_));
  return out;
}

SedBasis sed_from_rows(const linalg::MatrixRef& rows, std::size_t k, EstimatorKind kind, std::size_t window,
                       std::int64_t step) {
  if (rows.rows() == 0) throw std::invalid_argument("sed: empty buffer");
  auto svd = linalg::topk_right_singular(rows, k);
  linalg::canonicalize_signs(svd.directions);
  SedBasis out;
  out.directions = std::move(svd.directions);
  out.singular_values = std::move(svd.singular_values);
  out.kind = kind;
  out.window = window;
  out.rows_used = static_cast<std::size_t>(rows.rows());
  out.step = step;
  out.rank_limited = svd.rank_limited;
  return out;
}

SedBasis update_sed(const RollingBuffer& deltas, std::size_t k, std::int64_t step) {
  return sed_from_rows(deltas.rows(), k, EstimatorKind::update, deltas.capacity(), step);
}

SedBasis gradient_sed(const RollingBuffer& grads, std::size_t k, std::int64_t step) {
  return sed_from_rows(grads.rows(), k, EstimatorKind::gradient, grads.capacity(), step);
}

std::vector<SedBasis> per_op_sed(data::OpKind op, std::span<const std::int64_t> steps,
                                 std::span<const std::vector<double>> rows, std::size_t k, std::size_t window) {
  if (steps.size() != rows.size()) throw std::invalid_argument("per_op_sed: steps and rows differ in length");
  if (rows.empty()) throw std::invalid_argument("per_op_sed: missing checkpoints");
  RollingBuffer buffer(window, rows.front().size());
  std::vector<SedBasis> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    buffer.push(rows[i]);
    SedBasis basis = sed_from_rows(buffer.rows(), k, EstimatorKind::per_op, window, steps[i]);
    basis.op = op;
    out.push_back(std::move(basis));
  }
  return out;
}

PerExampleSed per_example_sed_from_rows(Matrix rows, std::size_t k, std::int64_t step) {
  if (rows.rows() < 2) throw std::invalid_argument("per_example_sed: need at least two examples");
  const linalg::Vector mean = rows.colwise().mean().transpose();
  rows.rowwise() -= mean.transpose();
  if (rows.cwiseAbs().maxCoeff() == 0.0) throw std::invalid_argument("per_example_sed: all rows identical");
  PerExampleSed out;
  out.basis = sed_from_rows(rows, k, EstimatorKind::per_example, static_cast<std::size_t>(rows.rows()), step);
  out.mean_gradient.assign(mean.data(), mean.data() + mean.size());
  return out;
}

PerExampleSed per_example_sed(const model::Transformer& net, const model::ParamVector& params,
                              const data::Batch& batch, std::span<const int> labels, int head, std::size_t k,
                              std::int64_t step) {
  return per_example_sed_from_rows(net.per_example_attention_grads(params, batch.inputs, labels, head), k, step);
}

std::vector<double> attention_gradient(const model::Transformer& net, const model::ParamVector& params,
                                       const data::Batch& batch, std::span<const int> labels, int head) {
  const auto lg = net.loss_and_param_grad(params, batch.inputs, labels, head);
  return model::extract_attention(net.layout(), lg.grad.values);
}

double abs_cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("abs_cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::abs(dot) / std::sqrt(na * nb);
}

}  // namespace gradsed::sed

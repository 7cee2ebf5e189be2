#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "gradsed/data.hpp"
#include "gradsed/linalg.hpp"
#include "gradsed/model.hpp"

namespace gradsed::sed {

using linalg::Matrix;

enum class EstimatorKind { update, gradient, per_op, per_example };

std::string_view estimator_name(EstimatorKind kind);
std::optional<EstimatorKind> parse_estimator(std::string_view name);

// FIFO window of at most `capacity` rows. Rows live in a ring, so the
// physical order is a rotation of arrival order; right singular vectors do
// not depend on row order.
class RollingBuffer {
 public:
  RollingBuffer(std::size_t capacity, std::size_t dim);

  void push(std::span<const double> row);
  void clear();

  [[nodiscard]] std::size_t size() const { return size_; }
  [[nodiscard]] bool empty() const { return size_ == 0; }
  [[nodiscard]] std::size_t capacity() const { return capacity_; }
  [[nodiscard]] std::size_t dim() const { return dim_; }

  // Stored rows in ring order (the first size() rows of the ring).
  [[nodiscard]] linalg::MatrixRef rows() const { return storage_.topRows(static_cast<Eigen::Index>(size_)); }
  // Rows oldest first.
  [[nodiscard]] Matrix stacked() const;

 private:
  std::size_t capacity_;
  std::size_t dim_;
  std::size_t size_ = 0;
  std::size_t next_ = 0;
  Matrix storage_;
};

struct SedBasis {
  Matrix directions;                    // k x P_attn, orthonormal rows
  std::vector<double> singular_values;  // full spectrum of the stacked rows
  EstimatorKind kind = EstimatorKind::gradient;
  std::optional<data::OpKind> op;
  std::size_t window = 0;
  std::size_t rows_used = 0;
  std::int64_t step = 0;
  bool rank_limited = false;

  [[nodiscard]] std::size_t k() const { return static_cast<std::size_t>(directions.rows()); }
};

// Top-k right singular vectors of raw (uncentered) rows, sign-canonicalized
// so each direction's largest-magnitude coordinate is positive.
SedBasis sed_from_rows(const linalg::MatrixRef& rows, std::size_t k, EstimatorKind kind, std::size_t window,
                       std::int64_t step);

SedBasis update_sed(const RollingBuffer& deltas, std::size_t k, std::int64_t step = 0);
SedBasis gradient_sed(const RollingBuffer& grads, std::size_t k, std::int64_t step = 0);

// Rolling-window SED over one op's gradient sequence. rows[i] is g_op at
// steps[i]; returns one basis per checkpoint, each built from the up-to-W
// most recent rows ending at that checkpoint.
std::vector<SedBasis> per_op_sed(data::OpKind op, std::span<const std::int64_t> steps,
                                 std::span<const std::vector<double>> rows, std::size_t k, std::size_t window);

struct PerExampleSed {
  SedBasis basis;
  std::vector<double> mean_gradient;  // batch mean of the per-example rows
};

// Per-example loss gradients on the attention slice, centered by the mean
// row, then top-k right singular vectors.
PerExampleSed per_example_sed(const model::Transformer& net, const model::ParamVector& params,
                              const data::Batch& batch, std::span<const int> labels, int head, std::size_t k,
                              std::int64_t step = 0);
PerExampleSed per_example_sed_from_rows(Matrix rows, std::size_t k, std::int64_t step = 0);

// Mean-reduced loss gradient restricted to the attention slice.
std::vector<double> attention_gradient(const model::Transformer& net, const model::ParamVector& params,
                                       const data::Batch& batch, std::span<const int> labels, int head);

double abs_cosine(std::span<const double> a, std::span<const double> b);

}  // namespace gradsed::sed

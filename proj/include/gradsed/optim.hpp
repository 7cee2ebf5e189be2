#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "gradsed/linalg.hpp"
#include "gradsed/model.hpp"

namespace gradsed::optim {

using linalg::Matrix;

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 1.0;

  void validate() const;
};

struct AdamWState {
  std::int64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  static AdamWState zeros(std::size_t n) { return {0, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)}; }
  friend bool operator==(const AdamWState&, const AdamWState&) = default;
};

enum class HookTarget { none, gradient_pre_moments, update_post_step };
enum class ProjectionMode { keep, remove };
enum class BasisSource { sed, random };

std::string_view hook_target_name(HookTarget t);
std::string_view projection_mode_name(ProjectionMode m);

// Rank-K projection of the attention slice, applied either to the gradient
// before the moment updates or to the realized step after it is formed.
// Non-attention coordinates are never touched.
struct ProjectionHook {
  HookTarget target = HookTarget::none;
  ProjectionMode mode = ProjectionMode::keep;
  BasisSource source = BasisSource::sed;
  int rank = 3;
};

// keep: V^T V x; remove: x - V^T V x. Basis rows must be orthonormal.
std::vector<double> project(std::span<const double> vec, const linalg::MatrixRef& basis, ProjectionMode mode);
void project_in_place(std::span<double> vec, const linalg::MatrixRef& basis, ProjectionMode mode);

// Plain AdamW step over any flat vector (no hook).
std::vector<double> adamw_step(AdamWState& state, std::span<double> params, std::span<const double> grad,
                               const AdamWConfig& cfg);

// One AdamW step with decoupled decay:
//   theta <- theta - lr * wd * theta - lr * mhat / (sqrt(vhat) + eps)
// `basis` (rows over the attention slice) is required iff the hook is
// active. Returns the realized step params_after - params_before, computed
// from the stored values so the identity holds bit-exactly.
std::vector<double> adamw_step(AdamWState& state, model::ParamVector& params, std::span<const double> grad,
                               const AdamWConfig& cfg, const model::ParamLayout& layout,
                               const ProjectionHook& hook = {}, const Matrix* basis = nullptr);

}  // namespace gradsed::optim

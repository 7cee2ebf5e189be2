#include "gradsed/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace gradsed::optim {

namespace {

constexpr double kBasisTolerance = 1e-8;

using MutVec = Eigen::Map<linalg::Vector>;

void check_basis(const linalg::MatrixRef& basis, std::size_t dim) {
  if (static_cast<std::size_t>(basis.cols()) != dim) throw std::invalid_argument("projection basis: dimension mismatch");
  if (basis.rows() > 0 && linalg::orthonormality_error(basis) > kBasisTolerance)
    throw std::invalid_argument("projection basis: rows are not orthonormal");
}

// Applies the projection to the attention blocks of a full-layout vector.
void project_attention(std::span<double> full, const model::ParamLayout& layout, const Matrix& basis,
                       ProjectionMode mode) {
  std::vector<double> slice = model::extract_attention(layout, full);
  project_in_place(slice, basis, mode);
  model::insert_attention(layout, slice, full);
}

}  // namespace

void AdamWConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("AdamWConfig: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("AdamWConfig: betas must lie in [0, 1)");
  if (!(eps > 0.0) || !(weight_decay >= 0.0)) throw std::invalid_argument("AdamWConfig: eps/weight_decay invalid");
}

std::string_view hook_target_name(HookTarget t) {
  switch (t) {
    case HookTarget::none: return "none";
    case HookTarget::gradient_pre_moments: return "gradient_pre_moments";
    case HookTarget::update_post_step: return "update_post_step";
  }
  return "?";
}

std::string_view projection_mode_name(ProjectionMode m) { return m == ProjectionMode::keep ? "keep" : "remove"; }

void project_in_place(std::span<double> vec, const linalg::MatrixRef& basis, ProjectionMode mode) {
  check_basis(basis, vec.size());
  MutVec x(vec.data(), static_cast<Eigen::Index>(vec.size()));
  const linalg::Vector coeffs = basis * x;
  if (mode == ProjectionMode::keep)
    x = basis.transpose() * coeffs;
  else
    x.noalias() -= basis.transpose() * coeffs;
}

std::vector<double> project(std::span<const double> vec, const linalg::MatrixRef& basis, ProjectionMode mode) {
  std::vector<double> out(vec.begin(), vec.end());
  project_in_place(out, basis, mode);
  return out;
}

namespace {

// Moment update and raw step for an already-hooked gradient.
std::vector<double> moments_and_step(AdamWState& state, std::span<const double> params, std::span<const double> g,
                                     const AdamWConfig& cfg) {
  const std::size_t n = params.size();
  if (g.size() != n || state.m.size() != n || state.v.size() != n) throw std::invalid_argument("adamw_step: shape mismatch");
  for (double x : g)
    if (!std::isfinite(x)) throw std::runtime_error("adamw_step: non-finite gradient");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  std::vector<double> delta(n);
  for (std::size_t i = 0; i < n; ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    delta[i] = -cfg.lr * cfg.weight_decay * params[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
  return delta;
}

// params += delta, then delta <- params_after - params_before.
void apply_step(std::span<double> params, std::vector<double>& delta) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double before = params[i];
    params[i] = before + delta[i];
    delta[i] = params[i] - before;
  }
}

}  // namespace

std::vector<double> adamw_step(AdamWState& state, std::span<double> params, std::span<const double> grad,
                               const AdamWConfig& cfg) {
  std::vector<double> delta = moments_and_step(state, params, grad, cfg);
  apply_step(params, delta);
  return delta;
}

std::vector<double> adamw_step(AdamWState& state, model::ParamVector& params, std::span<const double> grad,
                               const AdamWConfig& cfg, const model::ParamLayout& layout, const ProjectionHook& hook,
                               const Matrix* basis) {
  if (layout.size() != params.size()) throw std::invalid_argument("adamw_step: layout does not match parameters");
  if (hook.target == HookTarget::none) return adamw_step(state, params.span(), grad, cfg);
  if (basis == nullptr) throw std::invalid_argument("adamw_step: active hook without a basis");
  check_basis(*basis, layout.attention_size());

  std::vector<double> delta;
  if (hook.target == HookTarget::gradient_pre_moments) {
    std::vector<double> g(grad.begin(), grad.end());
    project_attention(g, layout, *basis, hook.mode);
    delta = moments_and_step(state, params.span(), g, cfg);
  } else {
    delta = moments_and_step(state, params.span(), grad, cfg);
    project_attention(delta, layout, *basis, hook.mode);
  }
  apply_step(params.span(), delta);
  return delta;
}

}  // namespace gradsed::optim

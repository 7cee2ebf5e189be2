#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradsed/model.hpp"
#include "gradsed/optim.hpp"
#include "gradsed/rng.hpp"

using namespace gradsed;
using optim::AdamWConfig;
using optim::AdamWState;
using optim::HookTarget;
using optim::ProjectionHook;
using optim::ProjectionMode;

namespace {

std::vector<double> gaussian(std::size_t n, RngStream& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Small model so a full-rank basis over the attention slice is cheap.
model::Architecture tiny() {
  model::Architecture a = model::Architecture::single_task();
  a.d_model = 8;
  a.n_heads = 2;
  a.head_dim = 4;
  a.d_ff = 16;
  return a;
}

}  // namespace

TEST_CASE("scalar AdamW reference step") {
  std::vector<double> theta{1.0};
  const std::vector<double> g{0.5};
  AdamWState st = AdamWState::zeros(1);
  const AdamWConfig cfg;
  const auto delta = optim::adamw_step(st, theta, g, cfg);
  // m_hat = g, v_hat = g^2 on the first step.
  const double expected = 1.0 - 1e-3 * 1.0 * 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
  CHECK(std::abs(theta[0] - expected) < 1e-12);
  CHECK(theta[0] == doctest::Approx(0.998).epsilon(1e-6));
  CHECK(delta[0] == theta[0] - 1.0);
  CHECK(st.step == 1);
  CHECK(st.m[0] == doctest::Approx(0.05));
  CHECK(st.v[0] == doctest::Approx(0.02 * 0.25));
}

TEST_CASE("second scalar step follows the bias-corrected recursion") {
  std::vector<double> theta{1.0};
  AdamWState st = AdamWState::zeros(1);
  const AdamWConfig cfg;
  optim::adamw_step(st, theta, std::vector<double>{0.5}, cfg);
  const double t1 = theta[0];
  optim::adamw_step(st, theta, std::vector<double>{-0.25}, cfg);
  const double m = 0.9 * 0.05 + 0.1 * -0.25;
  const double v = 0.98 * 0.005 + 0.02 * 0.0625;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.98 * 0.98);
  const double expected = t1 - 1e-3 * t1 - 1e-3 * mhat / (std::sqrt(vhat) + 1e-8);
  CHECK(std::abs(theta[0] - expected) < 1e-15);
}

TEST_CASE("no decay and zero betas give sign-like normalized descent") {
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.beta1 = 0.0;
  cfg.beta2 = 0.0;
  std::vector<double> theta{0.3, -2.0, 5.0};
  const std::vector<double> g{0.7, -1e-3, 40.0};
  AdamWState st = AdamWState::zeros(3);
  for (int step = 0; step < 3; ++step) {
    const std::vector<double> before = theta;
    optim::adamw_step(st, theta, g, cfg);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(std::abs((theta[i] - before[i]) - (-1e-3 * g[i] / (std::abs(g[i]) + 1e-8))) < 1e-15);
  }
}

TEST_CASE("adamw_step rejects bad input") {
  std::vector<double> theta{1.0};
  AdamWState st = AdamWState::zeros(1);
  CHECK_THROWS(optim::adamw_step(st, theta, std::vector<double>{std::nan("")}, AdamWConfig{}));
  CHECK_THROWS(optim::adamw_step(st, theta, std::vector<double>{1.0, 2.0}, AdamWConfig{}));
  AdamWConfig bad;
  bad.beta2 = 1.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("projector algebra") {
  RngStream rng(4, "proj");
  const linalg::Matrix basis = linalg::random_orthonormal(40, 3, rng);
  const std::vector<double> x = gaussian(40, rng);
  const auto keep = optim::project(x, basis, ProjectionMode::keep);
  const auto remove = optim::project(x, basis, ProjectionMode::remove);
  for (std::size_t i = 0; i < 40; ++i) CHECK(std::abs(keep[i] + remove[i] - x[i]) < 1e-12);
  CHECK(std::abs(dot(keep, remove)) < 1e-12);
  const auto twice = optim::project(keep, basis, ProjectionMode::keep);
  for (std::size_t i = 0; i < 40; ++i) CHECK(std::abs(twice[i] - keep[i]) < 1e-12);

  std::vector<double> in_span(40, 0.0);
  for (int j = 0; j < 40; ++j) in_span[static_cast<std::size_t>(j)] = 2.0 * basis(0, j) - basis(2, j);
  const auto kept = optim::project(in_span, basis, ProjectionMode::keep);
  for (std::size_t i = 0; i < 40; ++i) CHECK(std::abs(kept[i] - in_span[i]) < 1e-10);
  const auto perp = optim::project(remove, basis, ProjectionMode::keep);
  for (double v : perp) CHECK(std::abs(v) < 1e-12);

  CHECK_THROWS(optim::project(std::vector<double>(39, 0.0), basis, ProjectionMode::keep));
  linalg::Matrix skew = basis;
  skew(0, 0) += 0.1;
  CHECK_THROWS(optim::project(x, skew, ProjectionMode::keep));
}

TEST_CASE("hooked steps on a small transformer") {
  const model::Transformer net(tiny());
  const auto& layout = net.layout();
  const std::size_t pa = layout.attention_size();
  RngStream rng(6, "hook");
  const model::ParamVector p0 = net.init_params(RngStream(6, "init"));
  const std::vector<double> g1 = gaussian(p0.size(), rng);
  const std::vector<double> g2 = gaussian(p0.size(), rng);
  const AdamWConfig cfg;

  auto run = [&](const ProjectionHook& hook, const linalg::Matrix* basis, std::vector<std::vector<double>>* deltas) {
    model::ParamVector p = p0;
    AdamWState st = AdamWState::zeros(p.size());
    for (const auto* g : {&g1, &g2}) {
      const model::ParamVector before = p;
      auto d = optim::adamw_step(st, p, *g, cfg, layout, hook, basis);
      for (std::size_t i = 0; i < p.size(); ++i) REQUIRE(d[i] == p.values[i] - before.values[i]);
      if (deltas) deltas->push_back(std::move(d));
    }
    return std::make_pair(p, st);
  };

  const auto plain = run({}, nullptr, nullptr);

  SUBCASE("keep with a full-rank basis reproduces the unhooked trajectory") {
    const linalg::Matrix full = linalg::Matrix::Identity(static_cast<Eigen::Index>(pa), static_cast<Eigen::Index>(pa));
    for (HookTarget t : {HookTarget::gradient_pre_moments, HookTarget::update_post_step}) {
      const auto hooked = run({t, ProjectionMode::keep}, &full, nullptr);
      for (std::size_t i = 0; i < p0.size(); ++i) CHECK(std::abs(hooked.first.values[i] - plain.first.values[i]) < 1e-15);
    }
  }

  SUBCASE("remove and keep update deltas sum to the unhooked delta") {
    RngStream brng(6, "basis");
    const linalg::Matrix basis = linalg::random_orthonormal(pa, 3, brng);
    model::ParamVector pk = p0, pr = p0, pn = p0;
    AdamWState sk = AdamWState::zeros(p0.size()), sr = sk, sn = sk;
    const auto dk = optim::adamw_step(sk, pk, g1, cfg, layout, {HookTarget::update_post_step, ProjectionMode::keep}, &basis);
    const auto dr = optim::adamw_step(sr, pr, g1, cfg, layout, {HookTarget::update_post_step, ProjectionMode::remove}, &basis);
    const auto dn = optim::adamw_step(sn, pn, g1, cfg, layout);
    const auto ak = model::extract_attention(layout, dk), ar = model::extract_attention(layout, dr),
               an = model::extract_attention(layout, dn);
    for (std::size_t i = 0; i < pa; ++i) CHECK(std::abs(ak[i] + ar[i] - an[i]) < 1e-15);
    // Moments ignore the update hook entirely.
    CHECK(sk == sn);
    CHECK(sr == sn);
  }

  SUBCASE("non-attention coordinates are untouched by the gradient hook at step one") {
    RngStream brng(6, "basis2");
    const linalg::Matrix basis = linalg::random_orthonormal(pa, 3, brng);
    model::ParamVector ph = p0, pn = p0;
    AdamWState sh = AdamWState::zeros(p0.size()), sn = sh;
    optim::adamw_step(sh, ph, g1, cfg, layout, {HookTarget::gradient_pre_moments, ProjectionMode::remove}, &basis);
    optim::adamw_step(sn, pn, g1, cfg, layout);
    std::vector<bool> attention(p0.size(), false);
    for (const auto& layer : layout.layers())
      for (std::size_t i = 0; i < layout.attention_block(); ++i) attention[layer.wq + i] = true;
    std::size_t outside = 0, changed = 0;
    for (std::size_t i = 0; i < p0.size(); ++i) {
      if (attention[i]) {
        changed += ph.values[i] != pn.values[i];
      } else {
        ++outside;
        CHECK(ph.values[i] == pn.values[i]);
        CHECK(sh.m[i] == sn.m[i]);
      }
    }
    CHECK(outside > 0);
    CHECK(changed > 0);
  }

  SUBCASE("active hook requires a valid basis") {
    model::ParamVector p = p0;
    AdamWState st = AdamWState::zeros(p.size());
    CHECK_THROWS(optim::adamw_step(st, p, g1, cfg, layout, {HookTarget::update_post_step, ProjectionMode::keep}, nullptr));
    const linalg::Matrix wrong = linalg::Matrix::Identity(3, 5);
    CHECK_THROWS(optim::adamw_step(st, p, g1, cfg, layout, {HookTarget::update_post_step, ProjectionMode::keep}, &wrong));
  }
}

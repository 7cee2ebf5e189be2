#include <doctest.h>

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <vector>

#include "gradsed/linalg.hpp"
#include "gradsed/rng.hpp"

using namespace gradsed;
using linalg::Matrix;

namespace {

Matrix gaussian(Eigen::Index m, Eigen::Index n, RngStream& rng) {
  Matrix a(m, n);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = rng.normal();
  return a;
}

// Smallest cosine of the principal angles between two row spaces of
// orthonormal rows: the smallest singular value of A B^T.
double min_principal_cos(const Matrix& a, const Matrix& b) {
  const Eigen::MatrixXd cross = a * b.transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(cross);
  return svd.singularValues().minCoeff();
}

}  // namespace

TEST_CASE("sym_eigh on trivial matrices") {
  const auto id = linalg::sym_eigh(Matrix::Identity(2, 2));
  CHECK(id.values(0) == doctest::Approx(1.0));
  CHECK(id.values(1) == doctest::Approx(1.0));

  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 1.0;
  d(1, 1) = 3.0;
  const auto e = linalg::sym_eigh(d);
  CHECK(e.values(0) == doctest::Approx(3.0));
  CHECK(e.values(1) == doctest::Approx(1.0));
  CHECK(std::abs(e.vectors(1, 0)) == doctest::Approx(1.0));
  CHECK(std::abs(e.vectors(0, 1)) == doctest::Approx(1.0));
}

TEST_CASE("sym_eigh reconstructs random symmetric matrices") {
  RngStream rng(7, "eigh");
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<Eigen::Index>(1 + rng.below(16));
    const Matrix g = gaussian(n, n, rng);
    const Matrix a = g + g.transpose();
    const auto e = linalg::sym_eigh(a);
    const Matrix recon = e.vectors * e.values.asDiagonal() * e.vectors.transpose();
    CHECK((a - recon).norm() / a.norm() < 1e-10);
    CHECK((e.vectors.transpose() * e.vectors - Matrix::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-10);
    for (Eigen::Index i = 1; i < n; ++i) CHECK(e.values(i - 1) >= e.values(i));
  }
}

TEST_CASE("sym_eigh rejects bad input") {
  Matrix a = Matrix::Identity(3, 3);
  a(0, 1) = 1.0;
  CHECK_THROWS_AS(linalg::sym_eigh(a), std::invalid_argument);
  Matrix b = Matrix::Identity(2, 2);
  b(0, 0) = std::nan("");
  CHECK_THROWS_AS(linalg::sym_eigh(b), std::invalid_argument);
  CHECK_THROWS_AS(linalg::sym_eigh(Matrix::Zero(2, 3)), std::invalid_argument);
}

TEST_CASE("topk_right_singular: single row and repeated rows") {
  Matrix v(1, 4);
  v << 3.0, 0.0, -4.0, 0.0;
  const auto one = linalg::topk_right_singular(v, 1);
  REQUIRE(one.directions.rows() == 1);
  CHECK(std::abs(std::abs(one.directions.row(0).dot(v.row(0))) / 5.0 - 1.0) < 1e-14);

  Matrix rep(5, 4);
  for (int i = 0; i < 5; ++i) rep.row(i) = v.row(0);
  const auto r = linalg::topk_right_singular(rep, 1);
  CHECK(std::abs(std::abs(r.directions.row(0).dot(v.row(0))) / 5.0 - 1.0) < 1e-14);
  REQUIRE(r.singular_values.size() >= 2);
  CHECK(r.singular_values[1] < 1e-10 * r.singular_values[0]);

  const auto limited = linalg::topk_right_singular(rep, 2);
  CHECK(limited.rank_limited);
  CHECK(limited.directions.rows() == 1);

  CHECK_THROWS(linalg::topk_right_singular(Matrix::Zero(3, 4), 1));
}

TEST_CASE("topk_right_singular matches a dense SVD oracle") {
  RngStream rng(11, "svd");
  for (int trial = 0; trial < 500; ++trial) {
    const auto m = static_cast<Eigen::Index>(1 + rng.below(16));
    const auto n = static_cast<Eigen::Index>(1 + rng.below(16));
    const Matrix a = gaussian(m, n, rng);
    const auto k = static_cast<std::size_t>(1 + rng.below(static_cast<std::uint64_t>(std::min(m, n))));
    const auto got = linalg::topk_right_singular(a, k);
    Eigen::JacobiSVD<Eigen::MatrixXd> oracle(Eigen::MatrixXd(a), Eigen::ComputeFullV);
    const Eigen::MatrixXd v = oracle.matrixV().leftCols(static_cast<Eigen::Index>(k)).transpose();
    REQUIRE(static_cast<std::size_t>(got.directions.rows()) == k);
    CHECK(linalg::orthonormality_error(got.directions) < 1e-8);
    const Matrix vr = v;
    INFO("m=" << m << " n=" << n << " k=" << k);
    // Skip instances whose k-th gap is too small for any subspace to be
    // well defined.
    const auto& s = oracle.singularValues();
    if (static_cast<Eigen::Index>(k) < s.size() && s(static_cast<Eigen::Index>(k) - 1) - s(static_cast<Eigen::Index>(k)) < 1e-6 * s(0))
      continue;
    CHECK(min_principal_cos(got.directions, vr) > 1.0 - 1e-8);
    for (Eigen::Index i = 0; i < s.size(); ++i) CHECK(std::abs(got.singular_values[static_cast<std::size_t>(i)] - s(i)) < 1e-9 * s(0));
  }
}

TEST_CASE("topk_right_singular on a wide matrix") {
  RngStream rng(3, "wide");
  const Matrix a = gaussian(4, 6, rng);
  const auto got = linalg::topk_right_singular(a, 2);
  Eigen::JacobiSVD<Eigen::MatrixXd> oracle(Eigen::MatrixXd(a), Eigen::ComputeFullV);
  const Matrix v = oracle.matrixV().leftCols(2).transpose();
  CHECK(min_principal_cos(got.directions, v) >= 1.0 - 1e-8);
}

TEST_CASE("rank_at_energy") {
  const std::vector<double> spike{5.0, 0.0, 0.0};
  CHECK(linalg::rank_at_energy(spike, 0.9) == 1);
  const std::vector<double> flat(10, 1.0);
  CHECK(linalg::rank_at_energy(flat, 0.9) == 9);
  CHECK(linalg::rank_at_energy(flat, 0.95) == 10);
  CHECK_THROWS(linalg::rank_at_energy(std::vector<double>{0.0, 0.0}, 0.9));
  CHECK_THROWS(linalg::rank_at_energy(flat, 1.0));
  CHECK_THROWS(linalg::rank_at_energy(flat, 0.0));

  RngStream rng(2, "energy");
  std::vector<double> s(40);
  for (double& x : s) x = rng.uniform();
  std::sort(s.rbegin(), s.rend());
  std::size_t prev = 0;
  for (double f = 0.01; f < 1.0; f += 0.01) {
    const std::size_t r = linalg::rank_at_energy(s, f);
    CHECK(r >= prev);
    prev = r;
  }
}

TEST_CASE("singular_values agrees with a dense oracle") {
  RngStream rng(5, "sv");
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = static_cast<Eigen::Index>(1 + rng.below(12));
    const auto n = static_cast<Eigen::Index>(1 + rng.below(12));
    const Matrix a = gaussian(m, n, rng);
    const auto got = linalg::singular_values(a);
    Eigen::JacobiSVD<Eigen::MatrixXd> oracle{Eigen::MatrixXd(a)};
    const auto& s = oracle.singularValues();
    REQUIRE(got.size() >= static_cast<std::size_t>(s.size()));
    for (Eigen::Index i = 0; i < s.size(); ++i) CHECK(std::abs(got[static_cast<std::size_t>(i)] - s(i)) < 1e-9 * s(0));
  }
}

TEST_CASE("random_orthonormal frames") {
  RngStream a(1, "frame");
  const Matrix full = linalg::random_orthonormal(3, 3, a);
  CHECK((full * full.transpose() - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-10);

  RngStream big(1, "frame-big");
  const Matrix wide = linalg::random_orthonormal(131072, 3, big);
  CHECK(linalg::orthonormality_error(wide) < 1e-10);

  RngStream x(9, "left"), y(9, "left"), z(9, "right");
  const Matrix fx = linalg::random_orthonormal(50, 4, x);
  const Matrix fy = linalg::random_orthonormal(50, 4, y);
  const Matrix fz = linalg::random_orthonormal(50, 4, z);
  CHECK(fx == fy);
  CHECK_FALSE(fx == fz);

  RngStream bad(1, "bad");
  CHECK_THROWS(linalg::random_orthonormal(2, 3, bad));
}

TEST_CASE("canonicalize_signs makes the largest-magnitude coordinate positive") {
  Matrix m(2, 3);
  m << 0.1, -0.9, 0.2, -0.5, 0.4, 0.3;
  linalg::canonicalize_signs(m);
  CHECK(m(0, 1) == 0.9);
  CHECK(m(1, 0) == 0.5);
  CHECK(m(1, 1) == -0.4);
}

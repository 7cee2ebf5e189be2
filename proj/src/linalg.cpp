#include "gradsed/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gradsed::linalg {

namespace {

constexpr int kMaxSweeps = 100;
constexpr double kConvergence = 1e-12;
constexpr double kSymmetryTolerance = 1e-10;
constexpr double kNullSingularRatio = 1e-7;

double off_diagonal_norm(const Matrix& a) {
  double sum = 0.0;
  const auto n = a.rows();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) sum += a(i, j) * a(i, j);
  return std::sqrt(sum);
}

}  // namespace

EigenDecomposition sym_eigh(const MatrixRef& input) {
  if (input.rows() != input.cols()) throw std::invalid_argument("sym_eigh: matrix is not square");
  if (!input.allFinite()) throw std::invalid_argument("sym_eigh: non-finite entries");
  const Eigen::Index n = input.rows();
  const double scale = n > 0 ? input.cwiseAbs().maxCoeff() : 0.0;
  if ((input - input.transpose()).cwiseAbs().maxCoeff() > kSymmetryTolerance * std::max(scale, 1e-300))
    throw std::invalid_argument("sym_eigh: matrix is not symmetric");

  Matrix a = 0.5 * (input + input.transpose());
  Matrix v = Matrix::Identity(n, n);
  const double norm = a.norm();
  EigenDecomposition out;

  for (int sweep = 0; sweep < kMaxSweeps && norm > 0.0; ++sweep) {
    if (off_diagonal_norm(a) < kConvergence * norm) break;
    out.sweeps = sweep + 1;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        double* rp = a.row(p).data();
        double* rq = a.row(q).data();
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = rp[k];
          const double aqk = rq[k];
          rp[k] = c * apk - s * aqk;
          rq[k] = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values[i] = a(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i)]);
    out.vectors.col(i) = v.col(order[static_cast<std::size_t>(i)]);
  }
  return out;
}

SingularSet topk_right_singular(const MatrixRef& rows, std::size_t k) {
  if (rows.rows() < 1) throw std::invalid_argument("topk_right_singular: no rows");
  if (!rows.allFinite()) throw std::invalid_argument("topk_right_singular: non-finite entries");
  const Matrix gram = rows * rows.transpose();
  const auto eig = sym_eigh(gram);
  if (!(eig.values[0] > 0.0)) throw std::invalid_argument("topk_right_singular: zero matrix");

  // Project the rows onto every Gram eigenvector and take norms: this keeps
  // small singular values accurate to roughly eps * sigma_max, where the
  // square root of a Gram eigenvalue would only reach sqrt(eps) * sigma_max.
  Matrix projected = eig.vectors.transpose() * rows;
  SingularSet out;
  std::vector<double> norms(static_cast<std::size_t>(projected.rows()));
  for (Eigen::Index i = 0; i < projected.rows(); ++i) norms[static_cast<std::size_t>(i)] = projected.row(i).norm();
  out.singular_values = norms;
  std::sort(out.singular_values.rbegin(), out.singular_values.rend());

  const double top = out.singular_values.front();
  std::size_t usable = 0;
  while (usable < std::min(k, norms.size()) && norms[usable] > kNullSingularRatio * top) ++usable;
  out.rank_limited = usable < k;

  const auto kk = static_cast<Eigen::Index>(usable);
  out.directions = projected.topRows(kk);
  for (Eigen::Index i = 0; i < kk; ++i) out.directions.row(i) /= norms[static_cast<std::size_t>(i)];
  orthonormalize_rows(out.directions);
  return out;
}

std::size_t rank_at_energy(std::span<const double> singular_values, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("rank_at_energy: fraction outside (0,1)");
  double total = 0.0;
  for (double s : singular_values) {
    if (!(s >= 0.0)) throw std::invalid_argument("rank_at_energy: negative or non-finite singular value");
    total += s * s;
  }
  if (!(total > 0.0)) throw std::invalid_argument("rank_at_energy: all-zero spectrum");
  double cumulative = 0.0;
  for (std::size_t i = 0; i < singular_values.size(); ++i) {
    cumulative += singular_values[i] * singular_values[i];
    if (cumulative >= fraction * total) return i + 1;
  }
  return singular_values.size();
}

std::vector<double> singular_values(const MatrixRef& a) {
  const bool tall = a.rows() >= a.cols();
  const Matrix gram = tall ? Matrix(a.transpose() * a) : Matrix(a * a.transpose());
  const auto eig = sym_eigh(gram);
  const Matrix projected = tall ? Matrix(a * eig.vectors) : Matrix(eig.vectors.transpose() * a);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(eig.values.size()));
  for (Eigen::Index i = 0; i < eig.values.size(); ++i)
    out.push_back(tall ? projected.col(i).norm() : projected.row(i).norm());
  std::sort(out.rbegin(), out.rend());
  return out;
}

void orthonormalize_rows(Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (int pass = 0; pass < 2; ++pass)
      for (Eigen::Index j = 0; j < i; ++j) m.row(i) -= m.row(i).dot(m.row(j)) * m.row(j);
    const double len = m.row(i).norm();
    if (!(len > 0.0)) throw std::invalid_argument("orthonormalize_rows: linearly dependent rows");
    m.row(i) /= len;
  }
}

Matrix random_orthonormal(std::size_t dim, std::size_t k, RngStream& rng) {
  if (k > dim) throw std::invalid_argument("random_orthonormal: k exceeds dimension");
  Matrix frame(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < frame.rows(); ++i)
    for (Eigen::Index j = 0; j < frame.cols(); ++j) frame(i, j) = rng.normal();
  orthonormalize_rows(frame);
  return frame;
}

double orthonormality_error(const MatrixRef& v) {
  if (v.rows() == 0) return 0.0;
  const Matrix g = v * v.transpose();
  return (g - Matrix::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff();
}

void canonicalize_signs(Matrix& rows) {
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    Eigen::Index arg = 0;
    rows.row(i).cwiseAbs().maxCoeff(&arg);
    if (rows(i, arg) < 0.0) rows.row(i) *= -1.0;
  }
}

}  // namespace gradsed::linalg

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <vector>

#include "gradsed/rng.hpp"

namespace gradsed::linalg {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using MatrixRef = Eigen::Ref<const Matrix>;

struct EigenDecomposition {
  Vector values;   // descending
  Matrix vectors;  // column i pairs with values[i]
  int sweeps = 0;
};

// Cyclic Jacobi. Stops once the off-diagonal Frobenius norm drops below
// 1e-12 * ||A||_F or after 100 sweeps. Throws std::invalid_argument on
// non-square, non-symmetric (relative 1e-10) or non-finite input.
EigenDecomposition sym_eigh(const MatrixRef& a);

struct SingularSet {
  Matrix directions;                     // k x n, unit rows, mutually orthogonal
  std::vector<double> singular_values;   // full spectrum of the row matrix, descending
  bool rank_limited = false;             // fewer than the requested k directions returned
};

// Top-k right singular vectors of a short-fat row matrix through the m x m
// Gram matrix, so n can be in the hundreds of thousands. Directions whose
// singular value is below 1e-7 of the largest are treated as null and
// dropped (rank_limited is then set). Throws on an all-zero matrix.
SingularSet topk_right_singular(const MatrixRef& rows, std::size_t k);

// Smallest r with sum_{i<=r} s_i^2 >= fraction * sum s_i^2.
std::size_t rank_at_energy(std::span<const double> singular_values, double fraction);

// Singular values (descending) of an arbitrary matrix via eigenvalues of
// the smaller Gram matrix.
std::vector<double> singular_values(const MatrixRef& a);

// k x dim matrix with orthonormal rows: Gaussian draws followed by two
// passes of modified Gram-Schmidt.
Matrix random_orthonormal(std::size_t dim, std::size_t k, RngStream& rng);

// Two-pass modified Gram-Schmidt on the rows of m, in place.
void orthonormalize_rows(Matrix& m);

// max |V V^T - I| over the rows of v.
double orthonormality_error(const MatrixRef& v);

// Flip each row so that its largest-magnitude coordinate is positive.
void canonicalize_signs(Matrix& rows);

}  // namespace gradsed::linalg

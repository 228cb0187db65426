#pragma once

#include <cstddef>
#include <vector>

#include "kfep/matrix.hpp"

namespace kfep {

// Eigendecomposition of a symmetric matrix. Columns of `vectors` are
// orthonormal eigenvectors; `values` are sorted in descending order.
struct SymEigen {
  Matrix vectors;
  Vector values;
};

// Factor matrices A_1..A_d of a rank-r Kruskal tensor, each n_k x r.
struct KruskalFactors {
  std::vector<Matrix> factors;

  std::size_t rank() const { return factors.empty() ? 0 : factors.front().cols(); }
  bool consistent() const;
};

struct Svd {
  Matrix u;      // rows x r
  Vector sigma;  // descending
  Matrix v;      // cols x r
};

inline constexpr std::size_t kDefaultKronMaxEntries = std::size_t{1} << 26;

// Relative asymmetry above which sym_eig refuses the input; below it the input
// is symmetrized.
inline constexpr double kSymmetryTolerance = 1e-6;

SymEigen sym_eig(const Matrix& m);

Matrix kron(const Matrix& a, const Matrix& b, std::size_t max_entries = kDefaultKronMaxEntries);
Matrix khatri_rao(const Matrix& a, const Matrix& b);

// Column-stacking vec (column-major), so kron(S, A) * vec(X) == vec(A X S^T).
Vector vec(const Matrix& m);
Matrix unvec(std::span<const double> v, std::size_t rows, std::size_t cols);

// argmin_x ||a x - b||_F via ridge-stabilized normal equations.
Matrix lstsq(const Matrix& a, const Matrix& b);
// Moore-Penrose pseudo-inverse of a full-column-rank matrix, (Z^T Z)^-1 Z^T.
Matrix pinv(const Matrix& z);

// Inverse of a symmetric positive definite matrix (Cholesky).
Matrix spd_inverse(const Matrix& m);
// Solves a general square system m x = b (LU with partial pivoting).
Matrix solve(const Matrix& m, const Matrix& b);

// Thin SVD truncated to the leading `rank` triplets.
Svd truncated_svd(const Matrix& m, std::size_t rank);

double asymmetry(const Matrix& m);
Matrix symmetrized(const Matrix& m);

}  // namespace kfep

#include "kfep/linalg.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <limits>
#include <string>

#include "kfep/error.hpp"

namespace kfep {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMajor> view(const Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

Matrix from_eigen(const Eigen::MatrixXd& e) {
  Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    for (Eigen::Index j = 0; j < e.cols(); ++j) m(i, j) = e(i, j);
  return m;
}

void require_finite(const Matrix& m, const char* what) {
  if (!m.all_finite()) throw ValidationError(std::string(what) + ": non-finite entries");
}

}  // namespace

bool KruskalFactors::consistent() const {
  return std::all_of(factors.begin(), factors.end(), [&](const Matrix& f) { return f.cols() == rank(); });
}

double asymmetry(const Matrix& m) {
  if (!m.square()) throw DimensionError("asymmetry of non-square matrix");
  double diff = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j) diff = std::max(diff, std::abs(m(i, j) - m(j, i)));
  const double scale = max_abs(m);
  return scale > 0.0 ? diff / scale : diff;
}

Matrix symmetrized(const Matrix& m) {
  Matrix s = m;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j) s(i, j) = s(j, i) = 0.5 * (m(i, j) + m(j, i));
  return s;
}

SymEigen sym_eig(const Matrix& m) {
  if (!m.square()) throw DimensionError("sym_eig: matrix is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  require_finite(m, "sym_eig");
  if (asymmetry(m) > kSymmetryTolerance) throw ValidationError("sym_eig: matrix is not symmetric");
  const Matrix s = symmetrized(m);
  const std::size_t n = s.rows();
  if (n == 0) return {};

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(Eigen::MatrixXd(view(s)));
  if (solver.info() != Eigen::Success) throw NumericError("sym_eig: eigensolver did not converge");

  // Eigen returns ascending order.
  SymEigen out{Matrix(n, n), Vector(n)};
  for (std::size_t j = 0; j < n; ++j) {
    const auto src = static_cast<Eigen::Index>(n - 1 - j);
    out.values[j] = solver.eigenvalues()(src);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = solver.eigenvectors()(static_cast<Eigen::Index>(i), src);
  }
  return out;
}

Matrix kron(const Matrix& a, const Matrix& b, std::size_t max_entries) {
  const std::size_t rows = a.rows() * b.rows(), cols = a.cols() * b.cols();
  if (a.rows() != 0 && b.rows() != 0 && (rows / a.rows() != b.rows() || (cols > 0 && rows > max_entries / cols)))
    throw SizeError("kron: result " + std::to_string(rows) + "x" + std::to_string(cols) + " exceeds entry limit");
  Matrix out(rows, cols);
  const std::size_t p = b.rows(), q = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double aij = a(i, j);
      for (std::size_t k = 0; k < p; ++k)
        for (std::size_t l = 0; l < q; ++l) out(i * p + k, j * q + l) = aij * b(k, l);
    }
  return out;
}

Matrix khatri_rao(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw DimensionError("khatri_rao: column counts " + std::to_string(a.cols()) + " and " + std::to_string(b.cols()));
  const std::size_t m = a.rows(), n = b.rows(), r = a.cols();
  Matrix out(m * n, r);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < r; ++j) out(i * n + k, j) = a(i, j) * b(k, j);
  return out;
}

Vector vec(const Matrix& m) {
  Vector v(m.size());
  for (std::size_t j = 0; j < m.cols(); ++j)
    for (std::size_t i = 0; i < m.rows(); ++i) v[j * m.rows() + i] = m(i, j);
  return v;
}

Matrix unvec(std::span<const double> v, std::size_t rows, std::size_t cols) {
  if (v.size() != rows * cols)
    throw DimensionError("unvec: length " + std::to_string(v.size()) + " != " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  Matrix m(rows, cols);
  for (std::size_t j = 0; j < cols; ++j)
    for (std::size_t i = 0; i < rows; ++i) m(i, j) = v[j * rows + i];
  return m;
}

Matrix lstsq(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DimensionError("lstsq: row counts differ");
  require_finite(a, "lstsq");
  require_finite(b, "lstsq");
  Matrix gram = matmul_tn(a, a);
  const std::size_t n = gram.rows();
  if (n == 0) return Matrix(0, b.cols());
  const double ridge = 1e-12 * trace(gram) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) gram(i, i) += ridge;
  const Matrix rhs = matmul_tn(a, b);

  Eigen::LLT<Eigen::MatrixXd> llt(Eigen::MatrixXd(view(gram)));
  if (llt.info() != Eigen::Success || !(trace(gram) > 0.0)) throw SingularityError("lstsq: normal equations are singular");
  const Eigen::MatrixXd x = llt.solve(Eigen::MatrixXd(view(rhs)));
  // LLT accepts some semi-definite inputs; reject if the factor collapsed.
  const auto& l = llt.matrixL();
  double dmin = std::numeric_limits<double>::infinity(), dmax = 0.0;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    const double d = l(i, i);
    dmin = std::min(dmin, d);
    dmax = std::max(dmax, d);
  }
  if (!(dmin > 1e-5 * dmax) || !x.allFinite()) throw SingularityError("lstsq: system is rank deficient");
  return from_eigen(x);
}

Matrix pinv(const Matrix& z) { return lstsq(z, Matrix::identity(z.rows())); }

Matrix spd_inverse(const Matrix& m) {
  if (!m.square()) throw DimensionError("spd_inverse: non-square matrix");
  require_finite(m, "spd_inverse");
  const Matrix s = symmetrized(m);
  Eigen::LLT<Eigen::MatrixXd> llt(Eigen::MatrixXd(view(s)));
  if (llt.info() != Eigen::Success) throw SingularityError("spd_inverse: matrix is not positive definite");
  const auto& l = llt.matrixL();
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(s.rows()); ++i)
    if (!(l(i, i) > 0.0)) throw SingularityError("spd_inverse: matrix is singular");
  const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(s.rows(), s.cols()));
  if (!inv.allFinite()) throw SingularityError("spd_inverse: inverse is not finite");
  return symmetrized(from_eigen(inv));
}

Matrix solve(const Matrix& m, const Matrix& b) {
  if (!m.square() || m.rows() != b.rows()) throw DimensionError("solve: shape mismatch");
  require_finite(m, "solve");
  Eigen::FullPivLU<Eigen::MatrixXd> lu(Eigen::MatrixXd(view(m)));
  if (!lu.isInvertible()) throw SingularityError("solve: matrix is singular");
  return from_eigen(lu.solve(Eigen::MatrixXd(view(b))));
}

Svd truncated_svd(const Matrix& m, std::size_t rank) {
  require_finite(m, "truncated_svd");
  const std::size_t r = std::min({rank, m.rows(), m.cols()});
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(view(m)), Eigen::ComputeThinU | Eigen::ComputeThinV);
  Svd out{Matrix(m.rows(), r), Vector(r), Matrix(m.cols(), r)};
  for (std::size_t j = 0; j < r; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    out.sigma[j] = svd.singularValues()(jj);
    for (std::size_t i = 0; i < m.rows(); ++i) out.u(i, j) = svd.matrixU()(static_cast<Eigen::Index>(i), jj);
    for (std::size_t i = 0; i < m.cols(); ++i) out.v(i, j) = svd.matrixV()(static_cast<Eigen::Index>(i), jj);
  }
  return out;
}

}  // namespace kfep

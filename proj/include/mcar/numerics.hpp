#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <stdexcept>
#include <string>

namespace mcar {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace detail {

inline void check_square_finite(const Matrix& m, const char* who) {
  if (m.rows() == 0 || m.rows() != m.cols())
    throw std::invalid_argument(std::string(who) + ": square matrix required");
  if (!m.allFinite())
    throw std::invalid_argument(std::string(who) + ": non-finite entries");
}

inline void check_symmetric(const Matrix& m, const char* who) {
  double scale = 1.0 + m.cwiseAbs().maxCoeff();
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw std::invalid_argument(std::string(who) + ": matrix not symmetric");
}

}  // namespace detail

// e^{Mt} via scaling-and-squaring with a Pade approximant. Relative accuracy
// better than 1e-12 for ||Mt|| up to ~50.
inline Matrix matrix_exponential(const Matrix& m, double t = 1.0) {
  detail::check_square_finite(m, "matrix_exponential");
  if (!std::isfinite(t)) throw std::invalid_argument("matrix_exponential: non-finite t");
  return (m * t).exp();
}

// S(h) = int_0^h e^{As} ds, read off the augmented exponential
//   exp([[A, I], [0, 0]] h) = [[e^{Ah}, S(h)], [0, I]].
// Exact for singular A, which is why the simulators use it instead of A^{-1}.
inline Matrix matrix_exponential_integral(const Matrix& a, double h) {
  detail::check_square_finite(a, "matrix_exponential_integral");
  if (!std::isfinite(h) || h < 0.0)
    throw std::invalid_argument("matrix_exponential_integral: h must be finite and >= 0");
  const Eigen::Index n = a.rows();
  Matrix block = Matrix::Zero(2 * n, 2 * n);
  block.topLeftCorner(n, n) = a;
  block.topRightCorner(n, n) = Matrix::Identity(n, n);
  return matrix_exponential(block, h).topRightCorner(n, n);
}

// int_0^dt e^{As} Q e^{A^T s} ds, the covariance of an OU increment over dt.
// Computed from one exponential of the doubled matrix M = [[A, Q], [0, -A^T]]:
// the top-right block of e^{M dt} is F(dt) and the integral equals
// F(dt) e^{A^T dt}. Output is symmetrized.
inline Matrix ou_increment_covariance(const Matrix& a, const Matrix& q, double dt) {
  detail::check_square_finite(a, "ou_increment_covariance");
  detail::check_square_finite(q, "ou_increment_covariance");
  if (a.rows() != q.rows())
    throw std::invalid_argument("ou_increment_covariance: dimension mismatch");
  detail::check_symmetric(q, "ou_increment_covariance");
  if (!std::isfinite(dt) || dt < 0.0)
    throw std::invalid_argument("ou_increment_covariance: dt must be finite and >= 0");
  const Eigen::Index n = a.rows();
  if (dt == 0.0) return Matrix::Zero(n, n);
  Matrix block = Matrix::Zero(2 * n, 2 * n);
  block.topLeftCorner(n, n) = a;
  block.topRightCorner(n, n) = q;
  block.bottomRightCorner(n, n) = -a.transpose();
  Matrix e = matrix_exponential(block, dt);
  Matrix cov = e.topRightCorner(n, n) * e.topLeftCorner(n, n).transpose();
  return 0.5 * (cov + cov.transpose());
}

// Largest real part among the eigenvalues. Negative iff e^{Mt} -> 0.
inline double spectral_abscissa(const Matrix& m) {
  detail::check_square_finite(m, "spectral_abscissa");
  Eigen::EigenSolver<Matrix> es(m, /*computeEigenvectors=*/false);
  return es.eigenvalues().real().maxCoeff();
}

// Solves A X + X A^T + Q = 0 for the stationary covariance of dX = AX dt + noise
// with noise covariance rate Q. The equation is vectorized into the n^2 x n^2
// linear system (I (x) A + A (x) I) vec(X) = -vec(Q); fine for the small state
// dimensions used here. Residual is checked against 1e-9 ||Q||.
inline Matrix stationary_state_covariance(const Matrix& a, const Matrix& q) {
  detail::check_square_finite(a, "stationary_state_covariance");
  detail::check_square_finite(q, "stationary_state_covariance");
  if (a.rows() != q.rows())
    throw std::invalid_argument("stationary_state_covariance: dimension mismatch");
  detail::check_symmetric(q, "stationary_state_covariance");
  if (spectral_abscissa(a) >= 0.0)
    throw std::runtime_error("stationary_state_covariance: drift matrix not stable, process not stationary");
  const Eigen::Index n = a.rows();
  Matrix sys = Matrix::Zero(n * n, n * n);
  // vec is column-major: vec(AX) = (I (x) A) vec X, vec(X A^T) = (A (x) I) vec X.
  for (Eigen::Index j = 0; j < n; ++j)
    sys.block(j * n, j * n, n, n) += a;
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < n; ++k)
        sys(i + j * n, i + k * n) += a(j, k);
  Vector rhs = -Eigen::Map<const Vector>(q.data(), n * n);
  Vector x = sys.partialPivLu().solve(rhs);
  Matrix cov = Eigen::Map<const Matrix>(x.data(), n, n);
  cov = 0.5 * (cov + cov.transpose());
  double qnorm = q.norm();
  double resid = (a * cov + cov * a.transpose() + q).norm();
  if (resid > 1e-9 * (qnorm > 0.0 ? qnorm : 1.0))
    throw std::runtime_error("stationary_state_covariance: residual too large, system ill conditioned");
  return cov;
}

// Symmetric PSD square root by spectral decomposition. Eigenvalues in
// [-1e-10 ||M||, 0) are round-off and get clipped to zero; anything more
// negative means the input is materially indefinite.
inline Matrix sym_psd_sqrt(const Matrix& m) {
  detail::check_square_finite(m, "sym_psd_sqrt");
  detail::check_symmetric(m, "sym_psd_sqrt");
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success)
    throw std::runtime_error("sym_psd_sqrt: eigendecomposition failed");
  Vector lambda = es.eigenvalues();
  double scale = lambda.cwiseAbs().maxCoeff();
  if (lambda.minCoeff() < -1e-10 * (scale > 0.0 ? scale : 1.0))
    throw std::invalid_argument("sym_psd_sqrt: matrix is materially indefinite");
  Vector root = lambda.cwiseMax(0.0).cwiseSqrt();
  Matrix r = es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (r + r.transpose());
}

}  // namespace mcar

#pragma once

#include <mcar/numerics.hpp>

#include <stdexcept>
#include <vector>

namespace mcar {

// Drift parametrization of a d-dimensional CAR process of order p:
// dX = A_A X dt + E dL on the pd-dimensional state space, observation = first
// d coordinates of X.
struct McarParams {
  int d = 1;
  int p = 1;
  std::vector<Matrix> A;  // A_1 .. A_p, each d x d

  void validate() const {
    if (d < 1 || p < 1) throw std::invalid_argument("McarParams: d and p must be >= 1");
    if (static_cast<int>(A.size()) != p)
      throw std::invalid_argument("McarParams: expected p coefficient matrices");
    for (const Matrix& a : A) {
      if (a.rows() != d || a.cols() != d)
        throw std::invalid_argument("McarParams: coefficient matrix has wrong shape");
      if (!a.allFinite()) throw std::invalid_argument("McarParams: non-finite coefficients");
    }
  }
};

// Graph variant: A_k(theta) = theta(k,1) I + theta(k,2) Abar^T with Abar the
// column-normalized adjacency matrix.
struct GrcarParams {
  int p = 1;
  Matrix theta;      // p x 2
  Matrix adjacency;  // d x d, 0/1 entries, zero diagonal

  int d() const { return static_cast<int>(adjacency.rows()); }

  void validate() const {
    if (p < 1) throw std::invalid_argument("GrcarParams: p must be >= 1");
    if (theta.rows() != p || theta.cols() != 2)
      throw std::invalid_argument("GrcarParams: theta must be p x 2");
    if (!theta.allFinite()) throw std::invalid_argument("GrcarParams: non-finite theta");
    if (adjacency.rows() != adjacency.cols() || adjacency.rows() < 1)
      throw std::invalid_argument("GrcarParams: adjacency must be square");
    for (Eigen::Index i = 0; i < adjacency.rows(); ++i)
      for (Eigen::Index j = 0; j < adjacency.cols(); ++j) {
        double v = adjacency(i, j);
        if (v != 0.0 && v != 1.0)
          throw std::invalid_argument("GrcarParams: adjacency entries must be 0 or 1");
        if (i == j && v != 0.0)
          throw std::invalid_argument("GrcarParams: adjacency diagonal must be zero");
      }
  }
};

// Selection matrix E (pd x d): identity in the bottom block, zero elsewhere.
// Noise enters the state equation only through the highest derivative.
inline Matrix selection_matrix(int d, int p) {
  Matrix e = Matrix::Zero(p * d, d);
  e.bottomRows(d) = Matrix::Identity(d, d);
  return e;
}

// Companion form A_A (pd x pd): identity blocks on the super-diagonal, bottom
// block row (-A_p, ..., -A_1).
inline Matrix companion_matrix(const McarParams& params) {
  params.validate();
  const int d = params.d, p = params.p;
  Matrix m = Matrix::Zero(p * d, p * d);
  for (int j = 0; j + 1 < p; ++j)
    m.block(j * d, (j + 1) * d, d, d) = Matrix::Identity(d, d);
  for (int j = 0; j < p; ++j)
    m.block((p - 1) * d, j * d, d, d) = -params.A[p - 1 - j];
  return m;
}

inline bool is_stationary(const McarParams& params, double margin = 0.0) {
  return spectral_abscissa(companion_matrix(params)) < -margin;
}

// vec ordering over the tuple (A_1, ..., A_p): matrices in lag order, each one
// column-major, so A_j(l, i) sits at (j-1) d^2 + (i-1) d + l (1-based).
inline Vector vec_drift(const McarParams& params) {
  params.validate();
  const int dd = params.d * params.d;
  Vector v(params.p * dd);
  for (int j = 0; j < params.p; ++j)
    v.segment(j * dd, dd) = Eigen::Map<const Vector>(params.A[j].data(), dd);
  return v;
}

inline McarParams unvec_drift(const Vector& v, int d, int p) {
  if (d < 1 || p < 1 || v.size() != static_cast<Eigen::Index>(p) * d * d)
    throw std::invalid_argument("unvec_drift: length does not match d, p");
  McarParams params;
  params.d = d;
  params.p = p;
  params.A.reserve(p);
  for (int j = 0; j < p; ++j)
    params.A.push_back(Eigen::Map<const Matrix>(v.data() + j * d * d, d, d));
  return params;
}

// vec ordering for GrCAR parameters: (theta(1,1), theta(1,2), ..., theta(p,1),
// theta(p,2)).
inline Vector vec_theta(const Matrix& theta) {
  Vector v(2 * theta.rows());
  for (Eigen::Index k = 0; k < theta.rows(); ++k) {
    v(2 * k) = theta(k, 0);
    v(2 * k + 1) = theta(k, 1);
  }
  return v;
}

inline Matrix unvec_theta(const Vector& v, int p) {
  if (p < 1 || v.size() != 2 * static_cast<Eigen::Index>(p))
    throw std::invalid_argument("unvec_theta: length does not match p");
  Matrix theta(p, 2);
  for (int k = 0; k < p; ++k) {
    theta(k, 0) = v(2 * k);
    theta(k, 1) = v(2 * k + 1);
  }
  return theta;
}

// Column-normalized adjacency Abar = A diag(1/n_1, ..., 1/n_d) with in-degree
// n_i = max(1, sum_j A(j, i)); isolated nodes keep a zero column.
inline Matrix normalize_adjacency(const Matrix& adjacency) {
  if (adjacency.rows() != adjacency.cols())
    throw std::invalid_argument("normalize_adjacency: square matrix required");
  for (Eigen::Index i = 0; i < adjacency.rows(); ++i)
    for (Eigen::Index j = 0; j < adjacency.cols(); ++j)
      if (adjacency(i, j) != 0.0 && adjacency(i, j) != 1.0)
        throw std::invalid_argument("normalize_adjacency: entries must be 0 or 1");
  Matrix bar = adjacency;
  for (Eigen::Index i = 0; i < adjacency.cols(); ++i) {
    double n = std::max(1.0, adjacency.col(i).sum());
    bar.col(i) /= n;
  }
  return bar;
}

inline McarParams grcar_to_mcar(const GrcarParams& g) {
  g.validate();
  Matrix bar_t = normalize_adjacency(g.adjacency).transpose();
  McarParams params;
  params.d = g.d();
  params.p = g.p;
  params.A.reserve(g.p);
  for (int k = 0; k < g.p; ++k)
    params.A.push_back(g.theta(k, 0) * Matrix::Identity(params.d, params.d) +
                       g.theta(k, 1) * bar_t);
  return params;
}

// Inverse of grcar_to_mcar in the least-squares sense: per lag, project A_k
// onto span{I, Abar^T} under the Frobenius inner product. Linear in A_k, so
// estimator asymptotics carry over. The 2x2 Gram system is diagonal whenever
// the adjacency has a zero diagonal (tr Abar = 0) but is solved in full form.
inline GrcarParams grcar_theta_from_mcar(const McarParams& params, const Matrix& adjacency) {
  params.validate();
  Matrix bar_t = normalize_adjacency(adjacency).transpose();
  if (adjacency.rows() != params.d)
    throw std::invalid_argument("grcar_theta_from_mcar: adjacency dimension mismatch");
  const double gram_ii = static_cast<double>(params.d);
  const double gram_ib = bar_t.trace();
  const double gram_bb = bar_t.squaredNorm();
  const double det = gram_ii * gram_bb - gram_ib * gram_ib;
  if (det <= 1e-12 * gram_ii * std::max(gram_bb, 1.0))
    throw std::runtime_error("grcar_theta_from_mcar: graph degenerate, I and Abar^T do not span");
  GrcarParams g;
  g.p = params.p;
  g.adjacency = adjacency;
  g.theta.resize(params.p, 2);
  for (int k = 0; k < params.p; ++k) {
    double rhs_i = params.A[k].trace();
    double rhs_b = (bar_t.transpose() * params.A[k]).trace();
    g.theta(k, 0) = (gram_bb * rhs_i - gram_ib * rhs_b) / det;
    g.theta(k, 1) = (gram_ii * rhs_b - gram_ib * rhs_i) / det;
  }
  return g;
}

}  // namespace mcar

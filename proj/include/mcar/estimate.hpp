#pragma once

#include <mcar/grid.hpp>
#include <mcar/model.hpp>
#include <mcar/simulate.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace mcar {

// Approximation level a score statistic was built at: true derivatives from a
// simulated state path, finite differences of the observation, or finite
// differences with jump thresholding. The tag is informational; the
// accumulation formulas are identical.
enum class ScoreLevel { oracle_derivatives, finite_difference, thresholded };

// Score vector H and quadratic variation QV of the drift likelihood over one
// observation window. The drift estimate solves QV v = H. QV is symmetric
// PSD by construction, PD whenever the regressors over the coarse grid have
// full rank.
struct ScoreStats {
  Vector H;
  Matrix QV;
  double t = 0.0;
  ScoreLevel level = ScoreLevel::finite_difference;
};

enum class IncrementProvenance { oracle, thresholded };

// Per-coarse-interval d-vector increments attributed to the continuous
// martingale part of the highest derivative. Either exact (jump record known
// and subtracted) or approximate (jumps suppressed by thresholding).
struct IncrementSource {
  std::vector<Vector> increments;
  IncrementProvenance provenance = IncrementProvenance::oracle;
};

enum class ThresholdKind { power, explicit_values, data_driven };

// Per-interval, per-component jump thresholds. Entries must be nonnegative;
// +infinity disables thresholding for that entry and 0 suppresses everything.
struct ThresholdSchedule {
  std::vector<Vector> nu;
  ThresholdKind kind = ThresholdKind::explicit_values;
  Vector beta;               // power construction only
  double gamma = 0.0;        // data-driven construction only
  double eps = 0.0;          // data-driven construction only

  void validate(int d) const {
    for (const Vector& v : nu) {
      if (v.size() != d)
        throw std::invalid_argument("ThresholdSchedule: component count mismatch");
      for (Eigen::Index i = 0; i < v.size(); ++i)
        if (!(v(i) >= 0.0))
          throw std::invalid_argument("ThresholdSchedule: thresholds must be nonnegative");
    }
  }
};

inline ThresholdSchedule unbounded_thresholds(int n_intervals, int d) {
  if (n_intervals < 0 || d < 1)
    throw std::invalid_argument("unbounded_thresholds: bad shape");
  ThresholdSchedule s;
  s.kind = ThresholdKind::explicit_values;
  s.nu.assign(n_intervals,
              Vector::Constant(d, std::numeric_limits<double>::infinity()));
  return s;
}

inline ThresholdSchedule explicit_thresholds(std::vector<Vector> nu) {
  ThresholdSchedule s;
  s.kind = ThresholdKind::explicit_values;
  s.nu = std::move(nu);
  if (!s.nu.empty()) s.validate(static_cast<int>(s.nu.front().size()));
  return s;
}

// nu^(i,m) = spacing_m^beta_i. The admissible exponent range depends on the
// jump activity of the driver: (0, 1/2) when jumps are finitely many on
// compacts, (0, 1/4) otherwise.
inline ThresholdSchedule power_thresholds(const Partition& coarse, const Vector& beta,
                                          bool infinite_activity = false) {
  coarse.validate();
  const double upper = infinite_activity ? 0.25 : 0.5;
  for (Eigen::Index i = 0; i < beta.size(); ++i)
    if (!(beta(i) > 0.0 && beta(i) < upper))
      throw std::invalid_argument("power_thresholds: exponent outside (0, " +
                                  std::to_string(upper) + ")");
  ThresholdSchedule s;
  s.kind = ThresholdKind::power;
  s.beta = beta;
  s.nu.reserve(coarse.intervals());
  for (int m = 0; m < coarse.intervals(); ++m) {
    Vector v(beta.size());
    for (Eigen::Index i = 0; i < beta.size(); ++i)
      v(i) = std::pow(coarse.spacing(m), beta(i));
    s.nu.push_back(std::move(v));
  }
  return s;
}

namespace detail {

// Iterated forward differences of orders 0..p-1 anchored at fine index n,
// entrywise identical to forward_differences evaluated at that anchor.
inline std::vector<Vector> fd_stack_at_anchor(const std::vector<Vector>& values,
                                              const Partition& part, int n, int p) {
  if (n < 0 || n + p - 1 > part.intervals())
    throw std::invalid_argument("fd_stack_at_anchor: window does not fit");
  std::vector<Vector> w(values.begin() + n, values.begin() + n + p);
  std::vector<Vector> stack;
  stack.reserve(p);
  stack.push_back(w[0]);
  for (int level = 1; level < p; ++level) {
    for (int j = 0; j + level < p; ++j)
      w[j] = (w[j + 1] - w[j]) / part.spacing(n + j);
    stack.push_back(w[0]);
  }
  return stack;
}

// Lag-ordered regressor stack: block j-1 holds the derivative of order p-j.
inline Vector lag_stack(const std::vector<Vector>& derivatives, int d, int p) {
  Vector r(static_cast<Eigen::Index>(p) * d);
  for (int j = 1; j <= p; ++j) r.segment((j - 1) * d, d) = derivatives[p - j];
  return r;
}

// Number of usable coarse increments: the largest M with fine index of u_M at
// most N - p, so the difference window at every used anchor stays strictly
// inside the fine grid. Conservative by one interval on purpose.
inline int usable_increment_count(const std::vector<int>& fine_index, int n_fine, int p) {
  if (fine_index.empty() || fine_index.front() > n_fine - p)
    throw std::invalid_argument(
        "usable_increment_count: fine grid too short for the difference window");
  int mt = 0;
  for (std::size_t m = 0; m < fine_index.size(); ++m)
    if (fine_index[m] <= n_fine - p) mt = static_cast<int>(m);
  return mt;
}

inline Matrix spd_inverse(const Matrix& sigma, const char* who) {
  if (sigma.rows() != sigma.cols() ||
      !sigma.isApprox(sigma.transpose(), 1e-10))
    throw std::invalid_argument(std::string(who) + ": Sigma must be symmetric");
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument(std::string(who) + ": Sigma must be positive definite");
  Matrix inv = llt.solve(Matrix::Identity(sigma.rows(), sigma.cols()));
  return 0.5 * (inv + inv.transpose());
}

}  // namespace detail

// Reorders a simulated state (derivative blocks ascending) into the
// lag-ordered regressor stack used by the score statistics.
inline Vector regressor_from_state(const Vector& state, int d, int p) {
  if (state.size() != static_cast<Eigen::Index>(p) * d)
    throw std::invalid_argument("regressor_from_state: state size mismatch");
  Vector r(state.size());
  for (int j = 1; j <= p; ++j) r.segment((j - 1) * d, d) = state.segment((p - j) * d, d);
  return r;
}

// Componentwise keep-or-zero of the de-trended increments of the highest
// derivative: entry i survives iff |increment_i - b_i spacing| <= nu_i.
inline IncrementSource thresholded_increments(const std::vector<Vector>& dhat_pm1,
                                              const Partition& coarse, const Vector& b,
                                              const ThresholdSchedule& schedule) {
  if (dhat_pm1.size() < 2)
    throw std::invalid_argument("thresholded_increments: need at least two samples");
  const int d = static_cast<int>(dhat_pm1.front().size());
  const int n_inc = static_cast<int>(dhat_pm1.size()) - 1;
  if (b.size() != d)
    throw std::invalid_argument("thresholded_increments: drift dimension mismatch");
  if (static_cast<int>(schedule.nu.size()) != n_inc)
    throw std::invalid_argument("thresholded_increments: schedule length mismatch");
  if (coarse.intervals() < n_inc)
    throw std::invalid_argument("thresholded_increments: partition too short");
  schedule.validate(d);
  IncrementSource out;
  out.provenance = IncrementProvenance::thresholded;
  out.increments.reserve(n_inc);
  for (int m = 0; m < n_inc; ++m) {
    Vector x = dhat_pm1[m + 1] - dhat_pm1[m] - b * coarse.spacing(m);
    for (int i = 0; i < d; ++i)
      if (!(std::abs(x(i)) <= schedule.nu[m](i))) x(i) = 0.0;
    out.increments.push_back(std::move(x));
  }
  return out;
}

// Continuous-martingale increments with the jump record of a simulated path
// subtracted exactly. With use_finite_differences the highest derivative is
// replaced by its difference quotient on the fine grid and the usable-window
// cap applies; otherwise the stored state derivatives are used on every
// coarse interval.
inline IncrementSource oracle_increments(const McarPath& path, const Vector& b,
                                         const Partition& q, bool use_finite_differences) {
  path.partition.validate();
  const int n_fine = path.partition.intervals();
  if (static_cast<int>(path.big_jumps.size()) != n_fine ||
      static_cast<int>(path.small_jumps_compensated.size()) != n_fine)
    throw std::invalid_argument("oracle_increments: path carries no jump record");
  if (path.states.empty() || path.obs.empty())
    throw std::invalid_argument("oracle_increments: empty path");
  const int d = static_cast<int>(path.obs.front().size());
  const int p = static_cast<int>(path.states.front().size()) / d;
  if (b.size() != d)
    throw std::invalid_argument("oracle_increments: drift dimension mismatch");
  NestedPartition np = coarsen(path.partition, q.times);

  int n_inc;
  std::vector<Vector> value;
  if (use_finite_differences) {
    n_inc = detail::usable_increment_count(np.fine_index, n_fine, p);
    value.reserve(n_inc + 1);
    for (int m = 0; m <= n_inc; ++m)
      value.push_back(
          detail::fd_stack_at_anchor(path.obs, path.partition, np.fine_index[m], p).back());
  } else {
    n_inc = np.coarse.intervals();
    value.reserve(n_inc + 1);
    for (int m = 0; m <= n_inc; ++m)
      value.push_back(path.states[np.fine_index[m]].tail(d));
  }

  IncrementSource out;
  out.provenance = IncrementProvenance::oracle;
  out.increments.reserve(n_inc);
  for (int m = 0; m < n_inc; ++m) {
    Vector jump_sum = Vector::Zero(d);
    for (int n = np.fine_index[m]; n < np.fine_index[m + 1]; ++n)
      jump_sum += path.big_jumps[n] + path.small_jumps_compensated[n];
    out.increments.push_back(value[m + 1] - value[m] - jump_sum -
                             b * np.coarse.spacing(m));
  }
  return out;
}

// Score vector and quadratic variation from explicit lag-ordered regressors.
// H(a d + l) accumulates -r_m(a) (Sigma^{-1} increment_m)_l and the QV block
// (a, b) accumulates r_m(a) r_m(b) Sigma^{-1} spacing_m, the exact layout
// that pairs with vec_drift. Summation order is fixed for reproducibility.
inline ScoreStats mcar_score_stats(const std::vector<Vector>& regressors,
                                   const Partition& coarse, const IncrementSource& inc,
                                   const Matrix& sigma) {
  const int n_used = static_cast<int>(inc.increments.size());
  if (static_cast<int>(regressors.size()) < n_used)
    throw std::invalid_argument("mcar_score_stats: fewer regressors than increments");
  if (coarse.intervals() < n_used)
    throw std::invalid_argument("mcar_score_stats: partition shorter than increments");
  Matrix sigma_inv = detail::spd_inverse(sigma, "mcar_score_stats");
  const int d = static_cast<int>(sigma.rows());
  const int r_dim = n_used > 0 ? static_cast<int>(regressors.front().size())
                               : static_cast<int>(sigma.rows());
  if (r_dim % d != 0)
    throw std::invalid_argument("mcar_score_stats: regressor length not a multiple of d");

  ScoreStats stats;
  stats.t = coarse.horizon();
  stats.level = inc.provenance == IncrementProvenance::thresholded
                    ? ScoreLevel::thresholded
                    : ScoreLevel::oracle_derivatives;
  stats.H = Vector::Zero(static_cast<Eigen::Index>(r_dim) * d);
  stats.QV = Matrix::Zero(stats.H.size(), stats.H.size());
  for (int m = 0; m < n_used; ++m) {
    const Vector& r = regressors[m];
    if (r.size() != r_dim)
      throw std::invalid_argument("mcar_score_stats: ragged regressors");
    const double dt = coarse.spacing(m);
    Vector si = sigma_inv * inc.increments[m];
    for (int a = 0; a < r_dim; ++a) {
      stats.H.segment(a * d, d) -= r(a) * si;
      for (int c = a; c < r_dim; ++c)
        stats.QV.block(a * d, c * d, d, d) += (r(a) * r(c) * dt) * sigma_inv;
    }
  }
  for (int a = 0; a < r_dim; ++a)
    for (int c = 0; c < a; ++c)
      stats.QV.block(a * d, c * d, d, d) = stats.QV.block(c * d, a * d, d, d);
  return stats;
}

// Finite-difference wrapper: regressors are difference quotients of the
// observation on the fine grid, stacked at each used coarse anchor.
inline ScoreStats mcar_score_stats(const std::vector<Vector>& y_on_p, const Partition& fine,
                                   const Partition& coarse, const IncrementSource& inc,
                                   const Matrix& sigma, int p) {
  if (p < 1) throw std::invalid_argument("mcar_score_stats: order must be >= 1");
  if (y_on_p.empty()) throw std::invalid_argument("mcar_score_stats: empty observation");
  const int d = static_cast<int>(y_on_p.front().size());
  NestedPartition np = coarsen(fine, coarse.times);
  const int n_used = static_cast<int>(inc.increments.size());
  if (n_used > np.coarse.intervals())
    throw std::invalid_argument("mcar_score_stats: more increments than coarse intervals");
  if (n_used == 0) {
    ScoreStats stats;
    stats.t = np.coarse.horizon();
    stats.level = inc.provenance == IncrementProvenance::thresholded
                      ? ScoreLevel::thresholded
                      : ScoreLevel::finite_difference;
    stats.H = Vector::Zero(static_cast<Eigen::Index>(p) * d * d);
    stats.QV = Matrix::Zero(stats.H.size(), stats.H.size());
    return stats;
  }
  std::vector<Vector> regressors;
  regressors.reserve(n_used);
  for (int m = 0; m < n_used; ++m)
    regressors.push_back(detail::lag_stack(
        detail::fd_stack_at_anchor(y_on_p, fine, np.fine_index[m], p), d, p));
  ScoreStats stats = mcar_score_stats(regressors, np.coarse, inc, sigma);
  if (inc.provenance == IncrementProvenance::oracle)
    stats.level = ScoreLevel::finite_difference;
  return stats;
}

// Graph-model score statistics. Per lag the two regressors are the
// derivative itself and its image under the transposed normalized adjacency,
// matching the (theta_k1, theta_k2) layout of vec_theta.
inline ScoreStats grcar_score_stats(const std::vector<Vector>& regressors,
                                    const Partition& coarse, const IncrementSource& inc,
                                    const Matrix& sigma, const Matrix& adjacency) {
  const int n_used = static_cast<int>(inc.increments.size());
  if (static_cast<int>(regressors.size()) < n_used)
    throw std::invalid_argument("grcar_score_stats: fewer regressors than increments");
  if (coarse.intervals() < n_used)
    throw std::invalid_argument("grcar_score_stats: partition shorter than increments");
  Matrix sigma_inv = detail::spd_inverse(sigma, "grcar_score_stats");
  const int d = static_cast<int>(sigma.rows());
  if (adjacency.rows() != d)
    throw std::invalid_argument("grcar_score_stats: adjacency dimension mismatch");
  Matrix abar_t = normalize_adjacency(adjacency).transpose();
  const int r_dim = n_used > 0 ? static_cast<int>(regressors.front().size()) : d;
  if (r_dim % d != 0)
    throw std::invalid_argument("grcar_score_stats: regressor length not a multiple of d");
  const int p = r_dim / d;

  ScoreStats stats;
  stats.t = coarse.horizon();
  stats.level = inc.provenance == IncrementProvenance::thresholded
                    ? ScoreLevel::thresholded
                    : ScoreLevel::oracle_derivatives;
  stats.H = Vector::Zero(2 * p);
  stats.QV = Matrix::Zero(2 * p, 2 * p);
  std::vector<Vector> g(2 * static_cast<std::size_t>(p));
  for (int m = 0; m < n_used; ++m) {
    const Vector& r = regressors[m];
    if (r.size() != r_dim)
      throw std::invalid_argument("grcar_score_stats: ragged regressors");
    const double dt = coarse.spacing(m);
    for (int k = 0; k < p; ++k) {
      g[2 * k] = r.segment(k * d, d);
      g[2 * k + 1] = abar_t * g[2 * k];
    }
    Vector si = sigma_inv * inc.increments[m];
    for (int a = 0; a < 2 * p; ++a) {
      stats.H(a) -= g[a].dot(si);
      for (int c = a; c < 2 * p; ++c)
        stats.QV(a, c) += g[a].dot(sigma_inv * g[c]) * dt;
    }
  }
  for (int a = 0; a < 2 * p; ++a)
    for (int c = 0; c < a; ++c) stats.QV(a, c) = stats.QV(c, a);
  return stats;
}

inline ScoreStats grcar_score_stats(const std::vector<Vector>& y_on_p, const Partition& fine,
                                    const Partition& coarse, const IncrementSource& inc,
                                    const Matrix& sigma, const Matrix& adjacency, int p) {
  if (p < 1) throw std::invalid_argument("grcar_score_stats: order must be >= 1");
  if (y_on_p.empty()) throw std::invalid_argument("grcar_score_stats: empty observation");
  const int d = static_cast<int>(y_on_p.front().size());
  NestedPartition np = coarsen(fine, coarse.times);
  const int n_used = static_cast<int>(inc.increments.size());
  if (n_used > np.coarse.intervals())
    throw std::invalid_argument("grcar_score_stats: more increments than coarse intervals");
  if (n_used == 0) {
    ScoreStats stats;
    stats.t = np.coarse.horizon();
    stats.level = inc.provenance == IncrementProvenance::thresholded
                      ? ScoreLevel::thresholded
                      : ScoreLevel::finite_difference;
    stats.H = Vector::Zero(2 * p);
    stats.QV = Matrix::Zero(2 * p, 2 * p);
    return stats;
  }
  std::vector<Vector> regressors;
  regressors.reserve(n_used);
  for (int m = 0; m < n_used; ++m)
    regressors.push_back(detail::lag_stack(
        detail::fd_stack_at_anchor(y_on_p, fine, np.fine_index[m], p), d, p));
  ScoreStats stats = grcar_score_stats(regressors, np.coarse, inc, sigma, adjacency);
  if (inc.provenance == IncrementProvenance::oracle)
    stats.level = ScoreLevel::finite_difference;
  return stats;
}

// Closed-form drift estimate: the solution of QV v = H by a symmetric
// positive-definite solve. Scaling Sigma by any c > 0 scales H and QV alike,
// so the estimate does not depend on the level of the driving variance.
inline Vector drift_mle(const ScoreStats& stats) {
  if (stats.QV.rows() != stats.QV.cols() || stats.QV.rows() != stats.H.size())
    throw std::invalid_argument("drift_mle: inconsistent score dimensions");
  if (!stats.H.allFinite() || !stats.QV.allFinite())
    throw std::invalid_argument("drift_mle: non-finite score statistics");
  Eigen::SelfAdjointEigenSolver<Matrix> es(stats.QV);
  const double lam_min = es.eigenvalues()(0);
  const double lam_max = es.eigenvalues()(es.eigenvalues().size() - 1);
  if (!(lam_min > 0.0) || lam_min <= 1e-12 * lam_max)
    throw std::runtime_error(
        "drift_mle: insufficient excitation, quadratic variation eigenvalues in [" +
        std::to_string(lam_min) + ", " + std::to_string(lam_max) + "]");
  return stats.QV.ldlt().solve(stats.H);
}

struct McarMode {};
struct GrcarMode {
  Matrix adjacency;
};
using EstimateMode = std::variant<McarMode, GrcarMode>;

struct DriftEstimate {
  Vector coefficients;
  ScoreStats stats;
  AssumptionReport diagnostics;
  int dropped_intervals = 0;
  std::optional<McarParams> mcar;
  std::optional<GrcarParams> grcar;
};

// Fully observable pipeline: difference quotients on the fine grid,
// de-trended and thresholded increments on the coarse grid, score statistics,
// closed-form solve. The schedule may cover all coarse intervals or exactly
// the usable ones; trailing intervals lost to the difference window are
// counted in dropped_intervals.
inline DriftEstimate estimate_drift(const std::vector<Vector>& y_on_p, const Partition& fine,
                                    const Partition& coarse, const ThresholdSchedule& schedule,
                                    const Vector& b, const Matrix& sigma, int p,
                                    const EstimateMode& mode = McarMode{}) {
  if (p < 1) throw std::invalid_argument("estimate_drift: order must be >= 1");
  if (y_on_p.empty()) throw std::invalid_argument("estimate_drift: empty observation");
  const int d = static_cast<int>(y_on_p.front().size());
  NestedPartition np = coarsen(fine, coarse.times);
  const int n_inc = detail::usable_increment_count(np.fine_index, fine.intervals(), p);
  if (static_cast<int>(schedule.nu.size()) != n_inc &&
      static_cast<int>(schedule.nu.size()) != np.coarse.intervals())
    throw std::invalid_argument("estimate_drift: schedule length mismatch");
  ThresholdSchedule used = schedule;
  used.nu.resize(n_inc);

  std::vector<Vector> dhat;
  std::vector<Vector> regressors;
  dhat.reserve(n_inc + 1);
  regressors.reserve(n_inc);
  for (int m = 0; m <= n_inc; ++m) {
    std::vector<Vector> stack =
        detail::fd_stack_at_anchor(y_on_p, fine, np.fine_index[m], p);
    dhat.push_back(stack.back());
    if (m < n_inc) regressors.push_back(detail::lag_stack(stack, d, p));
  }
  IncrementSource inc = thresholded_increments(dhat, np.coarse, b, used);

  DriftEstimate out;
  out.dropped_intervals = np.coarse.intervals() - n_inc;
  std::vector<double> betas;
  for (Eigen::Index i = 0; i < used.beta.size(); ++i) betas.push_back(used.beta(i));
  out.diagnostics = assumption_diagnostics(fine, np.coarse, np.coarse.horizon(), betas);
  if (const GrcarMode* g = std::get_if<GrcarMode>(&mode)) {
    out.stats = grcar_score_stats(regressors, np.coarse, inc, sigma, g->adjacency);
    out.coefficients = drift_mle(out.stats);
    GrcarParams gp;
    gp.p = p;
    gp.theta = unvec_theta(out.coefficients, p);
    gp.adjacency = g->adjacency;
    gp.validate();
    out.grcar = std::move(gp);
  } else {
    out.stats = mcar_score_stats(regressors, np.coarse, inc, sigma);
    out.coefficients = drift_mle(out.stats);
    out.mcar = unvec_drift(out.coefficients, d, p);
  }
  out.stats.level = ScoreLevel::thresholded;
  return out;
}

namespace detail {

struct ScalarVarianceFit {
  double variance = 0.0;
  int iterations = 0;
};

// Iterative variance of a scalar increment series under the critical region
// x^2 <= 2 gamma v spacing log M. Excluded increments still count in the
// divisor M, biasing the estimate low rather than the exclusion set empty.
inline ScalarVarianceFit iterative_scalar_variance(const std::vector<double>& xs,
                                                   const std::vector<double>& dts,
                                                   double gamma, double eps) {
  const int m_count = static_cast<int>(xs.size());
  const double log_m = std::log(static_cast<double>(m_count));
  double v = 0.0;
  for (int m = 0; m < m_count; ++m) v += xs[m] * xs[m] / dts[m];
  v /= m_count;
  if (!(v > 0.0))
    throw std::invalid_argument("iterative_scalar_variance: degenerate zero variance");
  for (int it = 1; it <= 100; ++it) {
    double next = 0.0;
    for (int m = 0; m < m_count; ++m)
      if (xs[m] * xs[m] <= 2.0 * gamma * v * dts[m] * log_m)
        next += xs[m] * xs[m] / dts[m];
    next /= m_count;
    if (!(next > 0.0))
      throw std::runtime_error(
          "iterative_scalar_variance: critical region excluded every increment");
    if (std::abs(next - v) <= eps) return {next, it};
    v = next;
  }
  throw std::runtime_error("iterative_scalar_variance: no convergence after 100 "
                           "iterations, last iterate " +
                           std::to_string(v));
}

}  // namespace detail

// Data-driven thresholds from the raw coarse increments of the highest
// derivative: componentwise iterative variance fit, then
// nu^(i,m) = sqrt(2 gamma variance_i spacing_m log M).
inline ThresholdSchedule select_thresholds_data_driven(const std::vector<Vector>& increments,
                                                       const Partition& coarse, double gamma,
                                                       double eps) {
  const int m_count = static_cast<int>(increments.size());
  if (m_count < 10)
    throw std::invalid_argument("select_thresholds_data_driven: need at least 10 increments");
  if (coarse.intervals() < m_count)
    throw std::invalid_argument("select_thresholds_data_driven: partition too short");
  if (!(gamma > 1.0))
    throw std::invalid_argument("select_thresholds_data_driven: gamma must exceed 1");
  if (!(eps > 0.0))
    throw std::invalid_argument("select_thresholds_data_driven: eps must be positive");
  const int d = static_cast<int>(increments.front().size());
  std::vector<double> dts(m_count);
  for (int m = 0; m < m_count; ++m) dts[m] = coarse.spacing(m);

  Vector variance(d);
  std::vector<double> xs(m_count);
  for (int i = 0; i < d; ++i) {
    for (int m = 0; m < m_count; ++m) {
      if (increments[m].size() != d)
        throw std::invalid_argument("select_thresholds_data_driven: ragged increments");
      xs[m] = increments[m](i);
    }
    variance(i) = detail::iterative_scalar_variance(xs, dts, gamma, eps).variance;
  }

  ThresholdSchedule s;
  s.kind = ThresholdKind::data_driven;
  s.gamma = gamma;
  s.eps = eps;
  s.nu.reserve(m_count);
  const double log_m = std::log(static_cast<double>(m_count));
  for (int m = 0; m < m_count; ++m) {
    Vector v(d);
    for (int i = 0; i < d; ++i)
      v(i) = std::sqrt(2.0 * gamma * variance(i) * dts[m] * log_m);
    s.nu.push_back(std::move(v));
  }
  return s;
}

// Driver increments over the coarse grid implied by an estimated drift:
// increment of the difference quotient of the highest derivative plus the
// Riemann sum of the estimated drift terms over the fine intervals of each
// coarse bin. With the true coefficients this recovers the driving noise up
// to discretization error.
inline std::vector<Vector> recover_levy_increments(const std::vector<Vector>& y_on_p,
                                                   const McarParams& a_hat,
                                                   const Partition& fine,
                                                   const Partition& coarse) {
  a_hat.validate();
  if (y_on_p.empty())
    throw std::invalid_argument("recover_levy_increments: empty observation");
  if (static_cast<int>(y_on_p.front().size()) != a_hat.d)
    throw std::invalid_argument("recover_levy_increments: dimension mismatch");
  const int p = a_hat.p;
  NestedPartition np = coarsen(fine, coarse.times);
  const int n_inc = detail::usable_increment_count(np.fine_index, fine.intervals(), p);

  std::vector<std::vector<Vector>> level(p);
  for (int k = 0; k < p; ++k) level[k] = forward_differences(y_on_p, fine, k);

  std::vector<Vector> out;
  out.reserve(n_inc);
  for (int m = 0; m < n_inc; ++m) {
    Vector acc = level[p - 1][np.fine_index[m + 1]] - level[p - 1][np.fine_index[m]];
    for (int n = np.fine_index[m]; n < np.fine_index[m + 1]; ++n) {
      Vector drift = Vector::Zero(a_hat.d);
      for (int j = 1; j <= p; ++j) drift += a_hat.A[j - 1] * level[p - j][n];
      acc += drift * fine.spacing(n);
    }
    out.push_back(std::move(acc));
  }
  return out;
}

// Iterative diffusion-matrix estimate from recovered driver increments. The
// initial iterate is the realized covariance; each pass keeps the increments
// inside the critical ellipsoid x^T S^{-1} x <= 2 gamma spacing log M and
// renormalizes by the full count. uninverted_region switches the
// quadratic form to x^T S x, kept for comparison only: it shrinks the region
// when the variance grows, which is the wrong way around.
inline Matrix estimate_sigma_iterative(const std::vector<Vector>& levy_increments,
                                       const Partition& coarse, double gamma, double eps,
                                       bool uninverted_region = false) {
  const int m_count = static_cast<int>(levy_increments.size());
  if (m_count < 1)
    throw std::invalid_argument("estimate_sigma_iterative: no increments");
  const int d = static_cast<int>(levy_increments.front().size());
  if (m_count < d + 1)
    throw std::invalid_argument("estimate_sigma_iterative: need at least d+1 increments");
  if (coarse.intervals() < m_count)
    throw std::invalid_argument("estimate_sigma_iterative: partition too short");
  if (!(gamma > 1.0))
    throw std::invalid_argument("estimate_sigma_iterative: gamma must exceed 1");
  if (!(eps > 0.0))
    throw std::invalid_argument("estimate_sigma_iterative: eps must be positive");
  for (const Vector& x : levy_increments)
    if (x.size() != d || !x.allFinite())
      throw std::invalid_argument("estimate_sigma_iterative: bad increment entries");

  const double log_m = std::log(static_cast<double>(m_count));
  Matrix s = Matrix::Zero(d, d);
  for (int m = 0; m < m_count; ++m)
    s += levy_increments[m] * levy_increments[m].transpose() / coarse.spacing(m);
  s /= m_count;

  for (int it = 1; it <= 100; ++it) {
    Eigen::LLT<Matrix> llt(s);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error(
          "estimate_sigma_iterative: iterate lost positive definiteness");
    Matrix next = Matrix::Zero(d, d);
    for (int m = 0; m < m_count; ++m) {
      const Vector& x = levy_increments[m];
      double quad = uninverted_region ? x.dot(s * x) : x.dot(llt.solve(x));
      if (quad <= 2.0 * gamma * coarse.spacing(m) * log_m)
        next += x * x.transpose() / coarse.spacing(m);
    }
    next /= m_count;
    if ((next - s).norm() <= eps) return next;
    s = next;
  }
  throw std::runtime_error("estimate_sigma_iterative: no convergence after 100 iterations");
}

// Studentized estimation error: QV^{1/2} (a_hat - a_star). Asymptotically
// standard normal componentwise when the model holds.
inline Vector z_statistic(const Vector& a_hat, const Vector& a_star, const Matrix& qv) {
  if (a_hat.size() != a_star.size() || qv.rows() != a_hat.size() ||
      qv.cols() != a_hat.size())
    throw std::invalid_argument("z_statistic: dimension mismatch");
  return sym_psd_sqrt(qv) * (a_hat - a_star);
}

namespace detail {

// Regularized lower incomplete gamma P(a, x): series expansion below a + 1,
// Lentz continued fraction for the upper tail otherwise.
inline double regularized_gamma_p(double a, double x) {
  if (!(a > 0.0) || x < 0.0)
    throw std::invalid_argument("regularized_gamma_p: bad arguments");
  if (x == 0.0) return 0.0;
  const double log_gamma = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a;
    double del = 1.0 / a;
    double sum = del;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - log_gamma);
  }
  double b = x + 1.0 - a;
  double c = 1.0 / 1e-300;
  double den = 1.0 / b;
  double h = den;
  for (int i = 1; i <= 500; ++i) {
    double an = -i * (i - a);
    b += 2.0;
    den = an * den + b;
    if (std::abs(den) < 1e-300) den = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    den = 1.0 / den;
    double del = den * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return 1.0 - std::exp(-x + a * std::log(x) - log_gamma) * h;
}

}  // namespace detail

// Chi-square quantile by bisection on the regularized gamma function.
inline double chi_squared_quantile(int k, double level) {
  if (k < 1) throw std::invalid_argument("chi_squared_quantile: degrees must be >= 1");
  if (!(level > 0.0 && level < 1.0))
    throw std::invalid_argument("chi_squared_quantile: level must lie in (0, 1)");
  double lo = 0.0;
  double hi = std::max(1.0, 2.0 * k);
  while (detail::regularized_gamma_p(0.5 * k, 0.5 * hi) < level && hi < 1e12) hi *= 2.0;
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    if (detail::regularized_gamma_p(0.5 * k, 0.5 * mid) < level)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

// Elliptic confidence region {a : (a - center)^T shape (a - center) <= radius_sq}
// with shape the quadratic variation, so the radius is a chi-square quantile.
struct ConfidenceEllipsoid {
  Vector center;
  Matrix shape;
  double radius_sq = 0.0;

  bool contains(const Vector& a) const {
    if (a.size() != center.size())
      throw std::invalid_argument("ConfidenceEllipsoid: dimension mismatch");
    Vector delta = a - center;
    return delta.dot(shape * delta) <= radius_sq;
  }
};

inline ConfidenceEllipsoid confidence_ellipsoid(const Vector& a_hat, const Matrix& qv,
                                                double level) {
  if (qv.rows() != a_hat.size() || qv.cols() != a_hat.size())
    throw std::invalid_argument("confidence_ellipsoid: dimension mismatch");
  if (!(level > 0.0 && level < 1.0))
    throw std::invalid_argument("confidence_ellipsoid: level must lie in (0, 1)");
  Eigen::SelfAdjointEigenSolver<Matrix> es(qv);
  if (!(es.eigenvalues()(0) > 0.0))
    throw std::runtime_error("confidence_ellipsoid: quadratic variation not positive definite");
  ConfidenceEllipsoid e;
  e.center = a_hat;
  e.shape = qv;
  e.radius_sq = chi_squared_quantile(static_cast<int>(a_hat.size()), level);
  return e;
}

}  // namespace mcar

#pragma once

#include <mcar/grid.hpp>
#include <mcar/numerics.hpp>
#include <mcar/rng.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <variant>
#include <vector>

namespace mcar {

// Jump size laws for compound Poisson drivers. Components of a Gaussian size
// may correlate; Uniform sizes are componentwise independent.
struct GaussianSize {
  Vector mean;
  Matrix cov;
};
struct ConstantSize {
  Vector value;
};
struct UniformSize {
  Vector lower;
  Vector upper;
};
using SizeDistribution = std::variant<GaussianSize, ConstantSize, UniformSize>;

struct NoJumps {};
struct CompoundPoissonJumps {
  double rate = 0.0;  // events per unit time
  SizeDistribution sizes;
};
// Subordinator with marginal increments Gamma(shape * dt, scale), independent
// per component.
struct GammaJumps {
  double shape = 1.0;
  double scale = 1.0;
};
// Difference of two independent Gamma subordinators with equal parameters.
struct SymmetrizedGammaJumps {
  double shape = 1.0;
  double scale = 1.0;
};
using JumpSpec = std::variant<NoJumps, CompoundPoissonJumps, GammaJumps, SymmetrizedGammaJumps>;

inline int size_dim(const SizeDistribution& law) {
  return std::visit(
      [](const auto& s) -> int {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, GaussianSize>)
          return static_cast<int>(s.mean.size());
        else if constexpr (std::is_same_v<T, ConstantSize>)
          return static_cast<int>(s.value.size());
        else
          return static_cast<int>(s.lower.size());
      },
      law);
}

// Characteristic triplet (b, Sigma, F): b is the drift with respect to the
// truncation function 1{|x| <= 1}, Sigma the Gaussian covariance rate, and the
// jump measure is described by a JumpSpec.
struct LevyTriplet {
  Vector b;
  Matrix sigma;
  JumpSpec jumps;

  int dim() const { return static_cast<int>(b.size()); }

  void validate() const {
    const int d = dim();
    if (d < 1) throw std::invalid_argument("LevyTriplet: dimension must be >= 1");
    if (sigma.rows() != d || sigma.cols() != d)
      throw std::invalid_argument("LevyTriplet: Sigma shape mismatch");
    detail::check_symmetric(sigma, "LevyTriplet::validate");
    Eigen::SelfAdjointEigenSolver<Matrix> es(sigma);
    if (es.eigenvalues().minCoeff() <= 0.0)
      throw std::invalid_argument("LevyTriplet: Sigma must be strictly positive definite");
    std::visit(
        [d](const auto& j) {
          using T = std::decay_t<decltype(j)>;
          if constexpr (std::is_same_v<T, CompoundPoissonJumps>) {
            if (j.rate < 0.0) throw std::invalid_argument("LevyTriplet: negative jump rate");
            if (size_dim(j.sizes) != d)
              throw std::invalid_argument("LevyTriplet: jump size dimension mismatch");
            std::visit(
                [](const auto& s) {
                  using S = std::decay_t<decltype(s)>;
                  if constexpr (std::is_same_v<S, GaussianSize>) {
                    if (s.cov.rows() != s.mean.size() || s.cov.cols() != s.mean.size())
                      throw std::invalid_argument("LevyTriplet: size covariance shape");
                  } else if constexpr (std::is_same_v<S, UniformSize>) {
                    if (s.upper.size() != s.lower.size())
                      throw std::invalid_argument("LevyTriplet: uniform bounds shape");
                    for (Eigen::Index i = 0; i < s.lower.size(); ++i)
                      if (!(s.lower(i) < s.upper(i)))
                        throw std::invalid_argument("LevyTriplet: uniform bounds order");
                  }
                },
                j.sizes);
          } else if constexpr (std::is_same_v<T, GammaJumps> ||
                               std::is_same_v<T, SymmetrizedGammaJumps>) {
            if (!(j.shape > 0.0) || !(j.scale > 0.0))
              throw std::invalid_argument("LevyTriplet: Gamma shape/scale must be positive");
          }
        },
        jumps);
  }
};

struct JumpEvent {
  double time = 0.0;
  Vector size;
};

// Path increments over a partition, split into the pieces the estimators use:
// total = drift + brownian + big_jumps + small_jumps_compensated, exactly.
// raw_jumps carries the uncompensated jump sum of each interval. For the
// Gamma variants increments come from the marginal law, so no per-jump record
// exists: the raw increment sits in big_jumps and the analytic small-jump
// compensator in small_jumps_compensated, keeping the identity exact.
struct LevyIncrements {
  std::vector<Vector> drift;
  std::vector<Vector> brownian;
  std::vector<Vector> big_jumps;
  std::vector<Vector> small_jumps_compensated;
  std::vector<Vector> raw_jumps;
  std::vector<Vector> total;
  std::vector<JumpEvent> events;  // populated for compound Poisson only
};

namespace detail {

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
inline double std_normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::acos(-1.0));
}

}  // namespace detail

// Mean rate of the small-jump part, kappa = integral of x over |x| <= 1
// against the Levy measure (vector norm). Closed forms exist for symmetric
// laws (zero), constants, scalar Gaussian and Uniform sizes, and the Gamma
// subordinator; multivariate asymmetric compound Poisson couples components
// through the norm and is rejected.
inline Vector small_jump_mean_rate(const JumpSpec& jumps, int d) {
  return std::visit(
      [d](const auto& j) -> Vector {
        using T = std::decay_t<decltype(j)>;
        if constexpr (std::is_same_v<T, NoJumps> || std::is_same_v<T, SymmetrizedGammaJumps>) {
          return Vector::Zero(d);
        } else if constexpr (std::is_same_v<T, GammaJumps>) {
          // Levy density shape * exp(-x/scale) / x on x > 0, per component.
          return Vector::Constant(d, j.shape * j.scale * (1.0 - std::exp(-1.0 / j.scale)));
        } else {
          return std::visit(
              [d, &j](const auto& s) -> Vector {
                using S = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<S, ConstantSize>) {
                  return s.value.norm() <= 1.0 ? Vector(j.rate * s.value)
                                               : Vector(Vector::Zero(d));
                } else if constexpr (std::is_same_v<S, GaussianSize>) {
                  if (s.mean.isZero(0.0)) return Vector::Zero(d);
                  if (d == 1) {
                    double mu = s.mean(0), sd = std::sqrt(s.cov(0, 0));
                    double lo = (-1.0 - mu) / sd, hi = (1.0 - mu) / sd;
                    double m = mu * (detail::std_normal_cdf(hi) - detail::std_normal_cdf(lo)) -
                               sd * (detail::std_normal_pdf(hi) - detail::std_normal_pdf(lo));
                    return Vector::Constant(1, j.rate * m);
                  }
                  throw std::invalid_argument(
                      "small_jump_mean_rate: no closed form for asymmetric multivariate "
                      "Gaussian sizes");
                } else {
                  if ((s.lower + s.upper).isZero(0.0)) return Vector::Zero(d);
                  if (d == 1) {
                    double lo = std::max(s.lower(0), -1.0), hi = std::min(s.upper(0), 1.0);
                    double m = hi > lo ? (hi * hi - lo * lo) / (2.0 * (s.upper(0) - s.lower(0)))
                                       : 0.0;
                    return Vector::Constant(1, j.rate * m);
                  }
                  throw std::invalid_argument(
                      "small_jump_mean_rate: no closed form for asymmetric multivariate "
                      "Uniform sizes");
                }
              },
              j.sizes);
        }
      },
      jumps);
}

// Effective linear drift when jump increments are applied raw (uncompensated):
// b minus the small-jump mean rate.
inline Vector drift_with_raw_jumps(const LevyTriplet& triplet) {
  return triplet.b - small_jump_mean_rate(triplet.jumps, triplet.dim());
}

struct JumpDecomposition {
  std::vector<Vector> big;                // jumps with |size| >= 1, vector norm
  std::vector<Vector> small_compensated;  // remaining jumps minus their mean
  std::vector<Vector> raw;                // all jumps, uncompensated
};

// Bin point jumps by interval (right-open, last interval closed) and split at
// vector norm 1; the small part is compensated with the analytic mean rate of
// the generating law.
inline JumpDecomposition decompose_jumps(const std::vector<JumpEvent>& events,
                                         const Partition& partition, const JumpSpec& jumps,
                                         int d) {
  partition.validate();
  const int n_int = partition.intervals();
  Vector kappa = small_jump_mean_rate(jumps, d);
  JumpDecomposition out;
  out.big.assign(n_int, Vector::Zero(d));
  out.small_compensated.assign(n_int, Vector::Zero(d));
  out.raw.assign(n_int, Vector::Zero(d));
  for (int n = 0; n < n_int; ++n)
    out.small_compensated[n] = -partition.spacing(n) * kappa;
  for (const JumpEvent& ev : events) {
    if (ev.time < partition.times.front() || ev.time > partition.times.back())
      throw std::invalid_argument("decompose_jumps: event outside partition span");
    auto it = std::upper_bound(partition.times.begin(), partition.times.end(), ev.time);
    int idx = std::min<int>(n_int - 1, static_cast<int>(it - partition.times.begin()) - 1);
    out.raw[idx] += ev.size;
    if (ev.size.norm() >= 1.0)
      out.big[idx] += ev.size;
    else
      out.small_compensated[idx] += ev.size;
  }
  return out;
}

// Draw the events of a compound Poisson process on [0, horizon]: Poisson
// count, uniform order-statistic times (sorted), then sizes in time order.
inline std::vector<JumpEvent> sample_poisson_events(const CompoundPoissonJumps& j, double horizon,
                                                    std::mt19937_64& rng) {
  const int d = size_dim(j.sizes);
  std::normal_distribution<double> gauss;
  long count = 0;
  if (j.rate > 0.0 && horizon > 0.0) {
    std::poisson_distribution<long> count_law(j.rate * horizon);
    count = count_law(rng);
  }
  std::uniform_real_distribution<double> unif_time(0.0, horizon);
  std::vector<double> times(count);
  for (long k = 0; k < count; ++k) times[k] = unif_time(rng);
  std::sort(times.begin(), times.end());
  Matrix size_root;
  if (const auto* g = std::get_if<GaussianSize>(&j.sizes)) size_root = sym_psd_sqrt(g->cov);
  std::vector<JumpEvent> events;
  events.reserve(count);
  for (long k = 0; k < count; ++k) {
    JumpEvent ev;
    ev.time = times[k];
    std::visit(
        [&](const auto& s) {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, GaussianSize>) {
            Vector z(d);
            for (int i = 0; i < d; ++i) z(i) = gauss(rng);
            ev.size = s.mean + size_root * z;
          } else if constexpr (std::is_same_v<S, ConstantSize>) {
            ev.size = s.value;
          } else {
            ev.size.resize(d);
            for (int i = 0; i < d; ++i)
              ev.size(i) = std::uniform_real_distribution<double>(s.lower(i), s.upper(i))(rng);
          }
        },
        j.sizes);
    events.push_back(std::move(ev));
  }
  return events;
}

// Draw increments of the driving process over the partition. Consumption
// order is fixed (Brownian first, then jumps), so a seed pins the whole
// object. Compound Poisson jumps are drawn as a Poisson count with uniform
// order-statistic times; Gamma variants from exact marginal increment laws.
inline LevyIncrements sample_levy_increments(const LevyTriplet& triplet,
                                             const Partition& partition, std::mt19937_64& rng) {
  triplet.validate();
  partition.validate();
  const int d = triplet.dim();
  const int n_int = partition.intervals();
  std::normal_distribution<double> gauss;

  LevyIncrements inc;
  inc.drift.resize(n_int);
  inc.brownian.resize(n_int);
  Matrix root = sym_psd_sqrt(triplet.sigma);
  for (int n = 0; n < n_int; ++n) {
    double dt = partition.spacing(n);
    inc.drift[n] = dt * triplet.b;
    Vector z(d);
    for (int i = 0; i < d; ++i) z(i) = gauss(rng);
    inc.brownian[n] = std::sqrt(dt) * (root * z);
  }

  std::visit(
      [&](const auto& j) {
        using T = std::decay_t<decltype(j)>;
        if constexpr (std::is_same_v<T, NoJumps>) {
          inc.big_jumps.assign(n_int, Vector::Zero(d));
          inc.small_jumps_compensated.assign(n_int, Vector::Zero(d));
          inc.raw_jumps.assign(n_int, Vector::Zero(d));
        } else if constexpr (std::is_same_v<T, CompoundPoissonJumps>) {
          inc.events = sample_poisson_events(j, partition.horizon(), rng);
          JumpDecomposition parts = decompose_jumps(inc.events, partition, triplet.jumps, d);
          inc.big_jumps = std::move(parts.big);
          inc.small_jumps_compensated = std::move(parts.small_compensated);
          inc.raw_jumps = std::move(parts.raw);
        } else {
          const bool symmetrized = std::is_same_v<T, SymmetrizedGammaJumps>;
          Vector kappa = small_jump_mean_rate(triplet.jumps, d);
          inc.big_jumps.resize(n_int);
          inc.small_jumps_compensated.resize(n_int);
          inc.raw_jumps.resize(n_int);
          for (int n = 0; n < n_int; ++n) {
            double dt = partition.spacing(n);
            Vector g(d);
            for (int i = 0; i < d; ++i) {
              std::gamma_distribution<double> gamma_law(j.shape * dt, j.scale);
              g(i) = gamma_law(rng);
              if (symmetrized) g(i) -= gamma_law(rng);
            }
            inc.big_jumps[n] = g;
            inc.small_jumps_compensated[n] = -dt * kappa;
            inc.raw_jumps[n] = g;
          }
        }
      },
      triplet.jumps);

  inc.total.resize(n_int);
  for (int n = 0; n < n_int; ++n)
    inc.total[n] =
        inc.drift[n] + inc.brownian[n] + inc.big_jumps[n] + inc.small_jumps_compensated[n];
  return inc;
}

inline LevyIncrements sample_levy_increments(const LevyTriplet& triplet,
                                             const Partition& partition, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_levy_increments(triplet, partition, rng);
}

// Sum per-interval values of a fine grid into the bins of a nested coarse
// grid described by its fine_index map.
inline std::vector<Vector> aggregate_increments(const std::vector<Vector>& fine,
                                                const std::vector<int>& fine_index) {
  if (fine_index.size() < 2 || fine_index.back() != static_cast<int>(fine.size()))
    throw std::invalid_argument("aggregate_increments: index map does not cover the data");
  std::vector<Vector> out(fine_index.size() - 1);
  for (std::size_t m = 0; m + 1 < fine_index.size(); ++m) {
    Vector acc = Vector::Zero(fine[0].size());
    for (int n = fine_index[m]; n < fine_index[m + 1]; ++n) acc += fine[n];
    out[m] = acc;
  }
  return out;
}

}  // namespace mcar

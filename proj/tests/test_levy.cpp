#include <catch2/catch_amalgamated.hpp>

#include <mcar/grid.hpp>
#include <mcar/levy.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"

using mcar::Matrix;
using mcar::Partition;
using mcar::Vector;

namespace {

mcar::LevyTriplet scalar_triplet(double b, double sigma2, mcar::JumpSpec jumps) {
  mcar::LevyTriplet t;
  t.b = Vector::Constant(1, b);
  t.sigma = Matrix::Constant(1, 1, sigma2);
  t.jumps = std::move(jumps);
  return t;
}

mcar::CompoundPoissonJumps cp_gaussian(double rate, double mean, double var) {
  mcar::CompoundPoissonJumps cp;
  cp.rate = rate;
  mcar::GaussianSize g;
  g.mean = Vector::Constant(1, mean);
  g.cov = Matrix::Constant(1, 1, var);
  cp.sizes = g;
  return cp;
}

// Simpson quadrature of x * density over [lo, hi]; callers pass a range where
// the density is smooth. Pins the closed-form truncated first moments.
double truncated_mean_quadrature(double (*density)(double, double, double), double a, double b,
                                 double lo, double hi, int panels = 4000) {
  double h = (hi - lo) / panels, acc = 0.0;
  for (int i = 0; i < panels; ++i) {
    double x0 = lo + i * h, x2 = x0 + h, x1 = 0.5 * (x0 + x2);
    acc += h / 6.0 *
           (x0 * density(x0, a, b) + 4.0 * x1 * density(x1, a, b) + x2 * density(x2, a, b));
  }
  return acc;
}

double gauss_density(double x, double mu, double sd) {
  double z = (x - mu) / sd;
  return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * std::acos(-1.0)));
}

double uniform_density(double x, double lo, double hi) {
  return (x >= lo && x <= hi) ? 1.0 / (hi - lo) : 0.0;
}

}  // namespace

TEST_CASE("triplet validation") {
  mcar::LevyTriplet t = scalar_triplet(0.0, 1.0, mcar::NoJumps{});
  REQUIRE_NOTHROW(t.validate());

  t.sigma(0, 0) = 0.0;
  REQUIRE_THROWS_AS(t.validate(), std::invalid_argument);

  mcar::LevyTriplet t2;
  t2.b = Vector::Zero(2);
  t2.sigma = Matrix::Identity(2, 2);
  t2.sigma(0, 1) = 0.99;  // asymmetric
  t2.jumps = mcar::NoJumps{};
  REQUIRE_THROWS_AS(t2.validate(), std::invalid_argument);

  mcar::GammaJumps bad;
  bad.shape = -1.0;
  REQUIRE_THROWS_AS(scalar_triplet(0.0, 1.0, bad).validate(), std::invalid_argument);

  mcar::CompoundPoissonJumps cp = cp_gaussian(-0.5, 0.0, 1.0);
  REQUIRE_THROWS_AS(scalar_triplet(0.0, 1.0, cp).validate(), std::invalid_argument);
}

TEST_CASE("small_jump_mean_rate closed forms") {
  SECTION("symmetric laws vanish") {
    REQUIRE(mcar::small_jump_mean_rate(mcar::NoJumps{}, 3).norm() == 0.0);
    mcar::SymmetrizedGammaJumps sg;
    REQUIRE(mcar::small_jump_mean_rate(sg, 2).norm() == 0.0);
    REQUIRE(mcar::small_jump_mean_rate(cp_gaussian(2.0, 0.0, 1.0), 1).norm() == 0.0);
    mcar::CompoundPoissonJumps cpu;
    cpu.rate = 3.0;
    mcar::UniformSize u;
    u.lower = Vector::Constant(2, -0.4);
    u.upper = Vector::Constant(2, 0.4);
    cpu.sizes = u;
    REQUIRE(mcar::small_jump_mean_rate(cpu, 2).norm() == 0.0);
  }
  SECTION("scalar Gaussian sizes against quadrature") {
    double rate = 1.7, mu = 0.3, var = 0.8;
    Vector kappa = mcar::small_jump_mean_rate(cp_gaussian(rate, mu, var), 1);
    double ref = rate * truncated_mean_quadrature(gauss_density, mu, std::sqrt(var), -1.0, 1.0);
    REQUIRE(kappa(0) == Catch::Approx(ref).margin(1e-10));
  }
  SECTION("scalar Uniform sizes against quadrature") {
    mcar::CompoundPoissonJumps cp;
    cp.rate = 2.0;
    mcar::UniformSize u;
    u.lower = Vector::Constant(1, -0.5);
    u.upper = Vector::Constant(1, 2.0);
    cp.sizes = u;
    Vector kappa = mcar::small_jump_mean_rate(cp, 1);
    // integrate only over the support slice inside the unit ball
    double ref = 2.0 * truncated_mean_quadrature(uniform_density, -0.5, 2.0, -0.5, 1.0);
    REQUIRE(kappa(0) == Catch::Approx(ref).margin(1e-10));
  }
  SECTION("constant sizes split at the unit ball") {
    mcar::CompoundPoissonJumps cp;
    cp.rate = 3.0;
    mcar::ConstantSize c;
    c.value = Vector::Constant(2, 0.5);  // norm 0.707 <= 1
    cp.sizes = c;
    Vector kappa = mcar::small_jump_mean_rate(cp, 2);
    REQUIRE(kappa(0) == Catch::Approx(1.5).margin(1e-14));
    c.value = Vector::Constant(2, 0.9);  // norm 1.27 > 1
    cp.sizes = c;
    REQUIRE(mcar::small_jump_mean_rate(cp, 2).norm() == 0.0);
  }
  SECTION("Gamma subordinator") {
    mcar::GammaJumps g;
    g.shape = 2.0;
    g.scale = 0.5;
    Vector kappa = mcar::small_jump_mean_rate(g, 3);
    double ref = 2.0 * 0.5 * (1.0 - std::exp(-2.0));
    for (int i = 0; i < 3; ++i) REQUIRE(kappa(i) == Catch::Approx(ref).margin(1e-14));
    // quadrature of x * shape * exp(-x/scale) / x over (0, 1]
    double quad = 0.0;
    int panels = 4000;
    double h = 1.0 / panels;
    for (int i = 0; i < panels; ++i) {
      double x0 = i * h, x1 = x0 + 0.5 * h, x2 = x0 + h;
      auto f = [&](double x) { return 2.0 * std::exp(-x / 0.5); };
      quad += h / 6.0 * (f(x0) + 4.0 * f(x1) + f(x2));
    }
    REQUIRE(kappa(0) == Catch::Approx(quad).margin(1e-8));
  }
  SECTION("multivariate asymmetric laws are rejected") {
    mcar::CompoundPoissonJumps cp;
    cp.rate = 1.0;
    mcar::GaussianSize g;
    g.mean = Vector::Constant(2, 0.3);
    g.cov = Matrix::Identity(2, 2);
    cp.sizes = g;
    REQUIRE_THROWS_AS(mcar::small_jump_mean_rate(cp, 2), std::invalid_argument);
  }
}

TEST_CASE("sample_levy_increments basics") {
  Partition p = mcar::power_partition(4.0, 1.0);
  SECTION("no jumps") {
    mcar::LevyTriplet t = scalar_triplet(0.7, 2.0, mcar::NoJumps{});
    mcar::LevyIncrements inc = mcar::sample_levy_increments(t, p, 99);
    REQUIRE(static_cast<int>(inc.total.size()) == p.intervals());
    for (int n = 0; n < p.intervals(); ++n) {
      REQUIRE(inc.big_jumps[n].norm() == 0.0);
      REQUIRE(inc.small_jumps_compensated[n].norm() == 0.0);
      REQUIRE(inc.drift[n](0) == Catch::Approx(0.7 * 0.25).margin(1e-15));
      REQUIRE((inc.total[n] - (inc.drift[n] + inc.brownian[n])).norm() <= 1e-15);
    }
    REQUIRE(inc.events.empty());
  }
  SECTION("deterministic in the seed") {
    mcar::LevyTriplet t = scalar_triplet(0.0, 1.0, cp_gaussian(2.0, 0.0, 1.0));
    mcar::LevyIncrements a = mcar::sample_levy_increments(t, p, 1234);
    mcar::LevyIncrements b = mcar::sample_levy_increments(t, p, 1234);
    mcar::LevyIncrements c = mcar::sample_levy_increments(t, p, 1235);
    REQUIRE(a.events.size() == b.events.size());
    for (std::size_t k = 0; k < a.events.size(); ++k) {
      REQUIRE(a.events[k].time == b.events[k].time);
      REQUIRE((a.events[k].size - b.events[k].size).norm() == 0.0);
    }
    bool identical = a.events.size() == c.events.size();
    for (int n = 0; n < p.intervals(); ++n) {
      REQUIRE((a.total[n] - b.total[n]).norm() == 0.0);
      identical = identical && (a.brownian[n] - c.brownian[n]).norm() == 0.0;
    }
    REQUIRE_FALSE(identical);
  }
  SECTION("decomposition identity across variants") {
    std::vector<mcar::JumpSpec> variants;
    variants.push_back(mcar::NoJumps{});
    variants.push_back(cp_gaussian(1.5, 0.3, 1.0));
    variants.push_back(mcar::GammaJumps{1.0, 1.0});
    variants.push_back(mcar::SymmetrizedGammaJumps{1.0, 1.0});
    std::uint64_t seed = 7;
    for (const mcar::JumpSpec& jumps : variants) {
      mcar::LevyTriplet t = scalar_triplet(0.4, 1.0, jumps);
      mcar::LevyIncrements inc = mcar::sample_levy_increments(t, p, seed++);
      for (int n = 0; n < p.intervals(); ++n) {
        Vector sum = inc.drift[n] + inc.brownian[n] + inc.big_jumps[n] +
                     inc.small_jumps_compensated[n];
        REQUIRE((inc.total[n] - sum).norm() <= 1e-12);
      }
    }
  }
}

TEST_CASE("compound Poisson jump law") {
  Partition p = mcar::power_partition(8.0, 1.0);
  mcar::LevyTriplet t = scalar_triplet(0.0, 1.0, cp_gaussian(1.0, 0.0, 1.0));
  SECTION("mean count over the horizon") {
    const int reps = 2000;
    double mean = 0.0;
    for (int r = 0; r < reps; ++r)
      mean += static_cast<double>(
          mcar::sample_levy_increments(t, p, mcar::derive_seed(404, r)).events.size());
    mean /= reps;
    REQUIRE(std::abs(mean - 8.0) <= 3.0 * std::sqrt(8.0 / reps));
  }
  SECTION("events land in their interval bins") {
    mcar::LevyIncrements inc = mcar::sample_levy_increments(t, p, 31);
    std::vector<Vector> manual(p.intervals(), Vector::Zero(1));
    for (const mcar::JumpEvent& ev : inc.events) {
      int idx = 0;
      while (idx + 1 < p.intervals() && p.times[idx + 1] <= ev.time) ++idx;
      manual[idx] += ev.size;
    }
    for (int n = 0; n < p.intervals(); ++n)
      REQUIRE((inc.raw_jumps[n] - manual[n]).norm() <= 1e-14);
  }
  SECTION("reconstruction identity with asymmetric sizes") {
    mcar::LevyTriplet ta = scalar_triplet(0.0, 1.0, cp_gaussian(1.0, 0.3, 1.0));
    mcar::LevyIncrements inc = mcar::sample_levy_increments(ta, p, 77);
    Vector kappa = mcar::small_jump_mean_rate(ta.jumps, 1);
    for (int n = 0; n < p.intervals(); ++n) {
      Vector lhs = inc.big_jumps[n] + inc.small_jumps_compensated[n] +
                   p.spacing(n) * kappa;
      REQUIRE((lhs - inc.raw_jumps[n]).norm() <= 1e-12);
    }
  }
}

TEST_CASE("decompose_jumps") {
  Partition p;
  p.times = {0.0, 1.0, 2.0, 3.0};
  mcar::JumpSpec sym = cp_gaussian(1.0, 0.0, 1.0);
  SECTION("large jump goes to the big field only") {
    std::vector<mcar::JumpEvent> events = {{1.5, Vector::Constant(1, 2.0)}};
    mcar::JumpDecomposition parts = mcar::decompose_jumps(events, p, sym, 1);
    REQUIRE(parts.big[1](0) == 2.0);
    REQUIRE(parts.big[0].norm() == 0.0);
    REQUIRE(parts.big[2].norm() == 0.0);
    for (int n = 0; n < 3; ++n) REQUIRE(parts.small_compensated[n].norm() == 0.0);
  }
  SECTION("small jump with symmetric law is uncompensated") {
    std::vector<mcar::JumpEvent> events = {{0.5, Vector::Constant(1, 0.5)}};
    mcar::JumpDecomposition parts = mcar::decompose_jumps(events, p, sym, 1);
    REQUIRE(parts.small_compensated[0](0) == 0.5);
    REQUIRE(parts.big[0].norm() == 0.0);
  }
  SECTION("norm-one jump counts as big") {
    std::vector<mcar::JumpEvent> events = {{0.5, Vector::Constant(1, 1.0)}};
    mcar::JumpDecomposition parts = mcar::decompose_jumps(events, p, sym, 1);
    REQUIRE(parts.big[0](0) == 1.0);
  }
  SECTION("event outside the span") {
    std::vector<mcar::JumpEvent> events = {{3.5, Vector::Constant(1, 1.0)}};
    REQUIRE_THROWS_AS(mcar::decompose_jumps(events, p, sym, 1), std::invalid_argument);
  }
}

TEST_CASE("Gamma variants") {
  SECTION("one-sided increments match the direct marginal in distribution") {
    Partition p = mcar::power_partition(2.0, 2.0);  // 8 intervals
    mcar::LevyTriplet t = scalar_triplet(0.0, 1.0, mcar::GammaJumps{1.0, 1.0});
    const int reps = 2000;
    std::vector<double> sums(reps);
    for (int r = 0; r < reps; ++r) {
      mcar::LevyIncrements inc =
          mcar::sample_levy_increments(t, p, mcar::derive_seed(515, r));
      double s = 0.0;
      for (const Vector& g : inc.raw_jumps) s += g(0);
      sums[r] = s;
    }
    std::mt19937_64 rng(616);
    std::gamma_distribution<double> direct(2.0, 1.0);
    std::vector<double> ref(reps);
    for (int r = 0; r < reps; ++r) ref[r] = direct(rng);
    double ks = oracle::ks_two_sample(sums, ref);
    double crit = 1.628 * std::sqrt(2.0 / reps);  // 1% level, equal sizes
    REQUIRE(ks < crit);
  }
  SECTION("compensator fields") {
    Partition p = mcar::power_partition(4.0, 1.0);
    mcar::LevyTriplet t = scalar_triplet(0.0, 1.0, mcar::GammaJumps{2.0, 0.5});
    mcar::LevyIncrements inc = mcar::sample_levy_increments(t, p, 8);
    double kappa = 2.0 * 0.5 * (1.0 - std::exp(-2.0));
    for (int n = 0; n < p.intervals(); ++n) {
      REQUIRE(inc.small_jumps_compensated[n](0) ==
              Catch::Approx(-0.25 * kappa).margin(1e-14));
      REQUIRE(inc.big_jumps[n](0) >= 0.0);
      REQUIRE((inc.big_jumps[n] - inc.raw_jumps[n]).norm() == 0.0);
    }
  }
  SECTION("symmetrized increments have symmetric law and no compensator") {
    Partition p = mcar::power_partition(4.0, 1.0);
    mcar::LevyTriplet t = scalar_triplet(0.0, 1.0, mcar::SymmetrizedGammaJumps{1.0, 1.0});
    const int reps = 400;
    double mean = 0.0;
    int count = 0;
    for (int r = 0; r < reps; ++r) {
      mcar::LevyIncrements inc =
          mcar::sample_levy_increments(t, p, mcar::derive_seed(707, r));
      for (int n = 0; n < p.intervals(); ++n) {
        REQUIRE(inc.small_jumps_compensated[n].norm() == 0.0);
        mean += inc.raw_jumps[n](0);
        ++count;
      }
    }
    mean /= count;
    // Var of one increment is 2 * shape * scale^2 * dt = 0.5
    REQUIRE(std::abs(mean) <= 3.0 * std::sqrt(0.5 / count));
  }
}

TEST_CASE("Brownian component statistics") {
  SECTION("empirical covariance over many intervals") {
    Matrix sigma(2, 2);
    sigma << 2.0, 0.5, 0.5, 1.0;
    mcar::LevyTriplet t;
    t.b = Vector::Zero(2);
    t.sigma = sigma;
    t.jumps = mcar::NoJumps{};
    Partition p;
    const int n_int = 100000;
    p.times.resize(n_int + 1);
    for (int i = 0; i <= n_int; ++i) p.times[i] = 0.01 * i;
    mcar::LevyIncrements inc = mcar::sample_levy_increments(t, p, 313);
    Matrix cov = Matrix::Zero(2, 2);
    for (const Vector& w : inc.brownian) cov += w * w.transpose();
    cov /= n_int * 0.01;
    REQUIRE((cov - sigma).norm() <= 0.1 * sigma.norm());
  }
  SECTION("fine increments aggregate to the coarse path") {
    Partition fine = mcar::power_partition(4.0, 2.0);
    mcar::NestedPartition nested = mcar::coarsen(fine, 8);
    mcar::LevyTriplet t = scalar_triplet(0.2, 1.5, cp_gaussian(1.0, 0.0, 1.0));
    mcar::LevyIncrements inc = mcar::sample_levy_increments(t, fine, 17);
    std::vector<Vector> coarse_tot =
        mcar::aggregate_increments(inc.total, nested.fine_index);
    // cumulative fine path at coarse points equals cumulative coarse sums
    Vector acc_f = Vector::Zero(1);
    std::vector<Vector> path{acc_f};
    for (const Vector& v : inc.total) {
      acc_f += v;
      path.push_back(acc_f);
    }
    Vector acc_c = Vector::Zero(1);
    for (std::size_t m = 0; m < coarse_tot.size(); ++m) {
      acc_c += coarse_tot[m];
      REQUIRE((acc_c - path[nested.fine_index[m + 1]]).norm() <= 1e-12);
    }
  }
}

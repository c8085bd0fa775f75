#pragma once

#include <mcar/levy.hpp>
#include <mcar/model.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <variant>
#include <vector>

namespace mcar {

struct StationaryInit {};
using InitialState = std::variant<Vector, StationaryInit>;

enum class Scheme { exact, euler };

// Sampled state path over a partition together with the driving-noise record
// needed to reconstruct it. states holds the full p*d state at every grid
// time, obs its leading d coordinates. brownian stores the d-dim driver
// increment of each interval; for the exact scheme gaussian_state additionally
// stores the p*d-dim Gaussian state increment drawn jointly with it, so that
//   states[n+1] = e^{A dt} states[n] + S(dt) E b + gaussian_state[n] + jumps
// holds interval by interval up to round-off. big_jumps and
// small_jumps_compensated are the per-interval binned jump parts.
struct McarPath {
  Partition partition;
  std::vector<Vector> states;
  std::vector<Vector> obs;
  std::vector<Vector> brownian;
  std::vector<Vector> gaussian_state;
  std::vector<JumpEvent> events;
  std::vector<Vector> big_jumps;
  std::vector<Vector> small_jumps_compensated;
  Scheme scheme = Scheme::exact;
};

namespace detail {

inline void check_compatible(const McarParams& params, const LevyTriplet& triplet) {
  params.validate();
  triplet.validate();
  if (triplet.dim() != params.d)
    throw std::invalid_argument("simulate: driver dimension does not match model dimension");
}

}  // namespace detail

// Jump contribution of one exact-scheme step: sum over events in (t0, t1] of
// e^{A (t1 - time)} E size. Events enter through the selection matrix, so at
// the jump instant itself only the last d state coordinates move.
inline Vector jump_state_contribution(const Matrix& a_comp, const Matrix& sel,
                                      const std::vector<JumpEvent>& events, double t0,
                                      double t1) {
  Vector out = Vector::Zero(a_comp.rows());
  for (const JumpEvent& ev : events)
    if (ev.time > t0 && ev.time <= t1)
      out += matrix_exponential(a_comp, t1 - ev.time) * (sel * ev.size);
  return out;
}

// Euler scheme consuming pre-sampled driver increments. This is the shared
// noise route: several discretizations can be driven by the same realization
// by aggregating one fine-grid increment record.
inline McarPath simulate_euler_from_increments(const McarParams& params,
                                               const LevyTriplet& triplet,
                                               const Partition& partition, const Vector& x0,
                                               const LevyIncrements& inc) {
  detail::check_compatible(params, triplet);
  partition.validate();
  const int state_dim = params.p * params.d;
  const int n_int = partition.intervals();
  if (static_cast<int>(inc.total.size()) != n_int)
    throw std::invalid_argument("simulate_euler_from_increments: increment count mismatch");
  if (x0.size() != state_dim)
    throw std::invalid_argument("simulate_euler_from_increments: initial state size mismatch");
  Matrix a_comp = companion_matrix(params);
  Matrix sel = selection_matrix(params.d, params.p);

  McarPath path;
  path.partition = partition;
  path.scheme = Scheme::euler;
  path.states.resize(n_int + 1);
  path.states[0] = x0;
  for (int n = 0; n < n_int; ++n) {
    double dt = partition.spacing(n);
    path.states[n + 1] = path.states[n] + dt * (a_comp * path.states[n]) + sel * inc.total[n];
  }
  path.obs.resize(n_int + 1);
  for (int n = 0; n <= n_int; ++n) path.obs[n] = path.states[n].head(params.d);
  path.brownian = inc.brownian;
  path.events = inc.events;
  path.big_jumps = inc.big_jumps;
  path.small_jumps_compensated = inc.small_jumps_compensated;
  return path;
}

namespace detail {

// Stationary draw via the moving-average representation: exact mean
// -A^{-1} E b, one Gaussian draw with the Lyapunov covariance, and the jump
// series truncated at a lag where e^{A T} has decayed to ~1e-8.
// The Gamma drivers have no finite event record, so they fall back to an
// Euler burn-in from the stationary mean over a horizon with decay ~1e-6.
inline Vector stationary_state_sample(const McarParams& params, const LevyTriplet& triplet,
                                      std::mt19937_64& rng, double cutoff) {
  check_compatible(params, triplet);
  const int d = params.d;
  const int state_dim = params.p * d;
  Matrix a_comp = companion_matrix(params);
  double abscissa = spectral_abscissa(a_comp);
  if (abscissa >= 0.0)
    throw std::invalid_argument("sample_stationary_initial: model is not stationary");
  Matrix sel = selection_matrix(d, params.p);
  Vector drift = drift_with_raw_jumps(triplet);

  const bool gamma_driver = std::holds_alternative<GammaJumps>(triplet.jumps) ||
                            std::holds_alternative<SymmetrizedGammaJumps>(triplet.jumps);
  if (gamma_driver) {
    Vector raw_rate = Vector::Zero(d);
    if (const auto* g = std::get_if<GammaJumps>(&triplet.jumps))
      raw_rate = Vector::Constant(d, g->shape * g->scale);
    Vector start = a_comp.partialPivLu().solve(Vector(sel * (drift + raw_rate)));
    start = -start;
    double horizon = cutoff > 0.0 ? cutoff : std::log(1e6) / (-abscissa);
    long n_steps = std::lround(std::ceil(horizon / 0.01));
    n_steps = std::min<long>(400000, std::max<long>(64, n_steps));
    Partition burn;
    burn.times.resize(n_steps + 1);
    for (long i = 0; i <= n_steps; ++i)
      burn.times[i] = horizon * static_cast<double>(i) / static_cast<double>(n_steps);
    burn.times.back() = horizon;
    LevyIncrements inc = sample_levy_increments(triplet, burn, rng);
    McarPath path = simulate_euler_from_increments(params, triplet, burn, start, inc);
    return path.states.back();
  }

  Vector mean = a_comp.partialPivLu().solve(Vector(sel * drift));
  mean = -mean;
  double horizon = cutoff > 0.0 ? cutoff : std::log(1e8) / (-abscissa);
  // The Gaussian part uses the Lyapunov covariance directly: it is the exact
  // infinite-horizon limit and stays well conditioned where the doubled-matrix
  // increment covariance overflows for long horizons. Only the jump series is
  // truncated at the cutoff.
  Matrix q = sel * triplet.sigma * sel.transpose();
  Matrix root = sym_psd_sqrt(stationary_state_covariance(a_comp, q));
  std::normal_distribution<double> gauss;
  Vector z(state_dim);
  for (int i = 0; i < state_dim; ++i) z(i) = gauss(rng);
  Vector x = mean + root * z;
  if (const auto* cp = std::get_if<CompoundPoissonJumps>(&triplet.jumps)) {
    std::vector<JumpEvent> events = sample_poisson_events(*cp, horizon, rng);
    for (const JumpEvent& ev : events)
      x += matrix_exponential(a_comp, ev.time) * (sel * ev.size);
  }
  return x;
}

inline Vector resolve_initial(const McarParams& params, const LevyTriplet& triplet,
                              const InitialState& init, std::mt19937_64& rng,
                              const char* who) {
  if (const Vector* v = std::get_if<Vector>(&init)) {
    if (v->size() != params.p * params.d)
      throw std::invalid_argument(std::string(who) + ": initial state size mismatch");
    return *v;
  }
  return stationary_state_sample(params, triplet, rng, 0.0);
}

}  // namespace detail

// Exact transition sampling: states at the grid times follow the model law
// with no discretization bias. Finite-activity drivers only. Consumption
// order of the generator is fixed (stationary draw if requested, then the
// event record, then one joint Gaussian per interval), so a seed pins the
// path. Step matrices and the joint Gaussian root are cached per distinct
// interval length; the joint covariance of (G_n, dW_n) is
//   [[C(dt), S(dt) E Sigma], [Sigma E^T S(dt)^T, dt Sigma]]
// with C the increment covariance and S the exponential integral.
inline McarPath simulate_exact(const McarParams& params, const LevyTriplet& triplet,
                               const Partition& partition, const InitialState& init,
                               std::uint64_t seed) {
  detail::check_compatible(params, triplet);
  partition.validate();
  if (std::holds_alternative<GammaJumps>(triplet.jumps) ||
      std::holds_alternative<SymmetrizedGammaJumps>(triplet.jumps))
    throw std::invalid_argument("simulate_exact: infinite-activity driver requires euler scheme");
  const int d = params.d;
  const int state_dim = params.p * d;
  const int n_int = partition.intervals();
  Matrix a_comp = companion_matrix(params);
  Matrix sel = selection_matrix(d, params.p);
  Matrix q = sel * triplet.sigma * sel.transpose();
  Vector drift = drift_with_raw_jumps(triplet);

  std::mt19937_64 rng(seed);
  McarPath path;
  path.partition = partition;
  path.scheme = Scheme::exact;
  path.states.resize(n_int + 1);
  path.states[0] = detail::resolve_initial(params, triplet, init, rng, "simulate_exact");
  path.brownian.resize(n_int);
  path.gaussian_state.resize(n_int);
  if (const auto* cp = std::get_if<CompoundPoissonJumps>(&triplet.jumps))
    path.events = sample_poisson_events(*cp, partition.horizon(), rng);

  struct Step {
    Matrix exp_a;
    Vector drift_term;
    Matrix joint_root;
  };
  std::map<double, Step> cache;
  std::normal_distribution<double> gauss;
  std::size_t next_event = 0;
  for (int n = 0; n < n_int; ++n) {
    const double t1 = partition.times[n + 1];
    const double dt = partition.spacing(n);
    auto it = cache.find(dt);
    if (it == cache.end()) {
      Step s;
      s.exp_a = matrix_exponential(a_comp, dt);
      Matrix integral = matrix_exponential_integral(a_comp, dt);
      s.drift_term = integral * (sel * drift);
      Matrix joint = Matrix::Zero(state_dim + d, state_dim + d);
      joint.topLeftCorner(state_dim, state_dim) = ou_increment_covariance(a_comp, q, dt);
      Matrix cross = integral * (sel * triplet.sigma);
      joint.topRightCorner(state_dim, d) = cross;
      joint.bottomLeftCorner(d, state_dim) = cross.transpose();
      joint.bottomRightCorner(d, d) = dt * triplet.sigma;
      s.joint_root = sym_psd_sqrt(joint);
      it = cache.emplace(dt, std::move(s)).first;
    }
    const Step& s = it->second;
    Vector z(state_dim + d);
    for (int i = 0; i < state_dim + d; ++i) z(i) = gauss(rng);
    Vector w = s.joint_root * z;
    path.gaussian_state[n] = w.head(state_dim);
    path.brownian[n] = w.tail(d);
    Vector x = s.exp_a * path.states[n] + s.drift_term + path.gaussian_state[n];
    while (next_event < path.events.size() && path.events[next_event].time <= t1) {
      const JumpEvent& ev = path.events[next_event];
      x += matrix_exponential(a_comp, t1 - ev.time) * (sel * ev.size);
      ++next_event;
    }
    path.states[n + 1] = x;
  }

  JumpDecomposition parts = decompose_jumps(path.events, partition, triplet.jumps, d);
  path.big_jumps = std::move(parts.big);
  path.small_jumps_compensated = std::move(parts.small_compensated);
  path.obs.resize(n_int + 1);
  for (int n = 0; n <= n_int; ++n) path.obs[n] = path.states[n].head(d);
  return path;
}

// Euler scheme with freshly sampled increments. Handles every driver,
// including the Gamma variants the exact scheme rejects. Same generator
// consumption order as simulate_exact: stationary draw first if requested,
// then the increment record.
inline McarPath simulate_euler(const McarParams& params, const LevyTriplet& triplet,
                               const Partition& partition, const InitialState& init,
                               std::uint64_t seed) {
  detail::check_compatible(params, triplet);
  partition.validate();
  std::mt19937_64 rng(seed);
  Vector x0 = detail::resolve_initial(params, triplet, init, rng, "simulate_euler");
  LevyIncrements inc = sample_levy_increments(triplet, partition, rng);
  return simulate_euler_from_increments(params, triplet, partition, x0, inc);
}

// Draw from the stationary state law. cutoff overrides the automatic
// truncation horizon (finite activity) or burn-in length (Gamma drivers);
// 0 picks it from the spectral abscissa.
inline Vector sample_stationary_initial(const McarParams& params, const LevyTriplet& triplet,
                                        std::uint64_t seed, double cutoff = 0.0) {
  std::mt19937_64 rng(seed);
  return detail::stationary_state_sample(params, triplet, rng, cutoff);
}

}  // namespace mcar

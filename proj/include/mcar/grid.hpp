#pragma once

#include <mcar/numerics.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcar {

// Observation grid 0 = s_0 < s_1 < ... < s_N = horizon.
struct Partition {
  std::vector<double> times;

  int intervals() const { return static_cast<int>(times.size()) - 1; }
  double horizon() const { return times.back(); }
  double spacing(int n) const { return times[n + 1] - times[n]; }

  void validate() const {
    if (times.size() < 2) throw std::invalid_argument("Partition: need at least 2 points");
    if (times.front() != 0.0) throw std::invalid_argument("Partition: must start at 0");
    for (std::size_t n = 0; n + 1 < times.size(); ++n)
      if (!(times[n] < times[n + 1]))
        throw std::invalid_argument("Partition: times must be strictly increasing");
    if (!std::isfinite(times.back())) throw std::invalid_argument("Partition: non-finite time");
  }
};

struct PartitionStats {
  double mesh = 0.0;          // largest interval
  double min_interval = 0.0;  // smallest interval
  double c_ratio = 0.0;       // min / max, in (0, 1]
  int intervals = 0;
};

inline PartitionStats partition_stats(const Partition& p) {
  p.validate();
  PartitionStats s;
  s.intervals = p.intervals();
  s.mesh = 0.0;
  s.min_interval = std::numeric_limits<double>::infinity();
  for (int n = 0; n < p.intervals(); ++n) {
    s.mesh = std::max(s.mesh, p.spacing(n));
    s.min_interval = std::min(s.min_interval, p.spacing(n));
  }
  s.c_ratio = s.min_interval / s.mesh;
  return s;
}

// Uniform partition of [0, t] with target interval length t^{-k}; the count is
// rounded so the endpoint lands exactly on t.
inline Partition power_partition(double t, double k,
                                 std::int64_t max_intervals = std::int64_t{1} << 26) {
  if (!(t > 0.0)) throw std::invalid_argument("power_partition: t must be positive");
  double n_real = std::round(std::pow(t, 1.0 + k));
  if (n_real > static_cast<double>(max_intervals))
    throw std::length_error("power_partition: interval count " + std::to_string(n_real) +
                            " exceeds cap " + std::to_string(max_intervals));
  std::int64_t n = std::max<std::int64_t>(1, static_cast<std::int64_t>(n_real));
  Partition p;
  p.times.resize(n + 1);
  for (std::int64_t i = 0; i < n; ++i) p.times[i] = t * static_cast<double>(i) / static_cast<double>(n);
  p.times[n] = t;
  p.validate();
  return p;
}

// Coarse partition together with the positions of its points on the fine grid:
// coarse interval m spans fine indices fine_index[m] .. fine_index[m+1].
struct NestedPartition {
  Partition coarse;
  std::vector<int> fine_index;
};

namespace detail {

// Locate u on the grid; nesting must be exact up to rounding noise.
inline int find_grid_index(const Partition& fine, double u, double tol) {
  auto it = std::lower_bound(fine.times.begin(), fine.times.end(), u - tol);
  if (it == fine.times.end() || std::abs(*it - u) > tol)
    throw std::invalid_argument("coarsen: requested time " + std::to_string(u) +
                                " is not a fine grid point");
  return static_cast<int>(it - fine.times.begin());
}

}  // namespace detail

inline NestedPartition coarsen(const Partition& fine, const std::vector<double>& coarse_times) {
  fine.validate();
  double tol = 1e-9 * std::max(1.0, fine.horizon());
  NestedPartition out;
  out.fine_index.reserve(coarse_times.size());
  out.coarse.times.reserve(coarse_times.size());
  for (double u : coarse_times) {
    int idx = detail::find_grid_index(fine, u, tol);
    if (!out.fine_index.empty() && idx <= out.fine_index.back())
      throw std::invalid_argument("coarsen: coarse times must be strictly increasing");
    out.fine_index.push_back(idx);
    out.coarse.times.push_back(fine.times[idx]);  // snap: nesting exact by construction
  }
  if (out.fine_index.empty() || out.fine_index.front() != 0 ||
      out.fine_index.back() != fine.intervals())
    throw std::invalid_argument("coarsen: coarse grid must share both endpoints");
  out.coarse.validate();
  return out;
}

// Keep every stride-th fine point; the final point is always kept, so the last
// interval may be shorter when stride does not divide N.
inline NestedPartition coarsen(const Partition& fine, int stride) {
  fine.validate();
  if (stride < 1) throw std::invalid_argument("coarsen: stride must be >= 1");
  NestedPartition out;
  for (int idx = 0; idx < fine.intervals(); idx += stride) {
    out.fine_index.push_back(idx);
    out.coarse.times.push_back(fine.times[idx]);
  }
  out.fine_index.push_back(fine.intervals());
  out.coarse.times.push_back(fine.times.back());
  out.coarse.validate();
  return out;
}

// k-th forward finite difference, each level dividing by the local spacing at
// its anchor. Output has N+1-k entries, anchored at s_0 .. s_{N-k}. Exact on
// polynomials only for uniform spacing; nonuniform grids carry an O(1 - c)
// bias, which is why estimation assumes increasingly uniform partitions.
inline std::vector<Vector> forward_differences(const std::vector<Vector>& values,
                                               const Partition& p, int k) {
  p.validate();
  if (static_cast<int>(values.size()) != p.intervals() + 1)
    throw std::invalid_argument("forward_differences: values/partition size mismatch");
  if (k < 0 || k > p.intervals())
    throw std::invalid_argument("forward_differences: order out of range");
  std::vector<Vector> out = values;
  for (int level = 1; level <= k; ++level) {
    std::vector<Vector> next(out.size() - 1);
    for (std::size_t n = 0; n + 1 < out.size(); ++n)
      next[n] = (out[n + 1] - out[n]) / p.spacing(static_cast<int>(n));
    out.swap(next);
  }
  return out;
}

// Stencil weights w_0..w_k with sum_i w_i f(s_{n+i}) equal to the k-th forward
// difference anchored at the window start, for any samples f. Obtained by
// pushing the k+1 impulse bases through the iterative construction.
inline std::vector<double> fd_weights(const std::vector<double>& window_times, int k) {
  if (k < 0 || static_cast<int>(window_times.size()) != k + 1)
    throw std::invalid_argument("fd_weights: window must hold k+1 times");
  for (std::size_t n = 0; n + 1 < window_times.size(); ++n)
    if (!(window_times[n] < window_times[n + 1]))
      throw std::invalid_argument("fd_weights: window times must be strictly increasing");
  std::vector<std::vector<double>> rows(k + 1);
  for (int i = 0; i <= k; ++i) {
    rows[i].assign(k + 1, 0.0);
    rows[i][i] = 1.0;
  }
  for (int level = 1; level <= k; ++level)
    for (int i = 0; i <= k; ++i) {
      std::vector<double>& r = rows[i];
      for (int n = 0; n + level <= k; ++n)
        r[n] = (r[n + 1] - r[n]) / (window_times[n + 1] - window_times[n]);
      r.resize(k + 1 - level);
    }
  std::vector<double> w(k + 1);
  for (int i = 0; i <= k; ++i) w[i] = rows[i][0];
  return w;
}

// Advisory rate diagnostics for an estimation run on the pair (P, Q). Each
// quantity should be small (or c_Q near 1) for the asymptotic approximations
// to be trustworthy at this horizon; the flags compare against ceilings and
// have no effect on any computation.
struct AssumptionCeilings {
  double hf_max = 1.0;         // t * mesh(Q)
  double c_min = 0.5;          // uniformity ratio of Q
  double mesh_ratio_max = 1.0; // t * mesh(P) / mesh(Q)^2
  double threshold_max = 1.0;  // t * mesh(Q)^(1-2b) and t * mesh(Q)^(1-4b)
};

struct AssumptionReport {
  double hf_rate = 0.0;
  double c_q = 0.0;
  double mesh_ratio = 0.0;
  std::vector<double> threshold_rate_2b;
  std::vector<double> threshold_rate_4b;
  bool hf_ok = false;
  bool c_ok = false;
  bool mesh_ratio_ok = false;
  std::vector<bool> threshold_2b_ok;
  std::vector<bool> threshold_4b_ok;
};

inline AssumptionReport assumption_diagnostics(const Partition& fine, const Partition& coarse,
                                               double t, const std::vector<double>& betas,
                                               const AssumptionCeilings& limits = {}) {
  fine.validate();
  coarse.validate();
  double tol = 1e-9 * std::max(1.0, fine.horizon());
  for (double u : coarse.times) detail::find_grid_index(fine, u, tol);
  PartitionStats sp = partition_stats(fine);
  PartitionStats sq = partition_stats(coarse);
  AssumptionReport r;
  r.hf_rate = t * sq.mesh;
  r.c_q = sq.c_ratio;
  r.mesh_ratio = t * sp.mesh / (sq.mesh * sq.mesh);
  r.hf_ok = r.hf_rate <= limits.hf_max;
  r.c_ok = r.c_q >= limits.c_min;
  r.mesh_ratio_ok = r.mesh_ratio <= limits.mesh_ratio_max;
  for (double b : betas) {
    double r2 = t * std::pow(sq.mesh, 1.0 - 2.0 * b);
    double r4 = t * std::pow(sq.mesh, 1.0 - 4.0 * b);
    r.threshold_rate_2b.push_back(r2);
    r.threshold_rate_4b.push_back(r4);
    r.threshold_2b_ok.push_back(r2 <= limits.threshold_max);
    r.threshold_4b_ok.push_back(r4 <= limits.threshold_max);
  }
  return r;
}

}  // namespace mcar

#pragma once

#include <mcar/estimate.hpp>
#include <mcar/rng.hpp>

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

namespace mcar {

enum class EstimatorKind { oracle, feasible };
enum class ThresholdMode { none, power, data_driven };

// Observation grids per horizon t: fine spacing ~ t^-k_p, coarse ~ t^-k_q.
// The defaults trade the reference protocol's k_p = 6 (millions of fine
// points at moderate horizons) for something a desk machine sweeps in
// seconds; the exponents stay configurable. Explicit partitions are allowed
// for a single horizon.
struct GridSpec {
  double k_p = 4.0;
  double k_q = 2.0;
  std::optional<Partition> fine;
  std::optional<Partition> coarse;
};

struct ThresholdSpec {
  ThresholdMode mode = ThresholdMode::none;
  Vector beta;         // power mode, one exponent per component
  double gamma = 2.0;  // data-driven mode
  double eps = 1e-8;
};

// Diffusion-matrix stage: recover driver increments with the fitted drift on
// a recovery grid with spacing ~ t^-k_rec, then run the iterative fit. The
// recovery grid is deliberately finer than the estimation coarse grid so the
// trim cut stays below the jump scale.
struct SigmaSpec {
  bool enabled = false;
  double gamma = 2.0;
  double eps = 1e-8;
  double k_rec = 3.0;
};

// One replication study: model, driver, horizons, grids, estimator flavor.
// The model must be stationary; that is checked at load, not at run time.
struct ExperimentConfig {
  std::variant<McarParams, GrcarParams> model;
  LevyTriplet levy;
  std::vector<double> horizons;
  GridSpec grid;
  ThresholdSpec threshold;
  EstimatorKind estimator = EstimatorKind::feasible;
  SigmaSpec sigma;
  int reps = 1;
  std::uint64_t master_seed = 0;
  std::string regime;
  std::string output;
  bool record_timing = false;

  bool graph_model() const { return std::holds_alternative<GrcarParams>(model); }

  int d() const {
    if (const auto* g = std::get_if<GrcarParams>(&model)) return g->d();
    return std::get<McarParams>(model).d;
  }

  int p() const {
    if (const auto* g = std::get_if<GrcarParams>(&model)) return g->p;
    return std::get<McarParams>(model).p;
  }

  McarParams mcar_params() const {
    if (const auto* g = std::get_if<GrcarParams>(&model)) return grcar_to_mcar(*g);
    return std::get<McarParams>(model);
  }

  // Coefficient vector the estimators target: vec drift for the full model,
  // vec theta for the graph model.
  Vector true_coefficients() const {
    if (const auto* g = std::get_if<GrcarParams>(&model)) return vec_theta(g->theta);
    return vec_drift(std::get<McarParams>(model));
  }

  void validate() const {
    if (const auto* g = std::get_if<GrcarParams>(&model))
      g->validate();
    else
      std::get<McarParams>(model).validate();
    levy.validate();
    if (levy.dim() != d())
      throw std::invalid_argument("ExperimentConfig: driver dimension does not match model");
    if (!is_stationary(mcar_params()))
      throw std::invalid_argument("ExperimentConfig: model is not stationary");
    if (reps < 1) throw std::invalid_argument("ExperimentConfig: reps must be >= 1");
    if (horizons.empty()) throw std::invalid_argument("ExperimentConfig: no horizons");
    for (double t : horizons)
      if (!(t > 0.0)) throw std::invalid_argument("ExperimentConfig: horizons must be positive");
    if (grid.fine.has_value() != grid.coarse.has_value())
      throw std::invalid_argument(
          "ExperimentConfig: explicit grids need both fine and coarse partitions");
    if (grid.fine.has_value()) {
      if (horizons.size() != 1)
        throw std::invalid_argument("ExperimentConfig: explicit grids allow one horizon only");
      grid.fine->validate();
      grid.coarse->validate();
      if (std::abs(grid.fine->horizon() - horizons.front()) >
          1e-9 * std::max(1.0, horizons.front()))
        throw std::invalid_argument("ExperimentConfig: explicit grid horizon mismatch");
    }
    if (threshold.mode == ThresholdMode::power) {
      if (threshold.beta.size() != 1 && threshold.beta.size() != d())
        throw std::invalid_argument(
            "ExperimentConfig: power threshold needs one exponent or one per component");
    }
    if (threshold.mode == ThresholdMode::data_driven &&
        (!(threshold.gamma > 1.0) || !(threshold.eps > 0.0)))
      throw std::invalid_argument("ExperimentConfig: data-driven threshold needs gamma > 1, eps > 0");
    if (sigma.enabled && (!(sigma.gamma > 1.0) || !(sigma.eps > 0.0) || !(sigma.k_rec > 0.0)))
      throw std::invalid_argument("ExperimentConfig: sigma stage needs gamma > 1, eps > 0, k_rec > 0");
  }
};

// Outcome of one (replication, horizon) cell. A failed cell keeps its slot
// with the failure flagged so summaries can report attrition; estimate and z
// are empty in that case. wall_ms stays 0 unless timing was requested, which
// keeps repeated runs byte-identical.
struct RunRecord {
  int rep = 0;
  int horizon_index = 0;
  double t = 0.0;
  std::string regime;
  Vector estimate;
  Vector z;
  std::optional<Matrix> sigma_hat;
  int mt = 0;
  double qv_cond = 0.0;
  AssumptionReport diagnostics;
  bool failed = false;
  std::string message;
  double wall_ms = 0.0;
};

namespace detail {

inline bool infinite_activity_driver(const LevyTriplet& triplet) {
  return std::holds_alternative<GammaJumps>(triplet.jumps) ||
         std::holds_alternative<SymmetrizedGammaJumps>(triplet.jumps);
}

// Per-horizon execution plan. In shared mode the replication simulates once
// on the finest grid of the largest horizon and every cell is derived by
// truncation at trunc_index and subsampling through sub_index.
struct HorizonPlan {
  double t = 0.0;
  Partition fine;
  Partition coarse;
  std::optional<Partition> recovery;
  int trunc_index = 0;
  std::vector<int> sub_index;
};

struct McPlan {
  std::vector<HorizonPlan> horizons;
  bool shared = false;
  Partition shared_fine;
  Scheme scheme = Scheme::exact;
};

// Snap a nominal coarse grid onto the fine one; both come from rounded power
// rules, so nesting can be off in the last ulp.
inline Partition snap_onto(const Partition& fine, const Partition& nominal) {
  return coarsen(fine, nominal.times).coarse;
}

inline McPlan make_plan(const ExperimentConfig& cfg) {
  McPlan plan;
  plan.scheme = infinite_activity_driver(cfg.levy) ? Scheme::euler : Scheme::exact;
  plan.horizons.resize(cfg.horizons.size());
  for (std::size_t h = 0; h < cfg.horizons.size(); ++h) {
    HorizonPlan& hp = plan.horizons[h];
    hp.t = cfg.horizons[h];
    if (cfg.grid.fine.has_value()) {
      hp.fine = *cfg.grid.fine;
      hp.coarse = snap_onto(hp.fine, *cfg.grid.coarse);
    } else {
      hp.fine = power_partition(hp.t, cfg.grid.k_p);
      hp.coarse = snap_onto(hp.fine, power_partition(hp.t, cfg.grid.k_q));
    }
    if (cfg.sigma.enabled)
      hp.recovery = snap_onto(hp.fine, power_partition(hp.t, cfg.sigma.k_rec));
  }

  if (cfg.horizons.size() < 2 || cfg.grid.fine.has_value()) return plan;

  // Shared-path derivation needs every horizon's fine grid on the largest
  // one. Rounded power grids satisfy this for power-of-two horizons with
  // integer exponents; anything else falls back to independent paths.
  std::size_t h_max = 0;
  for (std::size_t h = 1; h < cfg.horizons.size(); ++h)
    if (cfg.horizons[h] > cfg.horizons[h_max]) h_max = h;
  Partition shared = plan.horizons[h_max].fine;
  double tol = 1e-9 * std::max(1.0, shared.horizon());
  std::vector<HorizonPlan> derived = plan.horizons;
  for (std::size_t h = 0; h < derived.size(); ++h) {
    HorizonPlan& hp = derived[h];
    int cut;
    try {
      cut = find_grid_index(shared, hp.t, tol);
    } catch (const std::invalid_argument&) {
      return plan;
    }
    Partition prefix;
    prefix.times.assign(shared.times.begin(), shared.times.begin() + cut + 1);
    NestedPartition np;
    try {
      np = coarsen(prefix, hp.fine.times);
    } catch (const std::invalid_argument&) {
      return plan;
    }
    hp.trunc_index = cut;
    hp.sub_index = np.fine_index;
    hp.fine = np.coarse;
    hp.coarse = snap_onto(hp.fine, hp.coarse);
    if (hp.recovery.has_value()) hp.recovery = snap_onto(hp.fine, *hp.recovery);
  }
  plan.horizons = std::move(derived);
  plan.shared = true;
  plan.shared_fine = std::move(shared);
  return plan;
}

// Restriction of a shared path to one horizon's observation grid: states are
// subsampled, per-interval noise records are binned, events past the horizon
// are dropped. The Gaussian state record is not aggregable and stays empty;
// no estimator reads it.
inline McarPath derive_path(const McarPath& shared, const HorizonPlan& hp, int d) {
  McarPath out;
  out.partition = hp.fine;
  out.scheme = shared.scheme;
  out.states.reserve(hp.sub_index.size());
  out.obs.reserve(hp.sub_index.size());
  for (int idx : hp.sub_index) {
    out.states.push_back(shared.states[idx]);
    out.obs.push_back(shared.states[idx].head(d));
  }
  auto cut = [&](const std::vector<Vector>& fine_record) {
    return std::vector<Vector>(fine_record.begin(), fine_record.begin() + hp.trunc_index);
  };
  out.brownian = aggregate_increments(cut(shared.brownian), hp.sub_index);
  out.big_jumps = aggregate_increments(cut(shared.big_jumps), hp.sub_index);
  out.small_jumps_compensated =
      aggregate_increments(cut(shared.small_jumps_compensated), hp.sub_index);
  for (const JumpEvent& ev : shared.events)
    if (ev.time <= out.partition.horizon()) out.events.push_back(ev);
  return out;
}

inline McarPath simulate_for(const ExperimentConfig& cfg, const McPlan& plan,
                             const Partition& grid, std::uint64_t seed) {
  McarParams params = cfg.mcar_params();
  if (plan.scheme == Scheme::euler)
    return simulate_euler(params, cfg.levy, grid, StationaryInit{}, seed);
  return simulate_exact(params, cfg.levy, grid, StationaryInit{}, seed);
}

inline ThresholdSchedule make_schedule(const ExperimentConfig& cfg, const McarPath& path,
                                       const HorizonPlan& hp) {
  const int d = cfg.d();
  switch (cfg.threshold.mode) {
    case ThresholdMode::none:
      return unbounded_thresholds(hp.coarse.intervals(), d);
    case ThresholdMode::power: {
      Vector beta = cfg.threshold.beta.size() == 1
                        ? Vector::Constant(d, cfg.threshold.beta(0))
                        : cfg.threshold.beta;
      return power_thresholds(hp.coarse, beta, infinite_activity_driver(cfg.levy));
    }
    case ThresholdMode::data_driven: {
      // Raw de-trended increments of the highest difference quotient over the
      // usable coarse bins feed the variance fit.
      NestedPartition np = coarsen(hp.fine, hp.coarse.times);
      const int p = cfg.p();
      const int n_inc = usable_increment_count(np.fine_index, hp.fine.intervals(), p);
      std::vector<Vector> dhat;
      dhat.reserve(n_inc + 1);
      for (int m = 0; m <= n_inc; ++m)
        dhat.push_back(fd_stack_at_anchor(path.obs, hp.fine, np.fine_index[m], p).back());
      std::vector<Vector> diffs;
      diffs.reserve(n_inc);
      for (int m = 0; m < n_inc; ++m)
        diffs.push_back(dhat[m + 1] - dhat[m] - cfg.levy.b * np.coarse.spacing(m));
      return select_thresholds_data_driven(diffs, np.coarse, cfg.threshold.gamma,
                                           cfg.threshold.eps);
    }
  }
  throw std::logic_error("make_schedule: unreachable");
}

// One estimation cell on an already simulated (or derived) path. Fills every
// numeric field of the record; the caller pre-sets rep, horizon_index, t and
// regime and catches failures.
inline void run_cell(const ExperimentConfig& cfg, const McarPath& path, const HorizonPlan& hp,
                     RunRecord& rec) {
  const int d = cfg.d(), p = cfg.p();
  const Matrix& sigma = cfg.levy.sigma;
  ScoreStats stats;
  Vector coef;
  std::optional<McarParams> fitted;
  if (cfg.estimator == EstimatorKind::oracle) {
    std::vector<double> betas;
    rec.diagnostics = assumption_diagnostics(hp.fine, hp.coarse, hp.t, betas);
    IncrementSource inc = oracle_increments(path, cfg.levy.b, hp.coarse, true);
    if (const auto* g = std::get_if<GrcarParams>(&cfg.model))
      stats = grcar_score_stats(path.obs, hp.fine, hp.coarse, inc, sigma, g->adjacency, p);
    else
      stats = mcar_score_stats(path.obs, hp.fine, hp.coarse, inc, sigma, p);
    coef = drift_mle(stats);
    rec.mt = static_cast<int>(inc.increments.size());
    if (cfg.graph_model()) {
      GrcarParams gp;
      gp.p = p;
      gp.theta = unvec_theta(coef, p);
      gp.adjacency = std::get<GrcarParams>(cfg.model).adjacency;
      fitted = grcar_to_mcar(gp);
    } else {
      fitted = unvec_drift(coef, d, p);
    }
  } else {
    ThresholdSchedule schedule = make_schedule(cfg, path, hp);
    EstimateMode mode;
    if (const auto* g = std::get_if<GrcarParams>(&cfg.model))
      mode = GrcarMode{g->adjacency};
    else
      mode = McarMode{};
    DriftEstimate fit = estimate_drift(path.obs, hp.fine, hp.coarse, schedule, cfg.levy.b,
                                       sigma, p, mode);
    stats = fit.stats;
    coef = fit.coefficients;
    rec.diagnostics = fit.diagnostics;
    rec.mt = hp.coarse.intervals() - fit.dropped_intervals;
    fitted = fit.grcar.has_value() ? grcar_to_mcar(*fit.grcar) : *fit.mcar;
  }
  rec.estimate = coef;
  rec.z = z_statistic(coef, cfg.true_coefficients(), stats.QV);
  Eigen::SelfAdjointEigenSolver<Matrix> es(stats.QV);
  rec.qv_cond = es.eigenvalues()(es.eigenvalues().size() - 1) / es.eigenvalues()(0);
  if (cfg.sigma.enabled) {
    std::vector<Vector> linc =
        recover_levy_increments(path.obs, *fitted, hp.fine, *hp.recovery);
    rec.sigma_hat = estimate_sigma_iterative(linc, *hp.recovery, cfg.sigma.gamma,
                                             cfg.sigma.eps);
  }
}

}  // namespace detail

// Full replication study. Each replication derives its own seed from
// (master_seed, rep) and owns its path memory; records land in fixed
// (rep, horizon) slots, so the result is identical for every worker count.
// Per-cell failures are flagged in the record, never fatal.
inline std::vector<RunRecord> run_monte_carlo(const ExperimentConfig& cfg, int workers = 1) {
  cfg.validate();
  detail::McPlan plan = detail::make_plan(cfg);
  const int n_h = static_cast<int>(plan.horizons.size());
  std::vector<RunRecord> records(static_cast<std::size_t>(cfg.reps) * n_h);

  auto run_rep = [&](int r) {
    std::uint64_t rep_seed = derive_seed(cfg.master_seed, static_cast<std::uint64_t>(r));
    for (int h = 0; h < n_h; ++h) {
      RunRecord& rec = records[static_cast<std::size_t>(r) * n_h + h];
      rec.rep = r;
      rec.horizon_index = h;
      rec.t = plan.horizons[h].t;
      rec.regime = cfg.regime;
    }
    McarPath shared_path;
    bool shared_ok = false;
    std::string shared_error;
    if (plan.shared) {
      try {
        shared_path = detail::simulate_for(cfg, plan, plan.shared_fine,
                                           derive_seed(rep_seed, 0));
        shared_ok = true;
      } catch (const std::exception& e) {
        shared_error = e.what();
      }
    }
    for (int h = 0; h < n_h; ++h) {
      RunRecord& rec = records[static_cast<std::size_t>(r) * n_h + h];
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const detail::HorizonPlan& hp = plan.horizons[h];
        McarPath path;
        if (plan.shared) {
          if (!shared_ok) throw std::runtime_error(shared_error);
          path = detail::derive_path(shared_path, hp, cfg.d());
        } else {
          path = detail::simulate_for(cfg, plan, hp.fine,
                                      derive_seed(rep_seed, static_cast<std::uint64_t>(h)));
        }
        detail::run_cell(cfg, path, hp, rec);
      } catch (const std::exception& e) {
        rec.failed = true;
        rec.message = e.what();
        rec.estimate = Vector();
        rec.z = Vector();
        rec.sigma_hat.reset();
      }
      if (cfg.record_timing)
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
    }
  };

  if (workers <= 1) {
    for (int r = 0; r < cfg.reps; ++r) run_rep(r);
  } else {
    std::atomic<int> next{0};
    auto worker = [&]() {
      for (;;) {
        int r = next.fetch_add(1);
        if (r >= cfg.reps) return;
        run_rep(r);
      }
    };
    std::vector<std::thread> pool;
    int n_workers = std::min(workers, cfg.reps);
    pool.reserve(n_workers);
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  return records;
}

// Aggregate over one (t, regime) group, in first-appearance order of the
// record list. Failed cells count toward n_failed only; every statistic is
// over the surviving cells.
struct SummaryRow {
  double t = 0.0;
  std::string regime;
  int n = 0;
  int n_failed = 0;
  Vector mean;
  Vector bias;
  Vector rmse;
  Vector z_mean;
  Vector z_std;
  double coverage = 0.0;
  std::optional<Matrix> sigma_mean;
};

inline std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records,
                                         const Vector& truth) {
  if (records.empty()) throw std::invalid_argument("summarize: no records");
  const int k = static_cast<int>(truth.size());
  const double radius_sq = chi_squared_quantile(k, 0.95);

  struct Accum {
    SummaryRow row;
    Vector sum, sum_sq_err, z_sum, z_sum_sq;
    Matrix sigma_sum;
    int n_sigma = 0;
    int covered = 0;
  };
  std::vector<Accum> groups;
  for (const RunRecord& rec : records) {
    Accum* acc = nullptr;
    for (Accum& g : groups)
      if (g.row.t == rec.t && g.row.regime == rec.regime) {
        acc = &g;
        break;
      }
    if (acc == nullptr) {
      groups.emplace_back();
      acc = &groups.back();
      acc->row.t = rec.t;
      acc->row.regime = rec.regime;
      acc->sum = Vector::Zero(k);
      acc->sum_sq_err = Vector::Zero(k);
      acc->z_sum = Vector::Zero(k);
      acc->z_sum_sq = Vector::Zero(k);
    }
    if (rec.failed) {
      ++acc->row.n_failed;
      continue;
    }
    if (rec.estimate.size() != k || rec.z.size() != k)
      throw std::invalid_argument("summarize: record width does not match the truth vector");
    ++acc->row.n;
    acc->sum += rec.estimate;
    Vector err = rec.estimate - truth;
    acc->sum_sq_err += err.cwiseProduct(err);
    acc->z_sum += rec.z;
    acc->z_sum_sq += rec.z.cwiseProduct(rec.z);
    if (rec.z.squaredNorm() <= radius_sq) ++acc->covered;
    if (rec.sigma_hat.has_value()) {
      if (acc->n_sigma == 0) acc->sigma_sum = Matrix::Zero(rec.sigma_hat->rows(),
                                                           rec.sigma_hat->cols());
      acc->sigma_sum += *rec.sigma_hat;
      ++acc->n_sigma;
    }
  }

  std::vector<SummaryRow> rows;
  rows.reserve(groups.size());
  for (Accum& g : groups) {
    SummaryRow row = std::move(g.row);
    const int n = row.n;
    if (n > 0) {
      row.mean = g.sum / n;
      row.bias = row.mean - truth;
      row.rmse = (g.sum_sq_err / n).cwiseSqrt();
      row.z_mean = g.z_sum / n;
      row.z_std = Vector::Zero(k);
      if (n > 1)
        row.z_std =
            ((g.z_sum_sq - n * row.z_mean.cwiseProduct(row.z_mean)) / (n - 1))
                .cwiseMax(0.0)
                .cwiseSqrt();
      row.coverage = static_cast<double>(g.covered) / n;
      if (g.n_sigma > 0) row.sigma_mean = g.sigma_sum / g.n_sigma;
    } else {
      row.mean = Vector::Zero(k);
      row.bias = Vector::Zero(k);
      row.rmse = Vector::Zero(k);
      row.z_mean = Vector::Zero(k);
      row.z_std = Vector::Zero(k);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace detail {

inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

// Atomic text write: build everything, write to a sibling temp file, rename
// over the target. No partial file survives a failure.
inline void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_file_atomic: cannot open " + tmp);
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write_file_atomic: write failed on " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw std::runtime_error("write_file_atomic: rename to " + path + " failed");
  }
}

}  // namespace detail

// Record CSV. Column layout is fixed by the widest record: rep, t, regime,
// est_1..est_K, z_1..z_K, sigma entries column-major when any record carries
// one, mt, qv_cond, failed, wall_ms. Failed cells write zeros in the numeric
// columns. Floating point at 17 significant digits, so equal record sets give
// byte-identical files.
inline std::string render_records_csv(const std::vector<RunRecord>& records) {
  int k = 0;
  int sigma_entries = 0;
  for (const RunRecord& rec : records) {
    k = std::max(k, static_cast<int>(rec.estimate.size()));
    if (rec.sigma_hat.has_value())
      sigma_entries = std::max(
          sigma_entries, static_cast<int>(rec.sigma_hat->rows() * rec.sigma_hat->cols()));
  }
  std::string out = "rep,t,regime";
  for (int i = 1; i <= k; ++i) out += ",est_" + std::to_string(i);
  for (int i = 1; i <= k; ++i) out += ",z_" + std::to_string(i);
  for (int i = 1; i <= sigma_entries; ++i) out += ",sigma_" + std::to_string(i);
  out += ",mt,qv_cond,failed,wall_ms\n";
  for (const RunRecord& rec : records) {
    out += std::to_string(rec.rep);
    out += ',';
    out += detail::format_double(rec.t);
    out += ',';
    out += rec.regime;
    for (int i = 0; i < k; ++i) {
      out += ',';
      out += detail::format_double(i < rec.estimate.size() ? rec.estimate(i) : 0.0);
    }
    for (int i = 0; i < k; ++i) {
      out += ',';
      out += detail::format_double(i < rec.z.size() ? rec.z(i) : 0.0);
    }
    for (int i = 0; i < sigma_entries; ++i) {
      out += ',';
      double v = 0.0;
      if (rec.sigma_hat.has_value() && i < rec.sigma_hat->size())
        v = rec.sigma_hat->data()[i];
      out += detail::format_double(v);
    }
    out += ',';
    out += std::to_string(rec.mt);
    out += ',';
    out += detail::format_double(rec.qv_cond);
    out += ',';
    out += rec.failed ? '1' : '0';
    out += ',';
    out += detail::format_double(rec.wall_ms);
    out += '\n';
  }
  return out;
}

inline void write_records_csv(const std::vector<RunRecord>& records, const std::string& path) {
  detail::write_file_atomic(path, render_records_csv(records));
}

inline std::string render_summary_csv(const std::vector<SummaryRow>& rows) {
  int k = 0;
  int sigma_entries = 0;
  for (const SummaryRow& row : rows) {
    k = std::max(k, static_cast<int>(row.mean.size()));
    if (row.sigma_mean.has_value())
      sigma_entries = std::max(
          sigma_entries, static_cast<int>(row.sigma_mean->rows() * row.sigma_mean->cols()));
  }
  std::string out = "t,regime,n,n_failed";
  for (int i = 1; i <= k; ++i) out += ",mean_" + std::to_string(i);
  for (int i = 1; i <= k; ++i) out += ",bias_" + std::to_string(i);
  for (int i = 1; i <= k; ++i) out += ",rmse_" + std::to_string(i);
  for (int i = 1; i <= k; ++i) out += ",z_mean_" + std::to_string(i);
  for (int i = 1; i <= k; ++i) out += ",z_std_" + std::to_string(i);
  out += ",coverage";
  for (int i = 1; i <= sigma_entries; ++i) out += ",sigma_mean_" + std::to_string(i);
  out += '\n';
  for (const SummaryRow& row : rows) {
    out += detail::format_double(row.t);
    out += ',';
    out += row.regime;
    out += ',';
    out += std::to_string(row.n);
    out += ',';
    out += std::to_string(row.n_failed);
    auto cols = [&](const Vector& v) {
      for (int i = 0; i < k; ++i) {
        out += ',';
        out += detail::format_double(i < v.size() ? v(i) : 0.0);
      }
    };
    cols(row.mean);
    cols(row.bias);
    cols(row.rmse);
    cols(row.z_mean);
    cols(row.z_std);
    out += ',';
    out += detail::format_double(row.coverage);
    for (int i = 0; i < sigma_entries; ++i) {
      out += ',';
      double v = 0.0;
      if (row.sigma_mean.has_value() && i < row.sigma_mean->size())
        v = row.sigma_mean->data()[i];
      out += detail::format_double(v);
    }
    out += '\n';
  }
  return out;
}

inline void write_summary_csv(const std::vector<SummaryRow>& rows, const std::string& path) {
  detail::write_file_atomic(path, render_summary_csv(rows));
}

// Human-readable digest for standard output, one line per group.
inline std::string format_summary_table(const std::vector<SummaryRow>& rows) {
  std::string out;
  char buf[128];
  for (const SummaryRow& row : rows) {
    std::snprintf(buf, sizeof(buf), "t=%-8g %-12s n=%-5d failed=%d\n", row.t,
                  row.regime.c_str(), row.n, row.n_failed);
    out += buf;
    auto line = [&](const char* label, const Vector& v) {
      out += "  ";
      out += label;
      out += " (";
      for (int i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof(buf), i ? ", %.4f" : "%.4f", v(i));
        out += buf;
      }
      out += ")\n";
    };
    line("mean  ", row.mean);
    line("bias  ", row.bias);
    line("rmse  ", row.rmse);
    line("z mean", row.z_mean);
    line("z sd  ", row.z_std);
    std::snprintf(buf, sizeof(buf), "  coverage %.4f\n", row.coverage);
    out += buf;
    if (row.sigma_mean.has_value()) {
      out += "  sigma mean (";
      for (int i = 0; i < row.sigma_mean->size(); ++i) {
        std::snprintf(buf, sizeof(buf), i ? ", %.4f" : "%.4f", row.sigma_mean->data()[i]);
        out += buf;
      }
      out += ")\n";
    }
  }
  return out;
}

namespace detail {

inline Vector json_vector(const nlohmann::json& j, const std::string& who) {
  if (!j.is_array()) throw std::invalid_argument(who + ": expected an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

inline Matrix json_matrix(const nlohmann::json& j, const std::string& who) {
  if (!j.is_array() || j.empty())
    throw std::invalid_argument(who + ": expected a non-empty array of rows");
  const std::size_t rows = j.size();
  const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
  if (cols == 0) throw std::invalid_argument(who + ": rows must be non-empty arrays");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    if (!j[r].is_array() || j[r].size() != cols)
      throw std::invalid_argument(who + ": ragged rows");
    for (std::size_t c = 0; c < cols; ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
  }
  return m;
}

inline SizeDistribution json_size_distribution(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "gaussian") {
    GaussianSize s;
    s.mean = json_vector(j.at("mean"), "jump sizes mean");
    s.cov = json_matrix(j.at("cov"), "jump sizes cov");
    return s;
  }
  if (type == "constant") {
    ConstantSize s;
    s.value = json_vector(j.at("value"), "jump sizes value");
    return s;
  }
  if (type == "uniform") {
    UniformSize s;
    s.lower = json_vector(j.at("lower"), "jump sizes lower");
    s.upper = json_vector(j.at("upper"), "jump sizes upper");
    return s;
  }
  throw std::invalid_argument("jump sizes: unknown type " + type);
}

inline JumpSpec json_jumps(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "none") return NoJumps{};
  if (type == "compound_poisson") {
    CompoundPoissonJumps cp;
    cp.rate = j.at("rate").get<double>();
    cp.sizes = json_size_distribution(j.at("sizes"));
    return cp;
  }
  if (type == "gamma") {
    GammaJumps g;
    g.shape = j.value("shape", 1.0);
    g.scale = j.value("scale", 1.0);
    return g;
  }
  if (type == "symmetrized_gamma") {
    SymmetrizedGammaJumps g;
    g.shape = j.value("shape", 1.0);
    g.scale = j.value("scale", 1.0);
    return g;
  }
  throw std::invalid_argument("jumps: unknown type " + type);
}

inline std::string default_regime(const JumpSpec& jumps) {
  if (std::holds_alternative<NoJumps>(jumps)) return "bm";
  if (std::holds_alternative<CompoundPoissonJumps>(jumps)) return "cp";
  if (std::holds_alternative<GammaJumps>(jumps)) return "gamma";
  return "sym_gamma";
}

inline Partition json_partition(const nlohmann::json& j, const std::string& who) {
  Partition p;
  if (!j.is_array()) throw std::invalid_argument(who + ": expected an array of times");
  p.times.reserve(j.size());
  for (const auto& v : j) p.times.push_back(v.get<double>());
  p.validate();
  return p;
}

}  // namespace detail

// Parse a configuration document. Model block: either {d, p, A: [p matrices]}
// or {p, theta: p x 2, adjacency} for the graph variant. See the shipped
// configuration files for full examples of every block.
inline ExperimentConfig load_experiment_config(const nlohmann::json& j) {
  ExperimentConfig cfg;

  const nlohmann::json& jm = j.at("model");
  if (jm.contains("theta")) {
    GrcarParams g;
    g.theta = detail::json_matrix(jm.at("theta"), "model theta");
    g.p = jm.value("p", static_cast<int>(g.theta.rows()));
    g.adjacency = detail::json_matrix(jm.at("adjacency"), "model adjacency");
    cfg.model = std::move(g);
  } else {
    McarParams m;
    const nlohmann::json& ja = jm.at("A");
    if (!ja.is_array() || ja.empty())
      throw std::invalid_argument("model A: expected an array of matrices");
    for (const auto& mat : ja) m.A.push_back(detail::json_matrix(mat, "model A"));
    m.p = jm.value("p", static_cast<int>(m.A.size()));
    m.d = jm.value("d", static_cast<int>(m.A.front().rows()));
    cfg.model = std::move(m);
  }

  const nlohmann::json& jl = j.at("levy");
  cfg.levy.b = detail::json_vector(jl.at("b"), "levy b");
  cfg.levy.sigma = detail::json_matrix(jl.at("sigma"), "levy sigma");
  cfg.levy.jumps = jl.contains("jumps") ? detail::json_jumps(jl.at("jumps")) : JumpSpec{NoJumps{}};

  for (const auto& t : j.at("horizons")) cfg.horizons.push_back(t.get<double>());

  if (j.contains("grid")) {
    const nlohmann::json& jg = j.at("grid");
    cfg.grid.k_p = jg.value("k_p", cfg.grid.k_p);
    cfg.grid.k_q = jg.value("k_q", cfg.grid.k_q);
    if (jg.contains("fine_times"))
      cfg.grid.fine = detail::json_partition(jg.at("fine_times"), "grid fine_times");
    if (jg.contains("coarse_times"))
      cfg.grid.coarse = detail::json_partition(jg.at("coarse_times"), "grid coarse_times");
  }

  if (j.contains("threshold")) {
    const nlohmann::json& jt = j.at("threshold");
    const std::string mode = jt.value("mode", std::string("none"));
    if (mode == "none") {
      cfg.threshold.mode = ThresholdMode::none;
    } else if (mode == "power") {
      cfg.threshold.mode = ThresholdMode::power;
      const nlohmann::json& jb = jt.at("beta");
      cfg.threshold.beta =
          jb.is_array() ? detail::json_vector(jb, "threshold beta")
                        : Vector::Constant(1, jb.get<double>());
    } else if (mode == "data_driven") {
      cfg.threshold.mode = ThresholdMode::data_driven;
      cfg.threshold.gamma = jt.value("gamma", cfg.threshold.gamma);
      cfg.threshold.eps = jt.value("eps", cfg.threshold.eps);
    } else {
      throw std::invalid_argument("threshold: unknown mode " + mode);
    }
  }

  const std::string est = j.value("estimator", std::string("feasible"));
  if (est == "oracle")
    cfg.estimator = EstimatorKind::oracle;
  else if (est == "feasible")
    cfg.estimator = EstimatorKind::feasible;
  else
    throw std::invalid_argument("estimator: unknown kind " + est);

  if (j.contains("sigma_estimation")) {
    const nlohmann::json& js = j.at("sigma_estimation");
    cfg.sigma.enabled = js.value("enabled", true);
    cfg.sigma.gamma = js.value("gamma", cfg.sigma.gamma);
    cfg.sigma.eps = js.value("eps", cfg.sigma.eps);
    cfg.sigma.k_rec = js.value("k_rec", cfg.sigma.k_rec);
  }

  cfg.reps = j.value("reps", 1);
  cfg.master_seed = j.value("master_seed", std::uint64_t{0});
  cfg.regime = j.value("regime", detail::default_regime(cfg.levy.jumps));
  cfg.output = j.value("output", std::string());
  cfg.record_timing = j.value("record_timing", false);

  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("load_experiment_config_file: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  return load_experiment_config(j);
}

}  // namespace mcar

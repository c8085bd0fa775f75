// Command-line front end. All numeric behavior lives in the headers under
// include/; this file only parses flags, dispatches, and serializes.
//
// Exit codes: 0 success, 1 configuration or input error, 2 failure while
// running. Output files are written to a temp sibling and renamed, so no
// partial file survives a failure.

#include <mcar/mc.hpp>

#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace mcar;

std::string summary_path_for(const std::string& records_path) {
  const std::string suffix = ".csv";
  if (records_path.size() > suffix.size() &&
      records_path.compare(records_path.size() - suffix.size(), suffix.size(), suffix) == 0)
    return records_path.substr(0, records_path.size() - suffix.size()) + "_summary.csv";
  return records_path + "_summary.csv";
}

// Numeric CSV reader shared by `estimate` and `sigma`. Skips a header line
// when the first field is not a number; every data row must have the same
// column count.
std::vector<std::vector<double>> read_numeric_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open input file " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string field;
    bool numeric = true;
    while (std::getline(ss, field, ',')) {
      try {
        std::size_t used = 0;
        double v = std::stod(field, &used);
        if (used != field.size()) throw std::invalid_argument(field);
        row.push_back(v);
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (!numeric) {
      if (rows.empty()) continue;  // header
      throw std::invalid_argument("non-numeric row in " + path + ": " + line);
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::invalid_argument("ragged rows in " + path);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::invalid_argument("no data rows in " + path);
  return rows;
}

std::string render_path_csv(const McarPath& path) {
  const int d = static_cast<int>(path.obs.front().size());
  std::string out = "time";
  for (int i = 1; i <= d; ++i) out += ",y_" + std::to_string(i);
  out += '\n';
  for (std::size_t n = 0; n < path.obs.size(); ++n) {
    out += detail::format_double(path.partition.times[n]);
    for (int i = 0; i < d; ++i) {
      out += ',';
      out += detail::format_double(path.obs[n](i));
    }
    out += '\n';
  }
  return out;
}

std::string render_sigma_csv(const Matrix& sigma) {
  std::string out;
  for (int i = 1; i <= static_cast<int>(sigma.size()); ++i)
    out += (i > 1 ? ",sigma_" : "sigma_") + std::to_string(i);
  out += '\n';
  for (int i = 0; i < static_cast<int>(sigma.size()); ++i) {
    if (i > 0) out += ',';
    out += detail::format_double(sigma.data()[i]);
  }
  out += '\n';
  return out;
}

struct CliArgs {
  std::string config;
  std::string input;
  std::string out;
  std::uint64_t seed = 0;
  int reps = 0;
  double t = 0.0;
  int workers = 1;
  bool verbose = false;
  bool timing = false;
};

bool flag_set(const CLI::App& sub, const std::string& name) {
  const CLI::Option* opt = sub.get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

void apply_overrides(ExperimentConfig& cfg, const CliArgs& args, const CLI::App& sub) {
  if (flag_set(sub, "--seed")) cfg.master_seed = args.seed;
  if (flag_set(sub, "--reps")) cfg.reps = args.reps;
  if (flag_set(sub, "--t")) {
    cfg.horizons = {args.t};
    cfg.grid.fine.reset();
    cfg.grid.coarse.reset();
  }
  if (args.timing) cfg.record_timing = true;
  cfg.validate();
}

Partition fine_partition(const ExperimentConfig& cfg, double t) {
  return cfg.grid.fine.has_value() ? *cfg.grid.fine : power_partition(t, cfg.grid.k_p);
}

Partition coarse_partition(const ExperimentConfig& cfg, const Partition& fine, double t) {
  Partition nominal =
      cfg.grid.coarse.has_value() ? *cfg.grid.coarse : power_partition(t, cfg.grid.k_q);
  return coarsen(fine, nominal.times).coarse;
}

int run_mc(const ExperimentConfig& cfg, const CliArgs& args) {
  std::string out = !args.out.empty() ? args.out : cfg.output;
  if (args.verbose)
    std::cerr << "mc: " << cfg.reps << " reps, " << cfg.horizons.size() << " horizon(s), "
              << args.workers << " worker(s), master seed " << cfg.master_seed << "\n";
  std::vector<RunRecord> records = run_monte_carlo(cfg, args.workers);
  std::vector<SummaryRow> rows = summarize(records, cfg.true_coefficients());
  if (!out.empty()) {
    write_records_csv(records, out);
    write_summary_csv(rows, summary_path_for(out));
    if (args.verbose)
      std::cerr << "mc: wrote " << out << " and " << summary_path_for(out) << "\n";
  }
  std::cout << format_summary_table(rows);
  return 0;
}

int run_simulate(const ExperimentConfig& cfg, const CliArgs& args) {
  const double t = cfg.horizons.front();
  Partition fine = fine_partition(cfg, t);
  McarPath path;
  if (detail::infinite_activity_driver(cfg.levy))
    path = simulate_euler(cfg.mcar_params(), cfg.levy, fine, StationaryInit{}, cfg.master_seed);
  else
    path = simulate_exact(cfg.mcar_params(), cfg.levy, fine, StationaryInit{}, cfg.master_seed);
  detail::write_file_atomic(args.out, render_path_csv(path));
  if (args.verbose)
    std::cerr << "simulate: t=" << t << ", " << fine.intervals() << " intervals, seed "
              << cfg.master_seed << ", wrote " << args.out << "\n";
  return 0;
}

int run_estimate(const ExperimentConfig& cfg, const CliArgs& args,
                 const std::vector<std::vector<double>>& rows) {
  const int d = static_cast<int>(rows.front().size()) - 1;
  if (d != cfg.d())
    throw std::invalid_argument("observation file has " + std::to_string(d) +
                                " components, config expects " + std::to_string(cfg.d()));
  McarPath path;
  path.partition.times.reserve(rows.size());
  path.obs.reserve(rows.size());
  for (const std::vector<double>& row : rows) {
    path.partition.times.push_back(row[0]);
    Vector y(d);
    for (int i = 0; i < d; ++i) y(i) = row[i + 1];
    path.obs.push_back(std::move(y));
  }
  path.partition.validate();

  detail::HorizonPlan hp;
  hp.t = path.partition.horizon();
  hp.fine = path.partition;
  hp.coarse = coarse_partition(cfg, hp.fine, hp.t);
  RunRecord rec;
  rec.t = hp.t;
  rec.regime = cfg.regime;
  ThresholdSchedule schedule = detail::make_schedule(cfg, path, hp);
  EstimateMode mode;
  if (const auto* g = std::get_if<GrcarParams>(&cfg.model))
    mode = GrcarMode{g->adjacency};
  else
    mode = McarMode{};
  DriftEstimate fit = estimate_drift(path.obs, hp.fine, hp.coarse, schedule, cfg.levy.b,
                                     cfg.levy.sigma, cfg.p(), mode);
  rec.estimate = fit.coefficients;
  rec.z = z_statistic(fit.coefficients, cfg.true_coefficients(), fit.stats.QV);
  rec.diagnostics = fit.diagnostics;
  rec.mt = hp.coarse.intervals() - fit.dropped_intervals;
  Eigen::SelfAdjointEigenSolver<Matrix> es(fit.stats.QV);
  rec.qv_cond = es.eigenvalues()(es.eigenvalues().size() - 1) / es.eigenvalues()(0);

  std::string csv = render_records_csv({rec});
  if (!args.out.empty())
    detail::write_file_atomic(args.out, csv);
  else
    std::cout << csv;
  if (args.verbose)
    std::cerr << "estimate: " << rec.mt << " of " << hp.coarse.intervals()
              << " coarse bins used\n";
  return 0;
}

int run_sigma(const ExperimentConfig& cfg, const CliArgs& args,
              const std::vector<std::vector<double>>& rows) {
  const int d = static_cast<int>(rows.front().size()) - 1;
  if (d < 1) throw std::invalid_argument("increment file needs dt plus components");
  Partition grid;
  grid.times.push_back(0.0);
  std::vector<Vector> increments;
  increments.reserve(rows.size());
  for (const std::vector<double>& row : rows) {
    grid.times.push_back(grid.times.back() + row[0]);
    Vector x(d);
    for (int i = 0; i < d; ++i) x(i) = row[i + 1];
    increments.push_back(std::move(x));
  }
  grid.validate();
  Matrix sigma = estimate_sigma_iterative(increments, grid, cfg.sigma.gamma, cfg.sigma.eps);
  std::string csv = render_sigma_csv(sigma);
  if (!args.out.empty())
    detail::write_file_atomic(args.out, csv);
  else
    std::cout << csv;
  if (args.verbose)
    std::cerr << "sigma: " << increments.size() << " increments, gamma " << cfg.sigma.gamma
              << "\n";
  return 0;
}

int run_diagnose(const ExperimentConfig& cfg) {
  std::vector<double> betas;
  if (cfg.threshold.mode == ThresholdMode::power)
    for (Eigen::Index i = 0; i < cfg.threshold.beta.size(); ++i)
      betas.push_back(cfg.threshold.beta(i));
  char buf[160];
  for (double t : cfg.horizons) {
    Partition fine = fine_partition(cfg, t);
    Partition coarse = coarse_partition(cfg, fine, t);
    AssumptionReport rep = assumption_diagnostics(fine, coarse, t, betas);
    std::snprintf(buf, sizeof(buf), "t=%g\n", t);
    std::cout << buf;
    std::snprintf(buf, sizeof(buf), "  t*mesh(Q)         = %-12g %s\n", rep.hf_rate,
                  rep.hf_ok ? "ok" : "LARGE");
    std::cout << buf;
    std::snprintf(buf, sizeof(buf), "  c(Q)              = %-12g %s\n", rep.c_q,
                  rep.c_ok ? "ok" : "NONUNIFORM");
    std::cout << buf;
    std::snprintf(buf, sizeof(buf), "  t*mesh(P)/mesh(Q)^2 = %-12g %s\n", rep.mesh_ratio,
                  rep.mesh_ratio_ok ? "ok" : "LARGE");
    std::cout << buf;
    for (std::size_t i = 0; i < rep.threshold_rate_2b.size(); ++i) {
      std::snprintf(buf, sizeof(buf),
                    "  beta_%zu: t*mesh(Q)^(1-2b) = %-12g %s, t*mesh(Q)^(1-4b) = %-12g %s\n",
                    i + 1, rep.threshold_rate_2b[i], rep.threshold_2b_ok[i] ? "ok" : "LARGE",
                    rep.threshold_rate_4b[i], rep.threshold_4b_ok[i] ? "ok" : "LARGE");
      std::cout << buf;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulation and estimation toolkit for Levy-driven CAR processes"};
  app.require_subcommand(1);
  CliArgs args;

  auto add_common = [&](CLI::App* sub, bool with_input) {
    sub->add_option("--config", args.config, "configuration file (JSON)")->required();
    if (with_input)
      sub->add_option("--in", args.input, "input data file (CSV)")->required();
    sub->add_option("--out", args.out, "output file path");
    sub->add_option("--seed", args.seed, "override the master seed");
    sub->add_option("--t", args.t, "override the horizon list with a single t");
    sub->add_flag("--verbose", args.verbose, "progress notes on standard error");
  };

  CLI::App* mc = app.add_subcommand("mc", "run a replication study");
  add_common(mc, false);
  mc->add_option("--reps", args.reps, "override the replication count");
  mc->add_option("--workers", args.workers, "worker thread count")
      ->envname("MCAR_WORKERS")
      ->check(CLI::PositiveNumber);
  mc->add_flag("--timing", args.timing, "record per-cell wall time");

  CLI::App* simulate = app.add_subcommand("simulate", "write one sample path");
  add_common(simulate, false);
  simulate->get_option("--out")->required();

  CLI::App* estimate = app.add_subcommand("estimate", "fit drift coefficients to observations");
  add_common(estimate, true);

  CLI::App* sigma = app.add_subcommand("sigma", "fit the driver covariance to increments");
  add_common(sigma, true);

  CLI::App* diagnose = app.add_subcommand("diagnose", "report asymptotic-regime diagnostics");
  add_common(diagnose, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  bool loading = true;
  try {
    CLI::App* sub = app.get_subcommands().front();
    ExperimentConfig cfg = load_experiment_config_file(args.config);
    apply_overrides(cfg, args, *sub);
    std::vector<std::vector<double>> input_rows;
    if (sub == estimate || sub == sigma) input_rows = read_numeric_csv(args.input);
    loading = false;
    if (sub == mc) return run_mc(cfg, args);
    if (sub == simulate) return run_simulate(cfg, args);
    if (sub == estimate) return run_estimate(cfg, args, input_rows);
    if (sub == sigma) return run_sigma(cfg, args, input_rows);
    return run_diagnose(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return loading ? 1 : 2;
  }
}

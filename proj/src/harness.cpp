#include "enkf/harness.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "enkf/errors.hpp"

#ifndef ENKF_LAB_VERSION
#define ENKF_LAB_VERSION "0.0.0"
#endif

namespace enkf {

namespace fs = std::filesystem;

EnkfConfig make_enkf_config(const ExperimentConfig& c) {
  EnkfConfig cfg;
  cfg.K = c.K;
  cfg.p = c.resolved_p();
  cfg.r = c.model.r;
  cfg.rho = c.model.rho;
  cfg.tau = c.model.tau;
  cfg.dense_eig_max_dim = c.dense_eig_max_dim;
  try {
    cfg.validate(c.model.dim());
  } catch (const InvalidParams& e) {
    throw ConfigError("enkf", e.what());
  }
  if (cfg.p > cfg.K - 1) throw ConfigError("enkf.p", "must be <= K - 1 so the posterior spread can carry it");
  return cfg;
}

FilterSetup make_filter_setup(const ExperimentConfig& c) {
  FilterSetup s(build_turbulence(c.model));
  s.cfg = make_enkf_config(c);
  s.T = c.T;
  s.init_var = c.init_var;
  const bool stationary =
      c.reference == "stationary" || (c.reference == "auto" && c.model.sigma_obs && !c.model.jump_spec);
  if (stationary) s.reference = stationary_reference_covariance(c.model);
  return s;
}

namespace {

std::string default_out_dir() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream os;
  os << "out/" << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

void write_manifest(const std::string& dir, const std::string& command, const ExperimentConfig& c) {
  json m;
  m["tool"] = "enkf_lab";
  m["version"] = ENKF_LAB_VERSION;
  m["command"] = command;
  m["config"] = to_json(c);
  m["seeds"] = c.seeds();
  write_json(m, (fs::path(dir) / "manifest.json").string());
}

double tail_mean(const std::vector<FilterDiagnostics>& s, std::size_t count, double FilterDiagnostics::*f,
                 bool floor_one) {
  count = std::min(count, s.size());
  double sum = 0;
  for (std::size_t i = s.size() - count; i < s.size(); ++i) sum += floor_one ? std::max(1.0, s[i].*f) : s[i].*f;
  return count ? sum / static_cast<double>(count) : 0.0;
}

int cmd_simulate(const ExperimentConfig& c, const std::string& dir, std::ostream& out) {
  FilterSetup setup = make_filter_setup(c);
  const auto seeds = c.seeds();
  const FilterExperimentResult res = run_filter_experiment(setup, seeds);
  for (const auto& run : res.runs)
    write_csv(run.diagnostics, (fs::path(dir) / ("diagnostics_seed_" + std::to_string(run.seed) + ".csv")).string());
  write_csv(res.stats.mean, (fs::path(dir) / "diagnostics_mean.csv").string());
  write_csv(res.stats.q10, (fs::path(dir) / "diagnostics_q10.csv").string());
  write_csv(res.stats.q50, (fs::path(dir) / "diagnostics_q50.csv").string());
  write_csv(res.stats.q90, (fs::path(dir) / "diagnostics_q90.csv").string());

  json summary;
  summary["p"] = setup.cfg.p;
  summary["d"] = setup.stream.dim();
  summary["reference"] = setup.reference ? "stationary" : "riccati";
  summary["nu_last100_mean"] = tail_mean(res.stats.mean, 100, &FilterDiagnostics::nu, false);
  summary["fidelity_last100_mean"] = tail_mean(res.stats.mean, 100, &FilterDiagnostics::cov_fidelity, false);
  summary["maha_sq_per_d_last100_mean"] = tail_mean(res.stats.mean, 100, &FilterDiagnostics::maha_sq_per_d, false);
  summary["maha_sq_per_d_last50_mean"] = tail_mean(res.stats.mean, 50, &FilterDiagnostics::maha_sq_per_d, false);
  summary["l2_error_last100_mean"] = tail_mean(res.stats.mean, 100, &FilterDiagnostics::l2_error, false);
  write_json(summary, (fs::path(dir) / "summary.json").string());
  out << "simulate: " << seeds.size() << " seed(s), T=" << c.T << ", d=" << setup.stream.dim()
      << ", p=" << setup.cfg.p << "\n"
      << "  mean nu over last 100 steps: " << format_double(summary["nu_last100_mean"].get<double>()) << "\n"
      << "  mean maha_sq_per_d over last 100 steps: "
      << format_double(summary["maha_sq_per_d_last100_mean"].get<double>()) << "\n";
  return 0;
}

int cmd_verify_dim(const ExperimentConfig& c, const std::string& dir, std::ostream& out) {
  const DimReport rep = verify_dim(c.model);
  json j = to_json(rep);
  if (!c.rho_grid.empty()) {
    json table = json::array();
    for (const auto& [rho, p] : minimal_p_search(c.model, c.rho_grid)) table.push_back({{"rho", rho}, {"p", p}});
    j["rho_grid"] = table;
  }
  write_json(j, (fs::path(dir) / "dim_report.json").string());
  write_text(dim_report_csv(rep), (fs::path(dir) / "modes.csv").string());
  out << "verify-dim (" << rep.kind << "): p = " << rep.p_effective << " positive-wavenumber modes, "
      << rep.p_plus_minus << " counting +/-k, rho = " << rep.rho << "\n"
      << "  instability branch: " << rep.p_instability << ", covariance branch: " << rep.p_covariance
      << ", mode 0 " << (rep.mode0_failing ? "fails" : "passes") << ", state dims: " << rep.p_state_dims << "\n";
  return 0;
}

int cmd_rmt(const ExperimentConfig& c, const std::string& dir, std::ostream& out) {
  const ConcentrationResult res = run_concentration_experiment(c.rmt);
  std::ostringstream rows;
  rows << "K,condition_number,rare_event_freq,lambda_median,mu_median\n";
  for (const auto& r : res.rows)
    rows << r.K << ',' << format_double(r.condition_number) << ',' << format_double(r.rare_event_freq) << ','
         << format_double(r.lambda_median) << ',' << format_double(r.mu_median) << '\n';
  write_text(rows.str(), (fs::path(dir) / "concentration.csv").string());
  std::ostringstream tail;
  tail << "t,prob,count\n";
  for (const auto& t : res.tail) tail << format_double(t.t) << ',' << format_double(t.prob) << ',' << t.count << '\n';
  write_text(tail.str(), (fs::path(dir) / "lambda_tail.csv").string());
  std::ostringstream trials;
  trials << "K,condition_number,lambda,mu,in_rare_event\n";
  for (const auto& t : res.trials)
    trials << t.K << ',' << format_double(t.condition_number) << ',' << format_double(t.lambda) << ','
           << format_double(t.mu) << ',' << (t.in_rare_event ? 1 : 0) << '\n';
  write_text(trials.str(), (fs::path(dir) / "trials.csv").string());
  write_json(to_json(res), (fs::path(dir) / "summary.json").string());
  out << "rmt-experiment: monotone fraction " << format_double(res.monotone_fraction) << ", tail slope "
      << format_double(res.tail_fit.slope) << " (R^2 " << format_double(res.tail_fit.r2) << ")\n";
  return 0;
}

int cmd_stability(const ExperimentConfig& c, const std::string& dir, std::ostream& out) {
  FilterSetup setup = make_filter_setup(c);
  const StabilityResult res = run_stability_experiment(setup, c.shifts, c.seeds());
  std::ostringstream os;
  os << "seed,shift,slope,r2,points,spreads_identical\n";
  for (const auto& f : res.fits)
    os << f.seed << ',' << format_double(f.shift) << ',' << format_double(f.fit.slope) << ','
       << format_double(f.fit.r2) << ',' << f.fit.points << ',' << (f.spreads_identical ? 1 : 0) << '\n';
  write_text(os.str(), (fs::path(dir) / "stability.csv").string());
  write_json(to_json(res), (fs::path(dir) / "summary.json").string());
  out << "stability: negative slope fraction " << format_double(res.negative_slope_fraction)
      << ", spreads identical: " << (res.all_spreads_identical ? "yes" : "no") << "\n";
  return 0;
}

int cmd_accuracy(const ExperimentConfig& c, const std::string& dir, std::ostream& out) {
  FilterSetup setup = make_filter_setup(c);
  const auto rows = run_accuracy_experiment(setup, c.eps, c.seeds());
  std::ostringstream os;
  os << "eps,mean_error,error_over_eps\n";
  for (const auto& r : rows)
    os << format_double(r.eps) << ',' << format_double(r.mean_error) << ',' << format_double(r.mean_error / r.eps)
       << '\n';
  write_text(os.str(), (fs::path(dir) / "accuracy.csv").string());
  write_json(to_json(rows), (fs::path(dir) / "summary.json").string());
  out << "accuracy:";
  for (const auto& r : rows) out << " eps=" << format_double(r.eps) << " err/eps=" << format_double(r.mean_error / r.eps);
  out << "\n";
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Ensemble Kalman filter lab: turbulence testbed, verifiers and Monte Carlo experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ENKF_LAB_VERSION);

  struct Sub {
    CLI::App* app;
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
  };
  const std::vector<std::pair<std::string, std::string>> names{
      {"simulate", "truth + EnKF runs with per-step diagnostics"},
      {"verify-dim", "effective-dimension check for the turbulence model"},
      {"rmt-experiment", "forecast-covariance concentration experiment"},
      {"stability", "paired shifted-mean runs and decay-rate fits"},
      {"accuracy", "error scaling under noise level eps"}};
  std::vector<Sub> subs(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    Sub& s = subs[i];
    s.app = app.add_subcommand(names[i].first, names[i].second);
    s.app->add_option("--config", s.config, "experiment config (JSON)")->required();
    s.app->add_option("--seed", s.seed, "base seed override");
    s.app->add_option("--out", s.out_dir, "output directory (default ./out/<timestamp>/)");
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << ENKF_LAB_VERSION << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  const Sub* chosen = nullptr;
  for (const auto& s : subs)
    if (s.app->parsed()) chosen = &s;
  const std::string command = chosen->app->get_name();

  try {
    ExperimentConfig c = load_config(chosen->config);
    if (chosen->seed) {
      if (c.seed_list.empty())
        c.seed_base = *chosen->seed;
      else
        c.seed_list = {*chosen->seed};
      c.rmt.seed = *chosen->seed;
    }
    std::string dir = chosen->out_dir;
    if (dir.empty()) dir = c.output_dir;
    if (dir.empty()) dir = default_out_dir();
    c.output_dir.clear();  // the manifest records inputs, not where they were written
    if (command != "verify-dim" && command != "rmt-experiment") c.p = c.resolved_p();

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());

    int rc = 0;
    if (command == "simulate") {
      c.experiment = "simulate";
      write_manifest(dir, command, c);
      rc = cmd_simulate(c, dir, out);
    } else if (command == "verify-dim") {
      c.experiment = "verify-dim";
      write_manifest(dir, command, c);
      rc = cmd_verify_dim(c, dir, out);
    } else if (command == "rmt-experiment") {
      c.experiment = "rmt";
      write_manifest(dir, command, c);
      rc = cmd_rmt(c, dir, out);
    } else if (command == "stability") {
      c.experiment = "stability";
      write_manifest(dir, command, c);
      rc = cmd_stability(c, dir, out);
    } else {
      c.experiment = "accuracy";
      write_manifest(dir, command, c);
      rc = cmd_accuracy(c, dir, out);
    }
    out << "outputs in " << dir << "\n";
    return rc;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace enkf

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "enkf/enkf.hpp"
#include "enkf/kalman_ref.hpp"
#include "enkf/models.hpp"

namespace enkf {

struct FilterDiagnostics {
  std::uint64_t step = 0;
  double maha_sq_per_d = 0;  // (1/d) e^T (C + rho I)^{-1} e
  double l2_error = 0;
  double nu = 1;
  double lambda = 1;
  double mu = 1;
  double chi = 1;
  double cov_fidelity = 0;  // raw loewner ratio of C against the reference
};

struct LambdaMu {
  double lambda = 1;
  double mu = 1;
};

/// lambda = max(1, ratio(C_hat, r A C A^T + r Sigma+ + r tau rho I)),
/// mu = max(1, ratio(r A C A^T + r Sigma+ + tau rho I, C_hat)); C_hat includes tau rho I.
LambdaMu compute_lambda_mu(const SymMatrix& c_hat_taurho, const Matrix& A, const SymMatrix& c_prev,
                           const SymMatrix& sigma_plus, double r, double tau, double rho);

/// max(1, ratio(C, R_ref)).
double compute_nu(const SymMatrix& c, const SymMatrix& r_ref);

struct FilterSetup {
  CoefficientStream stream;
  EnkfConfig cfg;
  std::uint64_t T = 100;
  Vector init_mean;               // truth and filter start from N(init_mean, init_var I)
  double init_var = 1.0;
  std::optional<SymMatrix> reference;  // fixed reference covariance; else augmented Riccati iterate
  bool compute_diagnostics = true;
  bool keep_trajectories = false;

  explicit FilterSetup(CoefficientStream s) : stream(std::move(s)) {}
};

struct FilterRun {
  std::uint64_t seed = 0;
  std::vector<FilterDiagnostics> diagnostics;  // steps 1..T
  std::vector<Vector> posterior_means;         // steps 0..T (when keep_trajectories)
  std::vector<Matrix> spreads;                 // steps 0..T (when keep_trajectories)
  std::vector<Vector> truth;                   // steps 0..T (when keep_trajectories)
  std::vector<double> l2_errors;               // steps 1..T, always filled
};

/// Truth draws use the seed's truth/observation substreams; the ensemble uses
/// the member/initial substreams. `shift` is added to the filter's initial mean only.
FilterRun run_filter(const FilterSetup& setup, std::uint64_t seed, const Vector* shift = nullptr);

struct SeriesStats {
  std::vector<FilterDiagnostics> mean;
  std::vector<FilterDiagnostics> q10;
  std::vector<FilterDiagnostics> q50;
  std::vector<FilterDiagnostics> q90;
};

struct FilterExperimentResult {
  std::vector<FilterRun> runs;  // ordered as the seeds
  SeriesStats stats;
};

FilterExperimentResult run_filter_experiment(const FilterSetup& setup, const std::vector<std::uint64_t>& seeds);

SeriesStats aggregate_series(const std::vector<FilterRun>& runs);

struct ConcentrationOptions {
  Index d = 200;
  Index p = 5;
  std::vector<Index> K_list{10, 20, 40, 80};
  double rho = 0.1;
  double delta = 0.1;
  int trials = 2000;
  std::uint64_t seed = 1;
  std::vector<double> condition_numbers{10.0, 1000.0};
  Index tail_K = 20;
  int tail_points = 40;
  int tail_min_count = 20;
};

struct ConcentrationTrial {
  Index d = 0, p = 0, K = 0;
  double condition_number = 0;
  double rho = 0, delta = 0;
  double lambda = 0, mu = 0;
  bool in_rare_event = false;
};

struct ConcentrationRow {
  Index K = 0;
  double condition_number = 0;
  double rare_event_freq = 0;
  double lambda_median = 0;
  double mu_median = 0;
};

struct TailPoint {
  double t = 0;
  double prob = 0;
  int count = 0;
};

struct LinearFit {
  double slope = 0;
  double intercept = 0;
  double r2 = 0;
  int points = 0;
};

struct ConcentrationResult {
  std::vector<ConcentrationRow> rows;
  std::vector<ConcentrationTrial> trials;
  std::vector<TailPoint> tail;  // P(lambda > 8 + t) at tail_K, first condition number
  LinearFit tail_fit;           // log P against t over the retained tail points
  double monotone_fraction = 0;  // adjacent K pairs with non-increasing frequency
};

/// One trial: the realized (lambda, mu) for sample size K with fixed a_k and
/// Sigma of rank p. The matrices live in a 2p-dimensional subspace, so the
/// computation runs there exactly.
ConcentrationResult run_concentration_experiment(const ConcentrationOptions& opts);

/// Ratios for Z = (a + dxi)(a + dxi)^T/(K-1), D = a a^T/(K-1) + Sigma, where dxi are
/// the centered columns of xi:  lambda = ratio(Z, D + rho I), mu = ratio(D + rho I, Z + rho I).
/// Inputs are coordinates in an orthonormal basis; `complement` says the basis spans a
/// proper subspace, on whose complement lambda sees 0 and mu sees 1.
LambdaMu concentration_ratios(const Matrix& a, const Matrix& xi, const SymMatrix& sigma, double rho,
                              bool complement);

struct StabilityFit {
  double shift = 0;
  std::uint64_t seed = 0;
  LinearFit fit;
  bool spreads_identical = true;
  std::vector<double> gap;  // |mean - mean'| per step 0..T
};

struct StabilityResult {
  std::vector<StabilityFit> fits;
  double negative_slope_fraction = 0;
  bool all_spreads_identical = true;
};

/// Paired runs sharing all random streams, one with the initial mean shifted
/// by `magnitude` along the first coordinate.
StabilityResult run_stability_experiment(const FilterSetup& setup, const std::vector<double>& shift_magnitudes,
                                         const std::vector<std::uint64_t>& seeds);

struct AccuracyRow {
  double eps = 0;
  double mean_error = 0;  // mean over seeds of the last-half time-averaged |e_n|
  std::vector<double> per_seed;
};

/// Sigma -> eps^2 Sigma, observation noise -> eps^2 I (as H/eps with y/eps), rho -> eps^2 rho.
std::vector<AccuracyRow> run_accuracy_experiment(const FilterSetup& setup, const std::vector<double>& eps_list,
                                                 const std::vector<std::uint64_t>& seeds);

/// Stream with Sigma scaled by eps^2 and H scaled by 1/eps.
CoefficientStream scale_noise(const CoefficientStream& stream, double eps);

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

/// %.17g formatting via to_chars (shortest round-trip is not used; fixed 17 digits).
std::string format_double(double v);

/// Header "step,maha_sq_per_d,l2_error,nu,lambda,mu,chi,cov_fidelity"; '#' comment lines first.
void write_csv(const std::vector<FilterDiagnostics>& series, const std::string& path,
               const std::vector<std::string>& comments = {});

}  // namespace enkf

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "enkf/diagnostics.hpp"
#include "enkf/effective_dim.hpp"
#include "enkf/errors.hpp"
#include "enkf/harness.hpp"
#include "enkf/io.hpp"
#include "test_util.hpp"

using namespace enkf;
using namespace enkf::testing;

namespace fs = std::filesystem;

namespace {

// largest generalized eigenvalue of (b, a) for a > 0
double ratio_oracle(const Matrix& b, const Matrix& a) {
  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> es(b, a);
  return es.eigenvalues().maxCoeff();
}

FilterSetup reduced_setup(std::uint64_t T = 200) {
  ExperimentConfig c = load_config(ENKF_SOURCE_DIR "/configs/reduced_observed.json");
  c.T = T;
  return make_filter_setup(c);
}

// two-sample Kolmogorov-Smirnov, asymptotic p-value
double ks_pvalue(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double dmax = 0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    dmax = std::max(dmax, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  const double ne = static_cast<double>(a.size() * b.size()) / static_cast<double>(a.size() + b.size());
  const double lam = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * dmax;
  double q = 0;
  for (int k = 1; k <= 100; ++k) q += 2 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lam * lam);
  return std::clamp(q, 0.0, 1.0);
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "enkf_lab_tests";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("lambda and mu at the mean realization") {
  auto rng = make_rng(401);
  const Index d = 5;
  const Matrix a = random_matrix(rng, d, d) * 0.4;
  const SymMatrix c_prev = random_pd(rng, d);
  const SymMatrix sp = random_psd(rng, d, 2);
  const double r = 1.1, tau = 0.8, rho = 0.05;
  const SymMatrix c_hat = (c_prev.congruence(a) * r + sp * r).plus_identity(r * tau * rho);
  const LambdaMu lm = compute_lambda_mu(c_hat, a, c_prev, sp, r, tau, rho);
  CHECK(lm.lambda == doctest::Approx(1.0).epsilon(1e-10));
  // mu compares against the smaller tau rho shift, so the floor is active
  CHECK(lm.mu == 1.0);
}

TEST_CASE("lambda and mu scalar floors") {
  // r = 4, tau rho = 1, A = 0: lambda base 4, mu base 1
  const Matrix a = Matrix::Zero(1, 1);
  const SymMatrix zero = SymMatrix::zero(1);
  const LambdaMu lm = compute_lambda_mu(SymMatrix::identity(1, 2.0), a, zero, zero, 4.0, 1.0, 1.0);
  CHECK(lm.lambda == 1.0);
  CHECK(lm.mu == 1.0);
  const LambdaMu big = compute_lambda_mu(SymMatrix::identity(1, 12.0), a, zero, zero, 4.0, 1.0, 1.0);
  CHECK(big.lambda == doctest::Approx(3.0));
  const LambdaMu small = compute_lambda_mu(SymMatrix::identity(1, 0.25), a, zero, zero, 4.0, 1.0, 1.0);
  CHECK(small.mu == doctest::Approx(4.0));
}

TEST_CASE("lambda and mu against a dense oracle") {
  auto rng = make_rng(402);
  const Index d = 6;
  for (int t = 0; t < 20; ++t) {
    const Matrix a = random_matrix(rng, d, d) * 0.5;
    const SymMatrix c_prev = random_pd(rng, d);
    const SymMatrix sp = random_psd(rng, d, 3);
    const double r = 1.2, tau = 0.9, rho = 0.1;
    const SymMatrix c_hat = random_psd(rng, d, 4).plus_identity(tau * rho);
    const LambdaMu lm = compute_lambda_mu(c_hat, a, c_prev, sp, r, tau, rho);
    const Matrix m = r * a * c_prev.dense() * a.transpose() + r * sp.dense();
    const Matrix ml = m + r * tau * rho * Matrix::Identity(d, d);
    const Matrix mm = m + tau * rho * Matrix::Identity(d, d);
    CHECK(lm.lambda == doctest::Approx(std::max(1.0, ratio_oracle(c_hat.dense(), ml))).epsilon(1e-8));
    CHECK(lm.mu == doctest::Approx(std::max(1.0, ratio_oracle(mm, c_hat.dense()))).epsilon(1e-8));
  }
}

TEST_CASE("nu examples") {
  auto rng = make_rng(403);
  const SymMatrix r = random_pd(rng, 8);
  CHECK(compute_nu(r, r) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(compute_nu(r * 3.0, r) == doctest::Approx(3.0).epsilon(1e-10));
  CHECK(compute_nu(r * 0.5, r) == 1.0);
  const SymMatrix c = random_pd(rng, 8);
  CHECK(compute_nu(c, r) == doctest::Approx(std::max(1.0, ratio_oracle(c.dense(), r.dense()))).epsilon(1e-8));
}

TEST_CASE("noiseless stable system tracks exactly") {
  const Index d = 4;
  StepCoefficients c{to_sparse(0.5 * Matrix::Identity(d, d)), Vector::Zero(d), to_sparse(Matrix::Zero(d, d)),
                     to_sparse(Matrix(0, d))};
  FilterSetup s(CoefficientStream::constant(c));
  s.cfg.K = 10;
  s.cfg.p = 2;
  s.cfg.r = 1.1;
  s.cfg.tau = 1.0;
  s.cfg.rho = 1e-3;
  s.T = 40;
  s.init_var = 1e-12;
  const FilterRun run = run_filter(s, 3);
  CHECK(run.l2_errors.front() < 1e-5);
  CHECK(run.l2_errors.back() < 1e-15);
  CHECK(run.diagnostics.back().maha_sq_per_d < 1e-20);
}

TEST_CASE("reduced model fidelity and forgetting") {
  FilterSetup s = reduced_setup(200);
  REQUIRE(s.cfg.p == 21);
  std::vector<double> plain, shifted;
  Vector shift = Vector::Zero(s.stream.dim());
  shift(0) = 50.0;
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const FilterRun a = run_filter(s, seed);
    const FilterRun b = run_filter(s, 100 + seed, &shift);
    double ma = 0, mb = 0, nu = 0;
    for (std::size_t n = 150; n < 200; ++n) {
      ma += a.diagnostics[n].maha_sq_per_d / 50;
      mb += b.diagnostics[n].maha_sq_per_d / 50;
      nu += a.diagnostics[n].nu / 50;
    }
    plain.push_back(ma);
    shifted.push_back(mb);
    CHECK(nu <= 2.0);
    // every mode passes at J = 10, so p = d and chi stays at 1
    for (const auto& fd : a.diagnostics) CHECK(fd.chi <= fd.nu);
  }
  CHECK(ks_pvalue(plain, shifted) > 0.01);
}

TEST_CASE("concentration with zero mean part") {
  // a = 0, Sigma of rank p in its own basis
  auto rng = make_rng(404);
  const Index p = 2, K = 10000;
  const double rho = 0.1, delta = 0.1;
  int rare = 0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    const LambdaMu lm =
        concentration_ratios(Matrix::Zero(p, K), rng.normal_matrix(p, K), SymMatrix::identity(p), rho, true);
    rare += lm.lambda > 1 + 5 * delta || lm.mu > 1 + 5 * delta;
    CHECK(lm.lambda <= 1.1);
  }
  CHECK(static_cast<double>(rare) / trials < 0.01);
}

TEST_CASE("concentration experiment smoke") {
  ConcentrationOptions o;
  o.d = 30;
  o.p = 3;
  o.K_list = {10, 40};
  o.trials = 200;
  o.tail_K = 10;
  o.tail_points = 10;
  o.tail_min_count = 5;
  const ConcentrationResult r = run_concentration_experiment(o);
  CHECK(r.rows.size() == 4);
  CHECK(r.trials.size() == 4 * 200);
  // realized ratios, not floored at one
  for (const auto& t : r.trials) {
    CHECK(t.lambda > 0.0);
    CHECK(t.mu > 0.0);
  }
  CHECK_THROWS_AS(
      [] {
        ConcentrationOptions bad;
        bad.p = 0;
        run_concentration_experiment(bad);
      }(),
      InvalidParams);
}

TEST_CASE("stability with zero shift has no gap") {
  const FilterSetup s = reduced_setup(30);
  const StabilityResult r = run_stability_experiment(s, {0.0}, {1, 2});
  REQUIRE(r.fits.size() == 2);
  CHECK(r.all_spreads_identical);
  for (const auto& f : r.fits)
    for (double g : f.gap) CHECK(g == 0.0);
}

TEST_CASE("small noise gives small error") {
  const FilterSetup s = reduced_setup(60);
  const auto rows = run_accuracy_experiment(s, {1e-8}, {1, 2});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].mean_error < 1e-6);
}

TEST_CASE("analysis step deflates on average") {
  // E K(C_hat) <= K(E C_hat) for sample covariances of a fixed Gaussian
  auto rng = make_rng(405);
  const Index d = 3, K = 5;
  const SymMatrix c = random_pd(rng, d, 0.2);
  const SymMatrix sq = psd_sqrt(c);
  Matrix h = Matrix::Zero(1, d);
  h(0, 0) = 1.0;
  const int trials = 20000;
  Matrix sum = Matrix::Zero(d, d), sum_sq = Matrix::Zero(d, d);
  for (int t = 0; t < trials; ++t) {
    Matrix x = sq.dense() * rng.normal_matrix(d, K);
    x.colwise() -= x.rowwise().mean();
    const Matrix k = kalman_update_operator(SymMatrix(x * x.transpose() / (K - 1)), h).dense();
    sum += k;
    sum_sq += k.cwiseProduct(k);
  }
  const Matrix mean = sum / trials;
  const Matrix se = ((sum_sq / trials - mean.cwiseProduct(mean)) / trials).cwiseSqrt();
  const double gap = max_eigenvalue(SymMatrix(mean) - kalman_update_operator(c, h));
  CHECK(gap <= 3 * se.norm());
}

TEST_CASE("realized lambda and mu sandwich the forecast") {
  const FilterSetup s = reduced_setup(40);
  const auto& cfg = s.cfg;
  const Index d = s.stream.dim();
  Ensemble ens = initial_ensemble(Vector::Zero(d), GaussianFactor::from_diagonal(Vector::Ones(d)), cfg.K, 9);
  const TruthTrajectory tr = simulate_truth(s.stream, Vector::Zero(d), 40, 9);
  for (std::uint64_t n = 0; n < 40; ++n) {
    const StepCoefficients c = s.stream.at(n);
    const GaussianFactor plus = instability_factor(c, cfg.r, cfg.tau, cfg.rho);
    const SymMatrix c_prev = ens.covariance();
    const Forecast fc = enkf_forecast(ens, c, plus, cfg, 9, n);
    const SymMatrix c_hat =
        SymMatrix(fc.spread * fc.spread.transpose() / static_cast<double>(cfg.K - 1)).plus_identity(cfg.tau * cfg.rho);
    const Matrix a(c.A);
    const LambdaMu lm = compute_lambda_mu(c_hat, a, c_prev, plus.covariance(), cfg.r, cfg.tau, cfg.rho);
    const SymMatrix m = c_prev.congruence(a) * cfg.r + plus.covariance() * cfg.r;
    const double scale = 1e-9 * (1 + c_hat.norm());
    CHECK(loewner_leq(c_hat, m.plus_identity(cfg.r * cfg.tau * cfg.rho) * lm.lambda, scale));
    CHECK(loewner_leq(m.plus_identity(cfg.tau * cfg.rho) * (1.0 / lm.mu), c_hat, scale));
    ens = enkf_assimilate(fc, c, tr.observations[n], cfg).first;
  }
}

TEST_CASE("csv output") {
  const std::string header = "step,maha_sq_per_d,l2_error,nu,lambda,mu,chi,cov_fidelity";
  const fs::path empty = scratch("empty.csv");
  write_csv({}, empty.string());
  auto rows = read_csv(empty.string());
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].size() == 8);

  FilterDiagnostics fd;
  fd.step = 7;
  fd.maha_sq_per_d = 0.1;
  fd.l2_error = 1.0 / 3.0;
  fd.nu = 1.25;
  fd.lambda = 2.0000000000000004;
  fd.mu = 1e-300;
  fd.chi = 1;
  fd.cov_fidelity = 123456.789;
  const fs::path one = scratch("one.csv");
  write_csv({fd}, one.string());
  rows = read_csv(one.string());
  REQUIRE(rows.size() == 2);
  CHECK(rows[1][0] == "7");
  CHECK(std::strtod(rows[1][1].c_str(), nullptr) == fd.maha_sq_per_d);
  CHECK(std::strtod(rows[1][2].c_str(), nullptr) == fd.l2_error);
  CHECK(std::strtod(rows[1][4].c_str(), nullptr) == fd.lambda);
  CHECK(std::strtod(rows[1][5].c_str(), nullptr) == fd.mu);
  CHECK(std::strtod(rows[1][7].c_str(), nullptr) == fd.cov_fidelity);
  std::ifstream in(one.string());
  std::string first;
  std::getline(in, first);
  CHECK(first == header);

  std::vector<FilterDiagnostics> many(10000);
  for (std::size_t i = 0; i < many.size(); ++i) {
    many[i].step = i + 1;
    many[i].l2_error = std::sqrt(static_cast<double>(i));
  }
  const fs::path big = scratch("big.csv");
  write_csv(many, big.string());
  rows = read_csv(big.string());
  REQUIRE(rows.size() == 10001);
  bool all8 = true;
  for (const auto& r : rows) all8 = all8 && r.size() == 8;
  CHECK(all8);

  CHECK(format_double(0.1) == "0.10000000000000001");
  CHECK_THROWS(write_csv({}, "/nonexistent-dir/x.csv"));
}

TEST_CASE("line fit") {
  const LinearFit f = fit_line({0, 1, 2, 3}, {1, 3, 5, 7});
  CHECK(f.slope == doctest::Approx(2.0));
  CHECK(f.intercept == doctest::Approx(1.0));
  CHECK(f.r2 == doctest::Approx(1.0));
  CHECK(f.points == 4);
}

TEST_CASE("filter runs are reproducible") {
  const FilterSetup s = reduced_setup(25);
  const auto a = run_filter_experiment(s, {4, 5});
  const auto b = run_filter_experiment(s, {4, 5});
  REQUIRE(a.runs.size() == 2);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t n = 0; n < 25; ++n) {
      CHECK(a.runs[i].diagnostics[n].maha_sq_per_d == b.runs[i].diagnostics[n].maha_sq_per_d);
      CHECK(a.runs[i].diagnostics[n].nu == b.runs[i].diagnostics[n].nu);
    }
  CHECK(a.stats.mean.size() == 25);
  CHECK(a.runs[0].l2_errors != a.runs[1].l2_errors);
}

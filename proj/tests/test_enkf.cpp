#include <doctest.h>

#include <cmath>

#include <Eigen/Dense>

#include "enkf/effective_dim.hpp"
#include "enkf/enkf.hpp"
#include "enkf/errors.hpp"
#include "enkf/kalman_ref.hpp"
#include "properties.hpp"
#include "test_util.hpp"

using namespace enkf;
using namespace enkf::testing;

namespace {

StepCoefficients coeffs(const Matrix& a, const Matrix& sigma, const Matrix& h) {
  return StepCoefficients{to_sparse(a), Vector::Zero(a.rows()), to_sparse(sigma), to_sparse(h)};
}

Ensemble random_ensemble(CounterRng& rng, Index d, Index K, double scale = 1.0) {
  Ensemble e;
  e.mean = rng.normal_vector(d);
  e.spread = scale * rng.normal_matrix(d, K);
  e.spread.colwise() -= e.spread.rowwise().mean();
  return e;
}

double max_col_sum(const Matrix& s) { return s.rowwise().sum().cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("noiseless forecast without inflation") {
  auto rng = make_rng(51);
  const Ensemble e = random_ensemble(rng, 5, 7);
  StepCoefficients c = coeffs(rng.normal_matrix(5, 5), Matrix::Zero(5, 5), Matrix(0, 5));
  c.B = rng.normal_vector(5);
  EnkfConfig cfg;
  cfg.K = 7;
  cfg.r = 1.0;
  const Forecast f = enkf_forecast(e, c, GaussianFactor::from_diagonal(Vector::Zero(5)), cfg, 1, 1);
  CHECK(rel_diff(f.spread, Matrix(c.A) * e.spread) <= 1e-15);
  CHECK(rel_diff(f.mean, c.A * e.mean + c.B) <= 1e-15);
}

TEST_CASE("forecast sample covariance under large K") {
  const Index d = 4, K = 10000;
  Ensemble e{Vector::Zero(d), Matrix::Zero(d, K)};
  const StepCoefficients c = coeffs(Matrix::Identity(d, d), Matrix::Zero(d, d), Matrix(0, d));
  EnkfConfig cfg;
  cfg.K = K;
  cfg.r = 1.1;
  const Forecast f = enkf_forecast(e, c, GaussianFactor::from_diagonal(Vector::Ones(d)), cfg, 3, 1);
  const Matrix chat = f.spread * f.spread.transpose() / static_cast<double>(K - 1);
  CHECK(SymMatrix(chat / cfg.r - Matrix::Identity(d, d)).norm() <= 0.1);
  CHECK(max_col_sum(f.spread) <= 1e-9);
}

TEST_CASE("forecast covariance is unbiased") {
  auto rng = make_rng(52);
  const Index d = 6, K = 8;
  const int trials = 10000;
  const Ensemble e = random_ensemble(rng, d, K);
  const Matrix a = rng.normal_matrix(d, d) / 2.0;
  const SymMatrix sp = random_psd(rng, d, 3);
  const StepCoefficients c = coeffs(a, Matrix::Zero(d, d), Matrix(0, d));
  const GaussianFactor g = GaussianFactor::from_covariance(to_sparse(sp.dense()));
  EnkfConfig cfg;
  cfg.K = K;
  cfg.r = 1.1;
  Matrix sum = Matrix::Zero(d, d), sum_sq = Matrix::Zero(d, d);
  for (int t = 0; t < trials; ++t) {
    const Forecast f = enkf_forecast(e, c, g, cfg, 1000 + t, 1);
    const Matrix chat = f.spread * f.spread.transpose() / static_cast<double>(K - 1);
    sum += chat;
    sum_sq += chat.cwiseProduct(chat);
  }
  const Matrix mean = sum / trials;
  const Matrix se = ((sum_sq / trials - mean.cwiseProduct(mean)) / trials).cwiseSqrt();
  const Matrix expect = cfg.r * (a * e.covariance().dense() * a.transpose() + sp.dense());
  const Matrix z = (mean - expect).cwiseQuotient(se.cwiseMax(1e-300));
  CHECK(z.cwiseAbs().maxCoeff() <= 4.0);  // 36 entries; per-entry 3 SE would flag ~1 by chance
  CHECK((mean - expect).norm() <= 3.0 * se.norm());
}

TEST_CASE("full-rank projection keeps K(C_hat) - rho I") {
  auto rng = make_rng(53);
  const Index d = 4, K = 12;
  EnkfConfig cfg;
  cfg.K = K;
  cfg.p = d;
  cfg.rho = 0.01;
  cfg.tau = 1.0;
  Forecast f;
  f.mean = rng.normal_vector(d);
  f.spread = 3.0 * rng.normal_matrix(d, K);
  f.spread.colwise() -= f.spread.rowwise().mean();
  const StepCoefficients c = coeffs(Matrix::Identity(d, d), Matrix::Zero(d, d), 0.3 * Matrix::Identity(d, d));
  const auto [post, rec] = enkf_assimilate(f, c, rng.normal_vector(d), cfg);
  const SymMatrix chat = SymMatrix(f.spread * f.spread.transpose() / (K - 1.0)).plus_identity(cfg.tau * cfg.rho);
  const SymMatrix target = kalman_update_operator(chat, Matrix(c.H)).plus_identity(-cfg.rho);
  REQUIRE(min_eigenvalue(target) > 0);
  CHECK(rel_diff(post.covariance().dense(), target.dense()) <= 1e-10);
  CHECK(rec.chi == 1.0);
  CHECK(rec.projection_discard == 0.0);
}

TEST_CASE("no observation leaves the mean alone") {
  auto rng = make_rng(54);
  const Index d = 5, K = 9;
  EnkfConfig cfg;
  cfg.K = K;
  cfg.p = 3;
  Forecast f{rng.normal_vector(d), rng.normal_matrix(d, K)};
  f.spread.colwise() -= f.spread.rowwise().mean();
  const StepCoefficients c = coeffs(Matrix::Identity(d, d), Matrix::Zero(d, d), Matrix(0, d));
  const auto [post, rec] = enkf_assimilate(f, c, Vector(0), cfg);
  CHECK(post.mean == f.mean);
  EakfTally t;
  check_eakf_step(t, rec, c, cfg);
  CHECK(t.exactness.ok());
  CHECK(t.upper.ok());
}

TEST_CASE("assimilation matches the dense construction") {
  auto rng = make_rng(55);
  const Index d = 8, q = 3, K = 6;
  EnkfConfig cfg;
  cfg.K = K;
  cfg.p = 4;
  cfg.rho = 0.05;
  cfg.tau = 0.8;
  Forecast f{rng.normal_vector(d), rng.normal_matrix(d, K)};
  f.spread.colwise() -= f.spread.rowwise().mean();
  const Matrix h = rng.normal_matrix(q, d);
  const StepCoefficients c = coeffs(Matrix::Identity(d, d), Matrix::Zero(d, d), h);
  const Vector y = rng.normal_vector(q);
  const auto [post, rec] = enkf_assimilate(f, c, y, cfg);
  EakfTally t;
  check_eakf_step(t, rec, c, cfg);
  CHECK(t.exactness.worst <= 1e-8);
  CHECK(t.upper.ok());
  // mean through the dense gain
  const SymMatrix chat = SymMatrix(f.spread * f.spread.transpose() / (K - 1.0)).plus_identity(cfg.tau * cfg.rho);
  CHECK(rel_diff(post.mean, f.mean + kalman_gain(chat, h) * (y - h * f.mean)) <= 1e-10);
  CHECK(max_col_sum(post.spread) <= 1e-10);
  // rank never exceeds p and equals the count above rho when that fits
  const Index above = (rec.top_eigenvalues.array() > cfg.rho).count();
  const Eigen::FullPivLU<Matrix> lu(post.covariance().dense());
  CHECK(lu.rank() <= cfg.p);
  CHECK(lu.rank() == std::min<Index>(above, cfg.p));
}

TEST_CASE("iterative eigen path agrees with the dense one") {
  auto rng = make_rng(56);
  const Index d = 40, K = 10;
  EnkfConfig cfg;
  cfg.K = K;
  cfg.p = 5;
  cfg.rho = 0.02;
  cfg.tau = 0.5;
  Forecast f{rng.normal_vector(d), rng.normal_matrix(d, K)};
  f.spread.colwise() -= f.spread.rowwise().mean();
  const StepCoefficients c = coeffs(Matrix::Identity(d, d), Matrix::Zero(d, d), 0.5 * Matrix::Identity(d, d));
  const Vector y = rng.normal_vector(d);
  const auto dense = enkf_assimilate(f, c, y, cfg);
  EnkfConfig it = cfg;
  it.dense_eig_max_dim = 0;
  const auto iter = enkf_assimilate(f, c, y, it);
  CHECK(rel_diff(iter.first.covariance().dense(), dense.first.covariance().dense()) <= 1e-7);
  CHECK(std::abs(iter.second.projection_discard - dense.second.projection_discard) <= 1e-8);
}

TEST_CASE("rank-deficient spread still spans the retained directions") {
  // S_hat = 0 with tau > 1: K(tau rho I) = tau rho I has every eigenvalue above rho
  const Index d = 3, K = 5;
  EnkfConfig cfg;
  cfg.K = K;
  cfg.p = 2;
  cfg.rho = 0.1;
  cfg.tau = 2.0;
  Forecast f{Vector::Zero(d), Matrix::Zero(d, K)};
  const StepCoefficients c = coeffs(Matrix::Identity(d, d), Matrix::Zero(d, d), Matrix(0, d));
  const auto [post, rec] = enkf_assimilate(f, c, Vector(0), cfg);
  CHECK(rec.rank_deficit);
  CHECK(rec.effective_rank == 0);
  EakfTally t;
  check_eakf_step(t, rec, c, cfg);
  CHECK(t.exactness.ok());
  CHECK(max_col_sum(post.spread) <= 1e-12);
  CHECK(post.covariance().dense().trace() == doctest::Approx(2 * (cfg.tau - 1) * cfg.rho));
}

TEST_CASE("more retained directions than K - 1 is an error") {
  const Index d = 8, K = 3;
  EnkfConfig cfg;
  cfg.K = K;
  cfg.p = 4;
  cfg.rho = 0.1;
  cfg.tau = 2.0;
  Forecast f{Vector::Zero(d), Matrix::Zero(d, K)};
  const StepCoefficients c = coeffs(Matrix::Identity(d, d), Matrix::Zero(d, d), Matrix(0, d));
  CHECK_THROWS_AS(enkf_assimilate(f, c, Vector(0), cfg), InvalidParams);
}

TEST_CASE("gain identity") {
  auto rng = make_rng(57);
  const Index d = 7, q = 4, K = 5;
  Matrix s = rng.normal_matrix(d, K);
  s.colwise() -= s.rowwise().mean();
  const Matrix h = rng.normal_matrix(q, d);
  const SymMatrix chat = SymMatrix(s * s.transpose() / (K - 1.0)).plus_identity(0.03);
  const Matrix g = kalman_gain(chat, h);
  const Matrix lhs = Matrix::Identity(d, d) - g * h;
  const Matrix rhs = (Matrix::Identity(d, d) + chat.dense() * h.transpose() * h).inverse();
  CHECK(rel_diff(lhs, rhs) <= 1e-8);
}

TEST_CASE("quiet system keeps its mean") {
  auto rng = make_rng(58);
  const Index d = 4, K = 6;
  Ensemble e = random_ensemble(rng, d, K, 0.0);
  const Vector start = e.mean;
  const StepCoefficients c = coeffs(Matrix::Identity(d, d), Matrix::Zero(d, d), Matrix(0, d));
  EnkfConfig cfg;
  cfg.K = K;
  cfg.p = 2;
  cfg.tau = 1.2;  // tau > r leaves Sigma+ = 0 for A = I
  for (std::uint64_t n = 1; n <= 20; ++n) e = enkf_step(e, c, Vector(0), cfg, 7, n).first;
  CHECK(e.mean == start);
}

TEST_CASE("ensemble mean shift leaves spreads untouched") {
  auto rng = make_rng(59);
  const Index d = 6, K = 8;
  TurbulenceParams p = TurbulenceParams::kolmogorov(2);
  p.sigma_obs = 10.0;
  p.J = 2;
  const auto stream = build_turbulence(p);
  REQUIRE(stream.dim() == 5);
  (void)d;
  EnkfConfig cfg;
  cfg.K = K;
  cfg.p = 5;
  cfg.r = p.r;
  cfg.tau = p.tau;
  cfg.rho = p.rho;
  const GaussianFactor init = GaussianFactor::from_diagonal(Vector::Ones(5));
  Ensemble a = initial_ensemble(Vector::Zero(5), init, K, 11);
  Vector delta = Vector::Zero(5);
  delta(0) = 10.0;
  Ensemble b = initial_ensemble(delta, init, K, 11);
  CHECK(a.spread == b.spread);
  Vector expect = delta;
  for (std::uint64_t n = 1; n <= 30; ++n) {
    const StepCoefficients c = stream.at(n - 1);
    const Vector y = rng.normal_vector(5);
    auto [na, ra] = enkf_step(a, c, y, cfg, 11, n);
    auto [nb, rb] = enkf_step(b, c, y, cfg, 11, n);
    CHECK(na.spread == nb.spread);
    // the mean gap evolves by (I - G H) A with G from the shared forecast spread
    const SymMatrix chat =
        SymMatrix(ra.forecast_spread * ra.forecast_spread.transpose() / (K - 1.0)).plus_identity(cfg.tau * cfg.rho);
    const Matrix h = Matrix(c.H);
    expect = (Matrix::Identity(5, 5) - kalman_gain(chat, h) * h) * (c.A * expect);
    CHECK(rel_diff(nb.mean - na.mean, expect) <= 1e-9);
    a = na;
    b = nb;
  }
}

TEST_CASE("reduced turbulence run stays bounded") {
  TurbulenceParams p = TurbulenceParams::kolmogorov(10);
  p.sigma_obs = 10.0;
  const auto stream = build_turbulence(p);
  const SymMatrix ref = stationary_reference_covariance(p);
  EnkfConfig cfg;
  cfg.K = 40;
  cfg.p = verify_dim(p).p_state_dims;
  cfg.r = p.r;
  cfg.tau = p.tau;
  cfg.rho = p.rho;
  const TruthTrajectory truth = simulate_truth(stream, Vector::Zero(stream.dim()), 500, 21);
  Ensemble e = initial_ensemble(Vector::Zero(stream.dim()), GaussianFactor::from_diagonal(Vector::Ones(stream.dim())),
                                cfg.K, 21);
  const GaussianFactor sp = instability_factor(stream.at(0), cfg.r, cfg.tau, cfg.rho);
  double worst = 0;
  bool zero_mean = true;
  for (std::uint64_t n = 1; n <= 500; ++n) {
    e = enkf_step(e, stream.at(n - 1), truth.observations[n - 1], cfg, 21, n, &sp).first;
    worst = std::max(worst, e.covariance().norm());
    zero_mean = zero_mean && max_col_sum(e.spread) <= 1e-9;
  }
  CHECK(worst <= 10 * ref.norm());
  CHECK(zero_mean);
}

TEST_CASE("eakf exactness over random runs") {
  EakfTally t;
  for (int run = 0; run < 20; ++run) {
    auto rng = make_rng(60, run);
    const Index d = random_dim(rng, 3, 12), q = random_dim(rng, 1, d);
    EnkfConfig cfg;
    cfg.K = random_dim(rng, d / 2 + 3, 16);
    cfg.p = random_dim(rng, 1, std::min(d, cfg.K - 1));
    cfg.rho = 0.02 + 0.1 * rng.uniform();
    cfg.tau = 0.3 + rng.uniform();
    const Matrix a = rng.normal_matrix(d, d) / std::sqrt(static_cast<double>(d));
    const SymMatrix sig = random_psd(rng, d, random_dim(rng, 1, d)) * 0.1;
    const StepCoefficients c = coeffs(a, sig.dense(), rng.normal_matrix(q, d));
    Ensemble e = random_ensemble(rng, d, cfg.K);
    for (std::uint64_t n = 1; n <= 15; ++n) {
      auto [next, rec] = enkf_step(e, c, rng.normal_vector(q), cfg, 100 + run, n);
      check_eakf_step(t, rec, c, cfg);
      e = next;
    }
  }
  CHECK(t.exactness.ok());
  CHECK(t.upper.ok());
  CHECK(t.lower.ok());
  CHECK(t.lower_chi.ok());
}

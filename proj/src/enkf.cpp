#include "enkf/enkf.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/SVD>

#include "enkf/errors.hpp"
#include "enkf/kalman_ref.hpp"

namespace enkf {

namespace {

void recenter(Matrix& s) {
  const Vector m = s.rowwise().mean();
  s.colwise() -= m;
}

// Orthonormal K x m block whose columns are orthogonal to the all-ones vector.
// Leading columns come from `phi`; the rest are filled deterministically.
Matrix complete_null_ones(const Matrix& phi, Index K, Index m) {
  Matrix basis(K, 1 + phi.cols());
  basis.col(0) = Vector::Constant(K, 1.0 / std::sqrt(static_cast<double>(K)));
  basis.rightCols(phi.cols()) = phi;
  Matrix out(K, m);
  Index filled = std::min(phi.cols(), m);
  out.leftCols(filled) = phi.leftCols(filled);
  for (Index j = 0; j < K && filled < m; ++j) {
    Vector v = Vector::Unit(K, j);
    for (int pass = 0; pass < 2; ++pass) {
      v -= basis.leftCols(1 + phi.cols()) * (basis.leftCols(1 + phi.cols()).transpose() * v);
      if (filled > phi.cols()) {
        const auto extra = out.middleCols(phi.cols(), filled - phi.cols());
        v -= extra * (extra.transpose() * v);
      }
    }
    const double nv = v.norm();
    if (nv < 1e-8) continue;
    out.col(filled++) = v / nv;
  }
  if (filled < m) throw InvalidParams("enkf_assimilate: cannot complete the ensemble transform basis");
  return out;
}

}  // namespace

SymMatrix Ensemble::covariance() const {
  return SymMatrix(spread * spread.transpose() / static_cast<double>(spread.cols() - 1));
}

void Ensemble::validate() const {
  if (spread.rows() != mean.size()) throw DimensionMismatch("Ensemble: spread rows != mean length");
  if (spread.cols() < 2) throw InvalidParams("Ensemble: need K >= 2");
}

void EnkfConfig::validate(Index dim) const {
  if (K < 2) throw InvalidParams("enkf.K must be >= 2");
  if (p < 1 || p > dim) throw InvalidParams("enkf.p must satisfy 1 <= p <= d (d = " + std::to_string(dim) + ")");
  if (!(r > 1)) throw InvalidParams("r must be > 1");
  if (!(rho > 0)) throw InvalidParams("rho must be > 0");
  if (!(tau > 0)) throw InvalidParams("tau must be > 0");
}

Ensemble initial_ensemble(const Vector& mean, const GaussianFactor& cov, Index K, std::uint64_t seed) {
  if (K < 2) throw InvalidParams("initial_ensemble: K must be >= 2");
  if (cov.dim() != mean.size()) throw DimensionMismatch("initial_ensemble: covariance dimension mismatch");
  Matrix z(mean.size(), K);
  for (Index k = 0; k < K; ++k) {
    CounterRng rng(substream_key(seed, StreamTag::kInitialEnsemble, 0, static_cast<std::uint64_t>(k)));
    z.col(k) = cov.sample(rng);
  }
  const Vector zbar = z.rowwise().mean();
  Ensemble e;
  e.mean = mean + zbar;
  e.spread = z.colwise() - zbar;
  return e;
}

Forecast enkf_forecast(const Ensemble& ens, const StepCoefficients& c, const GaussianFactor& sigma_plus,
                       const EnkfConfig& cfg, std::uint64_t seed, std::uint64_t step) {
  ens.validate();
  if (ens.dim() != c.dim()) throw DimensionMismatch("enkf_forecast: ensemble/coefficient dimension mismatch");
  const Index K = ens.size();
  Forecast f;
  Matrix as = c.A * ens.spread;
  Vector xi_mean = Vector::Zero(c.dim());
  if (!sigma_plus.is_zero()) {
    if (sigma_plus.dim() != c.dim()) throw DimensionMismatch("enkf_forecast: Sigma+ dimension mismatch");
    Matrix xi(c.dim(), K);
    for (Index k = 0; k < K; ++k) {
      CounterRng rng(substream_key(seed, StreamTag::kMemberNoise, step, static_cast<std::uint64_t>(k)));
      xi.col(k) = sigma_plus.sample(rng);
    }
    xi_mean = xi.rowwise().mean();
    as += xi.colwise() - xi_mean;
  }
  f.mean = c.A * ens.mean + c.B + xi_mean;
  f.spread = std::sqrt(cfg.r) * as;
  return f;
}

std::pair<Ensemble, StepRecord> enkf_assimilate(const Forecast& f, const StepCoefficients& c, const Vector& y,
                                                const EnkfConfig& cfg) {
  const Index d = f.spread.rows();
  const Index K = f.spread.cols();
  cfg.validate(d);
  if (K != cfg.K) throw DimensionMismatch("enkf_assimilate: spread has " + std::to_string(K) + " members, config says " +
                                          std::to_string(cfg.K));
  if (y.size() != c.obs_dim()) throw DimensionMismatch("enkf_assimilate: observation has wrong length");

  KalmanGainContext ctx;
  ctx.spread = f.spread;
  ctx.additive_level = cfg.tau * cfg.rho;
  ctx.obs = c.H;
  const LowRankKalman lk(std::move(ctx));

  StepRecord rec;
  rec.forecast_spread = f.spread;
  rec.gain_residual = c.obs_dim() > 0 ? Vector(y - c.H * f.mean) : Vector();
  Ensemble post;
  post.mean = c.obs_dim() > 0 ? Vector(f.mean + lk.gain_apply(rec.gain_residual)) : f.mean;

  // Leading p (+1 for the discard) eigenpairs of K(C_hat^{tau rho}).
  const Index want = std::min(cfg.p + 1, d);
  SpectralDecomp top;
  if (d <= cfg.dense_eig_max_dim) {
    top = spectral_decomposition(lk.posterior_dense());
  } else {
    top = top_eigenpairs([&lk](const Matrix& x) { return lk.posterior_apply(x); }, d, want);
  }
  rec.top_eigenvalues = top.eigenvalues.head(cfg.p);
  rec.projection_discard = cfg.p < d ? top.eigenvalues(cfg.p) : 0.0;
  rec.chi = std::max(1.0, rec.projection_discard / cfg.rho);

  const Vector dvals = (rec.top_eigenvalues.array() - cfg.rho).cwiseMax(0.0);
  const Index m = (dvals.array() > 0).count();  // eigenvalues sorted, so positives lead

  Eigen::BDCSVD<Matrix> svd(f.spread, Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  const double smax = sv.size() ? sv(0) : 0.0;
  Index rank = 0;
  while (rank < sv.size() && smax > 0 && sv(rank) > kPinvRelTol * smax) ++rank;
  rec.effective_rank = rank;
  rec.rank_deficit = rank < cfg.p;

  post.spread = Matrix::Zero(d, K);
  if (m > 0) {
    if (m > K - 1)
      throw InvalidParams("enkf_assimilate: " + std::to_string(m) + " retained directions exceed K - 1 = " +
                          std::to_string(K - 1));
    const Matrix phi_r = svd.matrixV().leftCols(std::min(rank, m));
    const Matrix phi = rank >= m ? phi_r : complete_null_ones(phi_r, K, m);
    const Matrix qd = top.eigenvectors.leftCols(m) * dvals.head(m).cwiseSqrt().asDiagonal();
    post.spread = std::sqrt(static_cast<double>(K - 1)) * qd * phi.transpose();
    recenter(post.spread);
  }
  rec.posterior = post;
  return {std::move(post), std::move(rec)};
}

std::pair<Ensemble, StepRecord> enkf_step(const Ensemble& ens, const StepCoefficients& c, const Vector& y,
                                          const EnkfConfig& cfg, std::uint64_t seed, std::uint64_t step,
                                          const GaussianFactor* sigma_plus) {
  if (sigma_plus != nullptr) return enkf_assimilate(enkf_forecast(ens, c, *sigma_plus, cfg, seed, step), c, y, cfg);
  const GaussianFactor sp = instability_factor(c, cfg.r, cfg.tau, cfg.rho);
  return enkf_assimilate(enkf_forecast(ens, c, sp, cfg, seed, step), c, y, cfg);
}

}  // namespace enkf

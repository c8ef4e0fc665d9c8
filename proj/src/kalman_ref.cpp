#include "enkf/kalman_ref.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "enkf/errors.hpp"

namespace enkf {

namespace {

bool sparse_is_diagonal(const SparseMatrix& m, double tol) {
  for (Index k = 0; k < m.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(m, k); it; ++it)
      if (it.row() != it.col() && std::abs(it.value()) > tol) return false;
  return true;
}

void check_filter_params(double r, double tau, double rho) {
  if (!(r > 0)) throw InvalidParams("r must be > 0");
  if (!(tau > 0)) throw InvalidParams("tau must be > 0");
  if (!(rho > 0)) throw InvalidParams("rho must be > 0");
}

// Diagonal of rho A A^T + Sigma - (rho tau / r) I when that matrix is diagonal.
std::optional<Vector> diagonal_instability(const StepCoefficients& c, double r, double tau, double rho) {
  if (!sparse_is_diagonal(c.Sigma, 0.0)) return std::nullopt;
  const SparseMatrix aat = c.A * SparseMatrix(c.A.transpose());
  const double scale = aat.size() ? Matrix(aat).cwiseAbs().maxCoeff() : 0.0;
  if (!sparse_is_diagonal(aat, 1e-15 * scale)) return std::nullopt;
  Vector v(c.dim());
  for (Index i = 0; i < c.dim(); ++i) v(i) = rho * aat.coeff(i, i) + c.Sigma.coeff(i, i) - rho * tau / r;
  return v;
}

}  // namespace

KalmanState kalman_forecast(const KalmanState& s, const StepCoefficients& c) {
  if (s.mean.size() != c.dim() || s.cov.dim() != c.dim())
    throw DimensionMismatch("kalman_forecast: state/coefficient dimension mismatch");
  const Matrix a = Matrix(c.A);
  return {c.A * s.mean + c.B, s.cov.congruence(a) + c.sigma_dense()};
}

KalmanState kalman_step(const KalmanState& s, const StepCoefficients& c, const Vector& y) {
  if (y.size() != c.obs_dim()) throw DimensionMismatch("kalman_step: observation has wrong length");
  KalmanState f = kalman_forecast(s, c);
  if (c.obs_dim() == 0) return f;
  const Matrix h = Matrix(c.H);
  const Matrix g = kalman_gain(f.cov, h);
  Vector mean = f.mean + g * (y - h * f.mean);
  return {std::move(mean), kalman_update_operator(f.cov, h)};
}

SymMatrix instability_covariance(const StepCoefficients& c, double r, double tau, double rho) {
  check_filter_params(r, tau, rho);
  if (auto v = diagonal_instability(c, r, tau, rho)) return SymMatrix::diagonal(v->cwiseMax(0.0));
  const Matrix a = Matrix(c.A);
  Matrix m = rho * a * a.transpose() + Matrix(c.Sigma);
  m.diagonal().array() -= rho * tau / r;
  return positive_part(SymMatrix(m));
}

GaussianFactor instability_factor(const StepCoefficients& c, double r, double tau, double rho) {
  check_filter_params(r, tau, rho);
  if (auto v = diagonal_instability(c, r, tau, rho)) return GaussianFactor::from_diagonal(v->cwiseMax(0.0));
  const Matrix a = Matrix(c.A);
  Matrix m = rho * a * a.transpose() + Matrix(c.Sigma);
  m.diagonal().array() -= rho * tau / r;
  return GaussianFactor::from_factor(positive_part_factor(SymMatrix(m)));
}

void AugmentedRiccatiState::validate() const {
  if (cov.empty()) throw InvalidParams("AugmentedRiccatiState: empty covariance");
  if (!(r > 1)) throw InvalidParams("AugmentedRiccatiState: r must be > 1");
  check_filter_params(r, tau, rho);
}

SymMatrix augmented_noise(const StepCoefficients& c, double r, double tau, double rho) {
  return (instability_covariance(c, r, tau, rho) * (r * r)).plus_identity(r * r * tau * rho);
}

SymMatrix turbulence_reference_noise(const StepCoefficients& c, double r, double tau, double rho) {
  return (c.sigma_dense() * (r * r)).plus_identity(tau * rho);
}

AugmentedRiccatiState augmented_riccati_step(const AugmentedRiccatiState& s, const StepCoefficients& c) {
  return augmented_riccati_step(s, c, augmented_noise(c, s.r, s.tau, s.rho));
}

AugmentedRiccatiState augmented_riccati_step(const AugmentedRiccatiState& s, const StepCoefficients& c,
                                             const SymMatrix& sigma_prime) {
  if (s.cov.dim() != c.dim() || sigma_prime.dim() != c.dim())
    throw DimensionMismatch("augmented_riccati_step: dimension mismatch");
  const Matrix a = Matrix(c.A);
  const SymMatrix forecast = s.cov.congruence(a) * (s.r * s.r) + sigma_prime;
  AugmentedRiccatiState out = s;
  out.cov = kalman_update_operator(forecast, Matrix(c.H));
  return out;
}

SymMatrix unfiltered_covariance(const CoefficientStream& stream, double r, double tau, double rho,
                                std::uint64_t n_steps) {
  check_filter_params(r, tau, rho);
  const Index d = stream.dim();
  const double r2 = r * r;

  if (stream.time_homogeneous()) {
    const StepCoefficients c = stream.at(0);
    if (auto inst = diagonal_instability(c, r, tau, rho)) {
      const SparseMatrix aat = c.A * SparseMatrix(c.A.transpose());
      Vector v(d);
      for (Index i = 0; i < d; ++i) {
        const double growth = r2 * aat.coeff(i, i);
        if (growth >= 1.0) {
          if ((*inst)(i) > 0.0) {
            v(i) = std::numeric_limits<double>::infinity();
            continue;
          }
          throw DivergentMode("unfiltered_covariance: mode " + std::to_string(stream.mode_of_component(i)) +
                                  " diverges (r^2 |A|^2 >= 1) outside the instability covariance",
                              stream.mode_of_component(i));
        }
        v(i) = r2 * (c.Sigma.coeff(i, i) + tau * rho) / (1.0 - growth);
      }
      // Accept the closed form only if A diag(v) A^T stays diagonal on the finite part.
      Vector vf = v;
      for (Index i = 0; i < d; ++i)
        if (!std::isfinite(vf(i))) vf(i) = 0.0;
      const Matrix a = Matrix(c.A);
      Matrix check = r2 * a * vf.asDiagonal() * a.transpose();
      for (Index i = 0; i < d; ++i) check(i, i) += r2 * (c.Sigma.coeff(i, i) + tau * rho);
      Matrix target = vf.asDiagonal();
      for (Index i = 0; i < d; ++i)
        if (!std::isfinite(v(i))) {
          check.row(i).setZero();
          check.col(i).setZero();
          target(i, i) = 0.0;
        }
      const double scale = std::max(1.0, vf.cwiseAbs().maxCoeff());
      if ((check - target).cwiseAbs().maxCoeff() <= 1e-12 * scale) return SymMatrix::diagonal(v);
    }
  }

  SymMatrix v = SymMatrix::zero(d);
  for (std::uint64_t n = 0; n < n_steps; ++n) {
    const StepCoefficients c = stream.at(n);
    const Matrix a = Matrix(c.A);
    v = v.congruence(a) * r2 + (c.sigma_dense() * r2).plus_identity(r2 * tau * rho);
  }
  return v;
}

Vector stationary_riccati_diag(const TurbulenceParams& p) {
  p.validate();
  if (!p.sigma_obs) throw InvalidParams("stationary_riccati_diag: sigma_obs must be set");
  const double so = *p.sigma_obs;
  const double n_obs = static_cast<double>(p.dim());
  const double r2 = p.r * p.r;
  const double tr = p.tau * p.rho;
  Vector out(p.J + 1);
  for (int k = 0; k <= p.J; ++k) {
    const double e = p.decay_sq(k);
    const double s = p.sigma_kk(k);
    auto f = [&](double x) {
      const double rh = r2 * x * e + r2 * s + tr;
      return so * rh / (so + n_obs * rh);
    };
    double x = 0.0;
    double damping = 1.0;
    double prev_step = 0.0;
    bool done = false;
    for (int it = 0; it < 100000; ++it) {
      const double step = f(x) - x;
      if (it > 0 && step * prev_step < 0) damping = 0.5;
      const double next = x + damping * step;
      if (std::abs(next - x) <= 1e-12) {
        x = f(next);
        done = true;
        break;
      }
      prev_step = step;
      x = next;
    }
    if (!done) throw NoConvergence("stationary_riccati_diag: no convergence for mode " + std::to_string(k));
    out(k) = x;
  }
  return out;
}

SymMatrix stationary_reference_covariance(const TurbulenceParams& p) {
  const Vector rk = stationary_riccati_diag(p);
  Vector diag(p.dim());
  for (Index i = 0; i < p.dim(); ++i) diag(i) = rk(component_mode(i));
  return SymMatrix::diagonal(diag);
}

GramianResult observability_gramian(const CoefficientStream& stream, int m, double r) {
  if (m < 1) throw InvalidParams("observability_gramian: m must be >= 1");
  const Index d = stream.dim();
  Matrix prop = Matrix::Identity(d, d);  // A_{k,1}
  Matrix gram = Matrix::Zero(d, d);
  for (int k = 1; k <= m; ++k) {
    const StepCoefficients c = stream.at(static_cast<std::uint64_t>(k - 1));
    if (k > 1) {
      const StepCoefficients prev = stream.at(static_cast<std::uint64_t>(k - 2));
      prop = r * (prev.A * prop);
    }
    if (c.obs_dim() > 0) {
      const Matrix hp = c.H * prop;
      gram += hp.transpose() * hp;
    }
  }
  GramianResult out;
  out.gramian = SymMatrix(gram);
  out.c_m = min_eigenvalue(out.gramian);
  return out;
}

}  // namespace enkf

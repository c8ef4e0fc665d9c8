#pragma once

#include <cstdint>

#include "enkf/models.hpp"
#include "enkf/psd_linalg.hpp"

namespace enkf {

struct KalmanState {
  Vector mean;
  SymMatrix cov;
};

/// m_hat = A m + B, R_hat = A R A^T + Sigma.
KalmanState kalman_forecast(const KalmanState& state, const StepCoefficients& c);

/// Forecast followed by the Kalman update against y.
KalmanState kalman_step(const KalmanState& state, const StepCoefficients& c, const Vector& y);

/// Positive part of rho A A^T + Sigma - (rho tau / r) I.
SymMatrix instability_covariance(const StepCoefficients& c, double r, double tau, double rho);

/// Sampling factor of the instability covariance. Diagonal A A^T and Sigma
/// (the turbulence model, any rotation rates) avoid the dense eigensolve.
GaussianFactor instability_factor(const StepCoefficients& c, double r, double tau, double rho);

struct AugmentedRiccatiState {
  SymMatrix cov;
  double r = 1.1;
  double tau = 1.0;
  double rho = 0.04;

  void validate() const;
};

/// Sigma' = r^2 Sigma^+ + r^2 tau rho I.
SymMatrix augmented_noise(const StepCoefficients& c, double r, double tau, double rho);

/// r^2 Sigma + tau rho I: the per-mode noise the stationary turbulence solver uses.
SymMatrix turbulence_reference_noise(const StepCoefficients& c, double r, double tau, double rho);

/// R_hat' = r^2 A R' A^T + Sigma', R'+ = K(R_hat'), with Sigma' = augmented_noise.
AugmentedRiccatiState augmented_riccati_step(const AugmentedRiccatiState& state, const StepCoefficients& c);

/// Same recursion with a caller-supplied Sigma'.
AugmentedRiccatiState augmented_riccati_step(const AugmentedRiccatiState& state, const StepCoefficients& c,
                                             const SymMatrix& sigma_prime);

/// Fixed point (or n_steps iterate) of V' = r^2 A V' A^T + r^2 (Sigma + tau rho I).
/// Components whose growth factor r^2 (A A^T)_ii >= 1 get +inf when they belong to the
/// instability covariance; any other divergent component throws DivergentMode.
SymMatrix unfiltered_covariance(const CoefficientStream& stream, double r, double tau, double rho,
                                std::uint64_t n_steps);

/// Per-wavenumber stationary variances r_k, k = 0..J, for the observed turbulence model.
Vector stationary_riccati_diag(const TurbulenceParams& params);

/// Stationary reference covariance diag(r_k) laid out in state coordinates.
SymMatrix stationary_reference_covariance(const TurbulenceParams& params);

struct GramianResult {
  SymMatrix gramian;
  double c_m = 0.0;
};

/// sum_{k=1..m} A_{k,1}^T H_k^T H_k A_{k,1}, A_{k,1} = r^{k-1} A_{k-1} ... A_1 (A_{1,1} = I).
/// Step k uses stream.at(k - 1).
GramianResult observability_gramian(const CoefficientStream& stream, int m, double r);

}  // namespace enkf

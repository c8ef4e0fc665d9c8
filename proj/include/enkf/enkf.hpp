#pragma once

#include <cstdint>
#include <optional>
#include <utility>

#include "enkf/models.hpp"
#include "enkf/psd_linalg.hpp"

namespace enkf {

struct Ensemble {
  Vector mean;
  Matrix spread;  // d x K, zero row sums

  Index dim() const { return mean.size(); }
  Index size() const { return spread.cols(); }
  /// S S^T / (K - 1)
  SymMatrix covariance() const;
  void validate() const;
};

struct EnkfConfig {
  Index K = 20;
  Index p = 1;
  double r = 1.1;
  double rho = 0.04;
  double tau = 1.0;
  Index dense_eig_max_dim = kDenseEigenMaxDim;

  void validate(Index dim) const;
};

struct Forecast {
  Vector mean;
  Matrix spread;  // S_hat
};

struct StepRecord {
  Matrix forecast_spread;
  Ensemble posterior;
  Vector gain_residual;        // y - H * forecast mean
  double chi = 1.0;
  double projection_discard = 0.0;  // (p+1)-th eigenvalue of K(C_hat^{tau rho})
  Vector top_eigenvalues;      // leading p eigenvalues of K(C_hat^{tau rho})
  Index effective_rank = 0;    // numerical rank of S_hat
  bool rank_deficit = false;   // effective_rank < p
};

/// Draws the initial ensemble N(mean, F F^T). The spread depends only on the
/// draws, so shifting `mean` shifts the ensemble mean and nothing else.
Ensemble initial_ensemble(const Vector& mean, const GaussianFactor& cov, Index K, std::uint64_t seed);

/// Member noise comes from substream (seed, member-noise, step, member).
Forecast enkf_forecast(const Ensemble& ens, const StepCoefficients& c, const GaussianFactor& sigma_plus,
                       const EnkfConfig& cfg, std::uint64_t seed, std::uint64_t step);

std::pair<Ensemble, StepRecord> enkf_assimilate(const Forecast& f, const StepCoefficients& c, const Vector& y,
                                                const EnkfConfig& cfg);

/// Forecast + assimilate. When `sigma_plus` is null it is computed from the coefficients.
std::pair<Ensemble, StepRecord> enkf_step(const Ensemble& ens, const StepCoefficients& c, const Vector& y,
                                          const EnkfConfig& cfg, std::uint64_t seed, std::uint64_t step,
                                          const GaussianFactor* sigma_plus = nullptr);

}  // namespace enkf

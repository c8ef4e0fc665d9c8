#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "enkf/kalman_ref.hpp"
#include "enkf/models.hpp"

namespace enkf {

struct ModeRow {
  int k = 0;
  double gamma_k = 0;
  double sigma_kk = 0;
  double branch1 = 0;  // covariance branch
  double branch2 = 0;  // instability branch
  double r_k = 0;      // stationary variance (observed case); NaN otherwise
  bool covariance_fail = false;
  bool instability_fail = false;
  bool pass = true;
};

/// Mode counts follow wavenumbers k >= 1; mode 0 is reported by flag.
/// p_state_dims counts state coordinates (2 per failing k >= 1, plus mode 0).
struct DimReport {
  std::string kind;
  int p_instability = 0;
  int p_covariance = 0;
  int p_effective = 0;
  int p_plus_minus = 0;
  int p_state_dims = 0;
  bool mode0_failing = false;
  std::vector<int> failing_modes;  // union of both branches, including 0 if it fails
  double rho = 0, r = 0, tau = 0;
  std::vector<ModeRow> modes;
};

/// Per-mode check of the unfiltered turbulence criterion:
///   rho >= r^2 S_k / (1 - r^2 tau - r^2 e_k)   and   rho >= (r rho / tau) e_k + (r/2) S_k
/// with e_k = exp(-2 gamma_k h), S_k the per-component noise variance.
DimReport verify_dim_unfiltered(const TurbulenceParams& params);

/// Observed criterion: rho >= r_k and rho >= (r rho / tau) e_k + (r / 2 tau) E_k (1 - e_k).
DimReport verify_dim_observed(const TurbulenceParams& params);

/// Observed when sigma_obs is set, unfiltered otherwise.
DimReport verify_dim(const TurbulenceParams& params);

/// (rho, p_effective) for each rho in the grid.
std::vector<std::pair<double, int>> minimal_p_search(const TurbulenceParams& params,
                                                     const std::vector<double>& rho_grid);

enum class ReferenceNoise {
  kAugmented,   // r^2 Sigma^+ + r^2 tau rho I
  kTurbulence,  // r^2 Sigma + tau rho I
};

struct GeneralDimOptions {
  std::uint64_t burn_in = 200;
  std::uint64_t window = 20;
  ReferenceNoise noise = ReferenceNoise::kAugmented;
  double initial_scale = 1.0;  // R'_0 = initial_scale * I
};

/// Counts in state coordinates: max over the window of rank(Sigma^+) and of the
/// number of eigenvalues of the Riccati iterate above rho.
DimReport verify_dim_general(const CoefficientStream& stream, double r, double tau, double rho,
                             const GeneralDimOptions& opts = {});

}  // namespace enkf

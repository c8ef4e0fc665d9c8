#include "enkf/effective_dim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "enkf/errors.hpp"

namespace enkf {

namespace {

void finalize(DimReport& rep) {
  rep.p_instability = rep.p_covariance = 0;
  rep.failing_modes.clear();
  int positive_fail = 0;
  for (auto& row : rep.modes) {
    row.pass = !(row.covariance_fail || row.instability_fail);
    if (!row.pass) rep.failing_modes.push_back(row.k);
    if (row.k == 0) {
      rep.mode0_failing = !row.pass;
      continue;
    }
    if (row.instability_fail) ++rep.p_instability;
    if (row.covariance_fail) ++rep.p_covariance;
    if (!row.pass) ++positive_fail;
  }
  rep.p_effective = std::max(rep.p_instability, rep.p_covariance);
  rep.p_plus_minus = 2 * rep.p_effective;
  rep.p_state_dims = 2 * positive_fail + (rep.mode0_failing ? 1 : 0);
}

}  // namespace

DimReport verify_dim_unfiltered(const TurbulenceParams& p) {
  p.validate();
  DimReport rep;
  rep.kind = "unfiltered";
  rep.rho = p.rho;
  rep.r = p.r;
  rep.tau = p.tau;
  const double r2 = p.r * p.r;
  for (int k = 0; k <= p.J; ++k) {
    ModeRow row;
    row.k = k;
    row.gamma_k = p.gamma(k);
    row.sigma_kk = p.sigma_kk(k);
    row.r_k = std::numeric_limits<double>::quiet_NaN();
    const double e = p.decay_sq(k);
    const double denom = 1.0 - r2 * p.tau - r2 * e;
    if (denom > 0) {
      row.branch1 = r2 * row.sigma_kk / denom;
      row.covariance_fail = row.branch1 > p.rho;
    } else {
      row.branch1 = row.sigma_kk > 0 ? std::numeric_limits<double>::infinity() : 0.0;
      row.covariance_fail = row.sigma_kk > 0;
    }
    row.branch2 = (p.r * p.rho / p.tau) * e + 0.5 * p.r * row.sigma_kk;
    row.instability_fail = row.branch2 > p.rho;
    rep.modes.push_back(row);
  }
  finalize(rep);
  return rep;
}

DimReport verify_dim_observed(const TurbulenceParams& p) {
  p.validate();
  if (!p.sigma_obs) throw InvalidParams("verify_dim_observed: sigma_obs must be set");
  const Vector rk = stationary_riccati_diag(p);
  DimReport rep;
  rep.kind = "observed";
  rep.rho = p.rho;
  rep.r = p.r;
  rep.tau = p.tau;
  for (int k = 0; k <= p.J; ++k) {
    ModeRow row;
    row.k = k;
    row.gamma_k = p.gamma(k);
    row.sigma_kk = p.sigma_kk(k);
    row.r_k = rk(k);
    const double e = p.decay_sq(k);
    row.branch1 = rk(k);
    row.covariance_fail = row.branch1 > p.rho;
    row.branch2 = (p.r * p.rho / p.tau) * e + (p.r / (2.0 * p.tau)) * p.energy(k) * (1.0 - e);
    row.instability_fail = row.branch2 > p.rho;
    rep.modes.push_back(row);
  }
  finalize(rep);
  return rep;
}

DimReport verify_dim(const TurbulenceParams& params) {
  return params.sigma_obs ? verify_dim_observed(params) : verify_dim_unfiltered(params);
}

std::vector<std::pair<double, int>> minimal_p_search(const TurbulenceParams& params,
                                                     const std::vector<double>& rho_grid) {
  if (rho_grid.empty()) throw InvalidParams("minimal_p_search: empty rho grid");
  std::vector<std::pair<double, int>> out;
  out.reserve(rho_grid.size());
  for (double rho : rho_grid) {
    if (!(rho > 0)) throw InvalidParams("minimal_p_search: rho must be > 0");
    TurbulenceParams q = params;
    q.rho = rho;
    out.emplace_back(rho, verify_dim(q).p_effective);
  }
  return out;
}

DimReport verify_dim_general(const CoefficientStream& stream, double r, double tau, double rho,
                             const GeneralDimOptions& opts) {
  if (opts.window == 0) throw InvalidParams("verify_dim_general: window must be >= 1");
  AugmentedRiccatiState st;
  st.cov = SymMatrix::identity(stream.dim(), opts.initial_scale);
  st.r = r;
  st.tau = tau;
  st.rho = rho;
  st.validate();

  DimReport rep;
  rep.kind = "general";
  rep.rho = rho;
  rep.r = r;
  rep.tau = tau;
  for (std::uint64_t n = 0; n < opts.burn_in + opts.window; ++n) {
    const StepCoefficients c = stream.at(n);
    const SymMatrix noise = opts.noise == ReferenceNoise::kAugmented ? augmented_noise(c, r, tau, rho)
                                                                     : turbulence_reference_noise(c, r, tau, rho);
    st = augmented_riccati_step(st, c, noise);
    if (n < opts.burn_in) continue;
    const int rank_plus = static_cast<int>(instability_factor(c, r, tau, rho).rank());
    const SpectralDecomp sd = spectral_decomposition(st.cov);
    const int above = static_cast<int>((sd.eigenvalues.array() > rho).count());
    rep.p_instability = std::max(rep.p_instability, rank_plus);
    rep.p_covariance = std::max(rep.p_covariance, above);
  }
  rep.p_effective = std::max(rep.p_instability, rep.p_covariance);
  rep.p_state_dims = rep.p_effective;
  rep.p_plus_minus = rep.p_effective;
  return rep;
}

}  // namespace enkf

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "enkf/psd_linalg.hpp"
#include "enkf/rng.hpp"

namespace enkf {

/// One step's coefficients of X' = A X + B + xi, Y' = H X' + zeta with
/// xi ~ N(0, Sigma), zeta ~ N(0, I_q). q == 0 means "no observation".
struct StepCoefficients {
  SparseMatrix A;
  Vector B;
  SparseMatrix Sigma;
  SparseMatrix H;

  Index dim() const { return A.rows(); }
  Index obs_dim() const { return H.rows(); }
  SymMatrix sigma_dense() const { return SymMatrix(Matrix(Sigma)); }

  /// Throws DimensionMismatch / InvalidParams.
  void validate() const;
};

/// Sampler for N(0, M) with M = F F^T. Diagonal covariances skip the dense factor.
class GaussianFactor {
 public:
  GaussianFactor() = default;
  static GaussianFactor from_diagonal(const Vector& variances);
  static GaussianFactor from_factor(Matrix f);
  /// Factors a PSD matrix; sparse diagonal input takes the cheap path.
  static GaussianFactor from_covariance(const SparseMatrix& cov);

  Index dim() const { return diagonal_ ? sd_.size() : f_.rows(); }
  Index rank() const;
  bool is_diagonal() const { return diagonal_; }
  bool is_zero() const { return rank() == 0; }

  Vector sample(CounterRng& rng) const;
  /// One column per draw.
  Matrix sample_block(CounterRng& rng, Index count) const;
  SymMatrix covariance() const;
  /// M X without forming M.
  Matrix apply(const Matrix& x) const;

 private:
  bool diagonal_ = true;
  Vector sd_;
  Matrix f_;
};

/// Finite-state Markov chain whose state scales the A-blocks of the modes in `modes`.
struct JumpSpec {
  Matrix transition;            // row-stochastic, S x S
  Matrix multipliers;           // S x |modes|
  std::vector<int> modes;       // wavenumbers in the instability set
  int initial_state = 0;

  void validate() const;
};

struct JumpResult {
  int state = 0;
  Vector multipliers;  // aligned with JumpSpec::modes
};

JumpResult markov_jump_step(const JumpSpec& spec, int state, CounterRng& rng);

/// Stationary distribution of the jump chain (left Perron vector).
Vector jump_stationary_distribution(const JumpSpec& spec);

/// Step-indexed coefficient source. Generators must be deterministic in the step.
class CoefficientStream {
 public:
  using Generator = std::function<StepCoefficients(std::uint64_t)>;

  CoefficientStream(Index dim, Index obs_dim, Generator gen, bool time_homogeneous);
  static CoefficientStream constant(StepCoefficients coeffs);

  Index dim() const { return dim_; }
  Index obs_dim() const { return obs_dim_; }
  bool time_homogeneous() const { return homogeneous_; }
  StepCoefficients at(std::uint64_t step) const;

  /// Wavenumber of each state component; identity when unset.
  int mode_of_component(Index i) const;
  void set_mode_map(std::vector<int> map) { mode_map_ = std::move(map); }

 private:
  Index dim_;
  Index obs_dim_;
  Generator gen_;
  bool homogeneous_;
  std::shared_ptr<const StepCoefficients> cached_;
  std::vector<int> mode_map_;
};

/// Fourier-mode linear turbulence model, realified as [mode0, cos1, sin1, cos2, sin2, ...].
struct TurbulenceParams {
  int J = 50;
  double alpha = 2.0;
  double beta = 5.0 / 3.0;
  double gamma0 = 0.01;
  double nu_visc = 0.01;
  double E0 = 1.0;
  double h = 0.5;
  std::vector<double> omega;    // per wavenumber 0..J; empty means all zero
  std::vector<double> forcing;  // per state component; empty means zero
  double r = 1.1;
  double tau = 1.0;
  double rho = 0.04;
  std::optional<double> sigma_obs;
  std::optional<JumpSpec> jump_spec;
  std::uint64_t jump_seed = 0;

  Index dim() const { return 2 * static_cast<Index>(J) + 1; }
  double gamma(int k) const;
  double energy(int k) const;
  /// Per-component variance 0.5 E_k (1 - exp(-2 gamma_k h)).
  double sigma_kk(int k) const;
  /// exp(-2 gamma_k h).
  double decay_sq(int k) const;

  void validate() const;

  /// The Kolmogorov-spectrum setup used by the shipped configs.
  static TurbulenceParams kolmogorov(int J = 50);
};

CoefficientStream build_turbulence(const TurbulenceParams& params);

/// Component range of wavenumber k: {0} for k = 0, {2k-1, 2k} otherwise.
inline Index mode_first_component(int k) { return k == 0 ? 0 : 2 * k - 1; }
inline int component_mode(Index i) { return static_cast<int>((i + 1) / 2); }

struct TruthTrajectory {
  std::vector<Vector> states;        // X_0 .. X_T
  std::vector<Vector> observations;  // Y_1 .. Y_T (observations[n-1] is Y_n)
  std::uint64_t seed = 0;
};

struct SimulateOptions {
  bool suppress_obs_noise = false;
};

/// X_{n+1} = A_n X_n + B_n + xi_{n+1}; Y_{n+1} = H_n X_{n+1} + zeta_{n+1}.
TruthTrajectory simulate_truth(const CoefficientStream& stream, const Vector& x0,
                               std::uint64_t T, std::uint64_t seed,
                               const SimulateOptions& opts = {});

}  // namespace enkf

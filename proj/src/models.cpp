#include "enkf/models.hpp"

#include <cmath>
#include <mutex>
#include <string>

#include <Eigen/Eigenvalues>

#include "enkf/errors.hpp"

namespace enkf {

namespace {

bool sparse_is_diagonal(const SparseMatrix& m) {
  for (Index k = 0; k < m.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(m, k); it; ++it)
      if (it.row() != it.col() && it.value() != 0.0) return false;
  return true;
}

SparseMatrix sparse_identity(Index d, double scale) {
  SparseMatrix m(d, d);
  m.reserve(Eigen::VectorXi::Constant(d, 1));
  for (Index i = 0; i < d; ++i) m.insert(i, i) = scale;
  m.makeCompressed();
  return m;
}

}  // namespace

void StepCoefficients::validate() const {
  const Index d = A.rows();
  if (d == 0 || A.cols() != d) throw DimensionMismatch("StepCoefficients: A must be square and non-empty");
  if (B.size() != d) throw DimensionMismatch("StepCoefficients: B has wrong length");
  if (Sigma.rows() != d || Sigma.cols() != d) throw DimensionMismatch("StepCoefficients: Sigma has wrong shape");
  if (H.rows() > 0 && H.cols() != d) throw DimensionMismatch("StepCoefficients: H has wrong column count");
  if (sparse_is_diagonal(Sigma)) {
    for (Index i = 0; i < d; ++i)
      if (Sigma.coeff(i, i) < 0) throw InvalidParams("StepCoefficients: Sigma has a negative variance");
  } else {
    const SymMatrix s = sigma_dense();
    if (!is_positive_semidefinite(s, 1e-12 * std::max(1.0, s.norm())))
      throw InvalidParams("StepCoefficients: Sigma is not PSD");
  }
}

// ---------------------------------------------------------------- GaussianFactor

GaussianFactor GaussianFactor::from_diagonal(const Vector& variances) {
  if ((variances.array() < 0).any()) throw InvalidParams("GaussianFactor: negative variance");
  GaussianFactor g;
  g.diagonal_ = true;
  g.sd_ = variances.cwiseSqrt();
  return g;
}

GaussianFactor GaussianFactor::from_factor(Matrix f) {
  GaussianFactor g;
  g.diagonal_ = false;
  g.f_ = std::move(f);
  return g;
}

GaussianFactor GaussianFactor::from_covariance(const SparseMatrix& cov) {
  if (sparse_is_diagonal(cov)) return from_diagonal(Vector(cov.diagonal()).cwiseMax(0.0));
  return from_factor(positive_part_factor(SymMatrix(Matrix(cov))));
}

Index GaussianFactor::rank() const {
  if (diagonal_) return (sd_.array() > 0).count();
  return f_.cols();
}

Vector GaussianFactor::sample(CounterRng& rng) const {
  if (diagonal_) return sd_.cwiseProduct(rng.normal_vector(sd_.size()));
  return f_ * rng.normal_vector(f_.cols());
}

Matrix GaussianFactor::sample_block(CounterRng& rng, Index count) const {
  Matrix out(dim(), count);
  for (Index j = 0; j < count; ++j) out.col(j) = sample(rng);
  return out;
}

SymMatrix GaussianFactor::covariance() const {
  if (diagonal_) return SymMatrix::diagonal(sd_.cwiseAbs2());
  return SymMatrix(f_ * f_.transpose());
}

Matrix GaussianFactor::apply(const Matrix& x) const {
  if (diagonal_) return sd_.cwiseAbs2().asDiagonal() * x;
  return f_ * (f_.transpose() * x);
}

// ---------------------------------------------------------------- Markov jumps

void JumpSpec::validate() const {
  const Index s = transition.rows();
  if (s == 0 || transition.cols() != s) throw InvalidChain("jump_spec: transition matrix must be square and non-empty");
  for (Index i = 0; i < s; ++i) {
    if ((transition.row(i).array() < 0).any())
      throw InvalidChain("jump_spec: negative transition probability in row " + std::to_string(i));
    const double sum = transition.row(i).sum();
    if (std::abs(sum - 1.0) > 1e-12)
      throw InvalidChain("jump_spec: row " + std::to_string(i) + " sums to " + std::to_string(sum));
  }
  if (multipliers.rows() != s || multipliers.cols() != static_cast<Index>(modes.size()))
    throw InvalidChain("jump_spec: multipliers must be states x modes");
  if (initial_state < 0 || initial_state >= s) throw InvalidChain("jump_spec: initial_state out of range");
}

JumpResult markov_jump_step(const JumpSpec& spec, int state, CounterRng& rng) {
  spec.validate();
  if (state < 0 || state >= spec.transition.rows()) throw InvalidChain("markov_jump_step: state out of range");
  const double u = rng.uniform();
  const Index s = spec.transition.cols();
  double acc = 0.0;
  Index next = s - 1;
  for (Index j = 0; j < s; ++j) {
    acc += spec.transition(state, j);
    if (u < acc) {
      next = j;
      break;
    }
  }
  // Never land on a zero-probability tail state through roundoff.
  while (next > 0 && spec.transition(state, next) == 0.0) --next;
  JumpResult out;
  out.state = static_cast<int>(next);
  out.multipliers = spec.multipliers.row(next).transpose();
  return out;
}

Vector jump_stationary_distribution(const JumpSpec& spec) {
  spec.validate();
  const Index s = spec.transition.rows();
  // Solve pi (P - I) = 0, sum(pi) = 1 as a least-squares system.
  Matrix m(s + 1, s);
  m.topRows(s) = (spec.transition - Matrix::Identity(s, s)).transpose();
  m.row(s).setOnes();
  Vector rhs = Vector::Zero(s + 1);
  rhs(s) = 1.0;
  return m.colPivHouseholderQr().solve(rhs);
}

// ---------------------------------------------------------------- streams

CoefficientStream::CoefficientStream(Index dim, Index obs_dim, Generator gen, bool time_homogeneous)
    : dim_(dim), obs_dim_(obs_dim), gen_(std::move(gen)), homogeneous_(time_homogeneous) {
  if (dim <= 0) throw InvalidParams("CoefficientStream: dimension must be positive");
  if (!gen_) throw InvalidParams("CoefficientStream: empty generator");
  if (homogeneous_) {
    auto c = std::make_shared<StepCoefficients>(gen_(0));
    c->validate();
    cached_ = std::move(c);
  }
}

CoefficientStream CoefficientStream::constant(StepCoefficients coeffs) {
  coeffs.validate();
  const Index d = coeffs.dim();
  const Index q = coeffs.obs_dim();
  auto shared = std::make_shared<const StepCoefficients>(std::move(coeffs));
  return CoefficientStream(d, q, [shared](std::uint64_t) { return *shared; }, true);
}

StepCoefficients CoefficientStream::at(std::uint64_t step) const {
  if (cached_) return *cached_;
  StepCoefficients c = gen_(step);
  if (c.dim() != dim_ || c.obs_dim() != obs_dim_)
    throw DimensionMismatch("CoefficientStream: generator changed dimensions at step " + std::to_string(step));
  return c;
}

int CoefficientStream::mode_of_component(Index i) const {
  if (mode_map_.empty()) return static_cast<int>(i);
  return mode_map_.at(static_cast<std::size_t>(i));
}

// ---------------------------------------------------------------- turbulence

double TurbulenceParams::gamma(int k) const {
  return gamma0 + nu_visc * std::pow(static_cast<double>(std::abs(k)), alpha);
}

double TurbulenceParams::energy(int k) const {
  if (k == 0) return E0;
  return E0 * std::pow(static_cast<double>(std::abs(k)), -beta);
}

double TurbulenceParams::decay_sq(int k) const { return std::exp(-2.0 * gamma(k) * h); }

double TurbulenceParams::sigma_kk(int k) const {
  return 0.5 * energy(k) * (1.0 - decay_sq(k));
}

void TurbulenceParams::validate() const {
  if (J < 0) throw InvalidParams("J must be >= 0");
  if (!(alpha > 0)) throw InvalidParams("alpha must be > 0");
  if (!(beta >= 0)) throw InvalidParams("beta must be >= 0");
  if (!(h > 0)) throw InvalidParams("h must be > 0");
  if (!(E0 >= 0)) throw InvalidParams("E0 must be >= 0");
  for (int k = 0; k <= J; ++k)
    if (!(gamma(k) > 0)) throw InvalidParams("gamma0 + nu_visc * k^alpha must be > 0 (k = " + std::to_string(k) + ")");
  if (!(r > 0)) throw InvalidParams("r must be > 0");
  if (!(tau > 0)) throw InvalidParams("tau must be > 0");
  if (!(rho > 0)) throw InvalidParams("rho must be > 0");
  if (!omega.empty() && omega.size() != static_cast<std::size_t>(J + 1))
    throw InvalidParams("omega must have J + 1 entries");
  if (!forcing.empty() && forcing.size() != static_cast<std::size_t>(dim()))
    throw InvalidParams("forcing must have 2J + 1 entries");
  if (sigma_obs && !(*sigma_obs > 0)) throw InvalidParams("sigma_obs must be > 0");
  if (jump_spec) {
    jump_spec->validate();
    for (int k : jump_spec->modes)
      if (k < 0 || k > J) throw InvalidParams("jump_spec.modes entry out of range: " + std::to_string(k));
  }
}

TurbulenceParams TurbulenceParams::kolmogorov(int J) {
  TurbulenceParams p;
  p.J = J;
  p.alpha = 2.0;
  p.beta = 5.0 / 3.0;
  p.gamma0 = 0.01;
  p.nu_visc = 0.01;
  p.E0 = 1.0;
  p.h = 0.5;
  p.r = 1.1;
  p.tau = 0.6;
  p.rho = 0.04;
  return p;
}

namespace {

SparseMatrix turbulence_a(const TurbulenceParams& p, const Vector& mult) {
  const Index d = p.dim();
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(4 * p.J + 1));
  trip.emplace_back(0, 0, mult(0) * std::exp(-p.gamma(0) * p.h));
  for (int k = 1; k <= p.J; ++k) {
    const double damp = mult(k) * std::exp(-p.gamma(k) * p.h);
    const double w = p.omega.empty() ? 0.0 : p.omega[static_cast<std::size_t>(k)];
    const double c = damp * std::cos(w * p.h);
    const double s = damp * std::sin(w * p.h);
    const Index i = mode_first_component(k);
    trip.emplace_back(i, i, c);
    trip.emplace_back(i + 1, i + 1, c);
    if (s != 0.0) {
      trip.emplace_back(i, i + 1, -s);
      trip.emplace_back(i + 1, i, s);
    }
  }
  SparseMatrix a(d, d);
  a.setFromTriplets(trip.begin(), trip.end());
  return a;
}

// Mode 0 rotation is always trivial (real mode); omega[0] is ignored.
StepCoefficients turbulence_base(const TurbulenceParams& p) {
  const Index d = p.dim();
  StepCoefficients c;
  c.A = turbulence_a(p, Vector::Ones(p.J + 1));
  c.B = Vector::Zero(d);
  if (!p.forcing.empty())
    for (Index i = 0; i < d; ++i) c.B(i) = p.forcing[static_cast<std::size_t>(i)] * p.h;
  Vector sig(d);
  sig(0) = p.sigma_kk(0);
  for (int k = 1; k <= p.J; ++k) {
    const Index i = mode_first_component(k);
    sig(i) = sig(i + 1) = p.sigma_kk(k);
  }
  c.Sigma = SparseMatrix(sig.asDiagonal());
  if (p.sigma_obs)
    c.H = sparse_identity(d, std::sqrt(static_cast<double>(d) / *p.sigma_obs));
  else
    c.H = SparseMatrix(0, d);
  return c;
}

// Memoized chain path; shared by copies of the stream, guarded for concurrent readers.
struct JumpPath {
  JumpSpec spec;
  std::uint64_t seed;
  std::mutex mu;
  std::vector<int> states;

  int state_at(std::uint64_t step) {
    std::lock_guard<std::mutex> lock(mu);
    if (states.empty()) states.push_back(spec.initial_state);
    while (states.size() <= step) {
      const std::uint64_t n = states.size() - 1;
      CounterRng rng(substream_key(seed, StreamTag::kJumpChain, n));
      states.push_back(markov_jump_step(spec, states.back(), rng).state);
    }
    return states[static_cast<std::size_t>(step)];
  }
};

}  // namespace

CoefficientStream build_turbulence(const TurbulenceParams& params) {
  params.validate();
  const StepCoefficients base = turbulence_base(params);
  const Index d = params.dim();
  const Index q = base.obs_dim();

  std::vector<int> map(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) map[static_cast<std::size_t>(i)] = component_mode(i);

  if (!params.jump_spec) {
    CoefficientStream s = CoefficientStream::constant(base);
    s.set_mode_map(std::move(map));
    return s;
  }

  auto path = std::make_shared<JumpPath>();
  path->spec = *params.jump_spec;
  path->seed = params.jump_seed;
  auto gen = [params, base, path](std::uint64_t step) {
    const int state = path->state_at(step);
    Vector mult = Vector::Ones(params.J + 1);
    const auto& modes = path->spec.modes;
    for (std::size_t i = 0; i < modes.size(); ++i)
      mult(modes[i]) = path->spec.multipliers(state, static_cast<Index>(i));
    StepCoefficients c = base;
    c.A = turbulence_a(params, mult);
    return c;
  };
  CoefficientStream s(d, q, gen, false);
  s.set_mode_map(std::move(map));
  return s;
}

// ---------------------------------------------------------------- truth

TruthTrajectory simulate_truth(const CoefficientStream& stream, const Vector& x0,
                               std::uint64_t T, std::uint64_t seed, const SimulateOptions& opts) {
  if (T < 1) throw InvalidParams("simulate_truth: T must be >= 1");
  if (x0.size() != stream.dim()) throw DimensionMismatch("simulate_truth: x0 has wrong length");
  TruthTrajectory out;
  out.seed = seed;
  out.states.reserve(static_cast<std::size_t>(T + 1));
  out.observations.reserve(static_cast<std::size_t>(T));
  out.states.push_back(x0);

  std::optional<GaussianFactor> fixed_noise;
  if (stream.time_homogeneous()) fixed_noise = GaussianFactor::from_covariance(stream.at(0).Sigma);

  for (std::uint64_t n = 0; n < T; ++n) {
    const StepCoefficients c = stream.at(n);
    const GaussianFactor noise = fixed_noise ? *fixed_noise : GaussianFactor::from_covariance(c.Sigma);
    CounterRng xi_rng(substream_key(seed, StreamTag::kTruthNoise, n));
    Vector x = c.A * out.states.back() + c.B + noise.sample(xi_rng);
    Vector y = c.H * x;
    if (!opts.suppress_obs_noise && y.size() > 0) {
      CounterRng zeta_rng(substream_key(seed, StreamTag::kObsNoise, n));
      y += zeta_rng.normal_vector(y.size());
    }
    out.states.push_back(std::move(x));
    out.observations.push_back(std::move(y));
  }
  return out;
}

}  // namespace enkf

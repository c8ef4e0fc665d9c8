#pragma once

#include <functional>
#include <optional>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/SparseCore>

namespace enkf {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

// A matrix is PD iff its smallest eigenvalue exceeds kPdRelTol * max(1, largest).
inline constexpr double kPdRelTol = 1e-12;
// Singular values below kPinvRelTol * sigma_max are treated as zero.
inline constexpr double kPinvRelTol = 1e-12;
// Above this dimension the top-p eigenpairs come from subspace iteration.
inline constexpr Index kDenseEigenMaxDim = 512;

/// Dense symmetric matrix. Construction symmetrizes by averaging with the
/// transpose, so entries (i, j) and (j, i) are bitwise equal afterwards.
/// NaN is rejected; +inf is allowed so divergent variances can be reported.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(const Matrix& m);

  static SymMatrix identity(Index dim, double scale = 1.0);
  static SymMatrix zero(Index dim);
  static SymMatrix diagonal(const Vector& diag);

  Index dim() const { return m_.rows(); }
  bool empty() const { return m_.size() == 0; }
  const Matrix& dense() const { return m_; }
  double operator()(Index i, Index j) const { return m_(i, j); }

  SymMatrix operator+(const SymMatrix& o) const;
  SymMatrix operator-(const SymMatrix& o) const;
  SymMatrix operator*(double s) const;
  friend SymMatrix operator*(double s, const SymMatrix& m) { return m * s; }
  SymMatrix plus_identity(double s) const;

  /// Returns T M T^T.
  SymMatrix congruence(const Matrix& t) const;

  /// Largest absolute eigenvalue.
  double norm() const;

 private:
  Matrix m_;
};

struct SpectralDecomp {
  Vector eigenvalues;   // non-increasing
  Matrix eigenvectors;  // orthonormal columns, paired with eigenvalues

  Matrix reconstruct() const;
};

/// Full symmetric eigendecomposition in descending order. Eigenvectors are
/// sign-normalized (first entry above 1e-14 in magnitude is positive) and
/// exactly equal eigenvalues are ordered by lexicographic eigenvector order.
SpectralDecomp spectral_decomposition(const SymMatrix& m);

double min_eigenvalue(const SymMatrix& m);
double max_eigenvalue(const SymMatrix& m);

bool is_positive_definite(const SymMatrix& m);
bool is_positive_semidefinite(const SymMatrix& m, double slack = 0.0);

/// True when a <= b + slack * I in the Loewner order.
bool loewner_leq(const SymMatrix& a, const SymMatrix& b, double slack);

/// v^T C^{-1} v through a Cholesky solve.
double mahalanobis_sq(const Vector& v, const SymMatrix& c);

/// inf{lambda : B <= lambda A}, the largest generalized eigenvalue of (B, A).
double loewner_ratio(const SymMatrix& b, const SymMatrix& a);

double condition_number(const SymMatrix& c);

/// G = C H^T (I + H C H^T)^{-1}.
Matrix kalman_gain(const SymMatrix& c, const Matrix& h);

/// K(C) = C - C H^T (I + H C H^T)^{-1} H C.
SymMatrix kalman_update_operator(const SymMatrix& c, const Matrix& h);

/// Restriction of M to its positive eigenspace: P M P.
SymMatrix positive_part(const SymMatrix& m);

/// F with F F^T = positive_part(m), dropping eigenvalues below d * eps * max abs eigenvalue.
Matrix positive_part_factor(const SymMatrix& m);

/// Principal square root of a PSD matrix (negative roundoff clamped to 0).
SymMatrix psd_sqrt(const SymMatrix& m);

struct TopPProjection {
  SymMatrix projector;  // sum of the top-p eigenvector outer products
  Vector eigenvalues;   // top p, non-increasing
  Matrix eigenvectors;  // d x p
  double rho_next = 0;  // (p+1)-th eigenvalue, 0 when p == dim
};

TopPProjection top_p_projection(const SymMatrix& c, Index p);

// Applies a symmetric operator to a block of column vectors.
using BlockOperator = std::function<Matrix(const Matrix&)>;

struct EigenSolverOptions {
  double tolerance = 1e-10;    // relative eigen-residual
  int max_iterations = 0;      // 0 means 10 * dim
  Index oversampling = 8;
};

/// Leading `count` eigenpairs of a symmetric operator by block power
/// iteration with Rayleigh-Ritz. `start` columns (optional) seed the block.
SpectralDecomp top_eigenpairs(const BlockOperator& op, Index dim, Index count,
                              const Matrix* start = nullptr,
                              const EigenSolverOptions& opts = {});

/// Inputs to the low-rank gain: forecast spread S (d x K), additive level
/// tau*rho, observation matrix H (q x d). The covariance is S S^T/(K-1) + tau*rho I.
struct KalmanGainContext {
  Matrix spread;
  double additive_level = 0.0;
  SparseMatrix obs;
};

/// Prepared Woodbury factorization of I + H C H^T for C = S S^T/(K-1) + a I.
/// Every product costs O(K d + nnz(H)) per column; no d x d matrix is formed.
class LowRankKalman {
 public:
  explicit LowRankKalman(KalmanGainContext ctx);

  Index state_dim() const { return ctx_.spread.rows(); }
  Index obs_dim() const { return ctx_.obs.rows(); }
  const KalmanGainContext& context() const { return ctx_; }

  /// (I + H C H^T)^{-1} Y
  Matrix innovation_solve(const Matrix& y) const;
  /// C X
  Matrix prior_apply(const Matrix& x) const;
  /// K(C) X
  Matrix posterior_apply(const Matrix& x) const;
  /// G y
  Vector gain_apply(const Vector& y) const;

  SymMatrix prior_dense() const;
  SymMatrix posterior_dense() const;

 private:
  Matrix q_apply(const Matrix& z) const;

  KalmanGainContext ctx_;
  Matrix scaled_;    // S / sqrt(K-1), or a d-column factor of the same product when K > d
  Matrix w_;         // H * scaled_
  Matrix qw_;        // Q W
  std::optional<Vector> q_diag_;
  Eigen::LLT<Matrix> q_llt_;
  Eigen::LLT<Matrix> inner_llt_;
};

/// G y with G = G(S S^T/(K-1) + tau*rho I), through the Woodbury identity.
Vector gain_apply_woodbury(const KalmanGainContext& ctx, const Vector& y);

}  // namespace enkf

#include "enkf/psd_linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include "enkf/errors.hpp"
#include "enkf/rng.hpp"

namespace enkf {

namespace {

void require_square(const Matrix& m, const char* who) {
  if (m.rows() != m.cols())
    throw DimensionMismatch(std::string(who) + ": matrix is not square");
  if (m.rows() == 0) throw DimensionMismatch(std::string(who) + ": empty matrix");
}

void require_same_dim(const SymMatrix& a, const SymMatrix& b, const char* who) {
  if (a.dim() != b.dim())
    throw DimensionMismatch(std::string(who) + ": dimension mismatch " +
                            std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
}

// Flip each column so its first clearly nonzero entry is positive.
void normalize_signs(Matrix& v) {
  for (Index j = 0; j < v.cols(); ++j) {
    for (Index i = 0; i < v.rows(); ++i) {
      if (std::abs(v(i, j)) > 1e-14) {
        if (v(i, j) < 0) v.col(j) = -v.col(j);
        break;
      }
    }
  }
}

bool lex_less(const Matrix& v, Index a, Index b) {
  for (Index i = 0; i < v.rows(); ++i) {
    if (v(i, a) < v(i, b)) return true;
    if (v(i, a) > v(i, b)) return false;
  }
  return false;
}

SpectralDecomp sort_descending(const Vector& vals, const Matrix& vecs) {
  Matrix v = vecs;
  normalize_signs(v);
  std::vector<Index> order(static_cast<std::size_t>(vals.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    if (vals(a) != vals(b)) return vals(a) > vals(b);
    return lex_less(v, a, b);
  });
  SpectralDecomp out;
  out.eigenvalues.resize(vals.size());
  out.eigenvectors.resize(v.rows(), vals.size());
  for (Index k = 0; k < vals.size(); ++k) {
    out.eigenvalues(k) = vals(order[static_cast<std::size_t>(k)]);
    out.eigenvectors.col(k) = v.col(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

Matrix orthonormalize(const Matrix& x) {
  Eigen::HouseholderQR<Matrix> qr(x);
  return qr.householderQ() * Matrix::Identity(x.rows(), x.cols());
}

bool is_diagonal(const SparseMatrix& m) {
  for (Index k = 0; k < m.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(m, k); it; ++it)
      if (it.row() != it.col() && it.value() != 0.0) return false;
  return true;
}

}  // namespace

SymMatrix::SymMatrix(const Matrix& m) {
  require_square(m, "SymMatrix");
  if (m.hasNaN()) throw InvalidParams("SymMatrix: NaN entry");
  m_ = 0.5 * (m + m.transpose());
}

SymMatrix SymMatrix::identity(Index dim, double scale) {
  return SymMatrix(Matrix::Identity(dim, dim) * scale);
}

SymMatrix SymMatrix::zero(Index dim) { return SymMatrix(Matrix::Zero(dim, dim)); }

SymMatrix SymMatrix::diagonal(const Vector& diag) {
  return SymMatrix(Matrix(diag.asDiagonal()));
}

SymMatrix SymMatrix::operator+(const SymMatrix& o) const {
  require_same_dim(*this, o, "SymMatrix::operator+");
  return SymMatrix(m_ + o.m_);
}

SymMatrix SymMatrix::operator-(const SymMatrix& o) const {
  require_same_dim(*this, o, "SymMatrix::operator-");
  return SymMatrix(m_ - o.m_);
}

SymMatrix SymMatrix::operator*(double s) const { return SymMatrix(m_ * s); }

SymMatrix SymMatrix::plus_identity(double s) const {
  Matrix m = m_;
  m.diagonal().array() += s;
  return SymMatrix(m);
}

SymMatrix SymMatrix::congruence(const Matrix& t) const {
  if (t.cols() != dim()) throw DimensionMismatch("SymMatrix::congruence: column count mismatch");
  return SymMatrix(t * m_ * t.transpose());
}

double SymMatrix::norm() const {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m_, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

Matrix SpectralDecomp::reconstruct() const {
  return eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose();
}

SpectralDecomp spectral_decomposition(const SymMatrix& m) {
  if (m.empty()) throw DimensionMismatch("spectral_decomposition: empty matrix");
  Eigen::SelfAdjointEigenSolver<Matrix> es(m.dense());
  if (es.info() != Eigen::Success) throw NoConvergence("spectral_decomposition failed");
  return sort_descending(es.eigenvalues(), es.eigenvectors());
}

double min_eigenvalue(const SymMatrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m.dense(), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

double max_eigenvalue(const SymMatrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m.dense(), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(m.dim() - 1);
}

bool is_positive_definite(const SymMatrix& m) {
  if (m.empty()) return false;
  Eigen::SelfAdjointEigenSolver<Matrix> es(m.dense(), Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues()(0);
  const double hi = es.eigenvalues()(m.dim() - 1);
  return lo > kPdRelTol * std::max(1.0, hi);
}

bool is_positive_semidefinite(const SymMatrix& m, double slack) {
  return min_eigenvalue(m) >= -slack;
}

bool loewner_leq(const SymMatrix& a, const SymMatrix& b, double slack) {
  return is_positive_semidefinite(b - a, slack);
}

double mahalanobis_sq(const Vector& v, const SymMatrix& c) {
  if (v.size() != c.dim()) throw DimensionMismatch("mahalanobis_sq: vector/matrix size mismatch");
  if (!is_positive_definite(c)) throw NotPositiveDefinite("mahalanobis_sq: covariance is not PD");
  Eigen::LLT<Matrix> llt(c.dense());
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite("mahalanobis_sq: Cholesky failed");
  const Vector z = llt.matrixL().solve(v);
  return z.squaredNorm();
}

double loewner_ratio(const SymMatrix& b, const SymMatrix& a) {
  require_same_dim(a, b, "loewner_ratio");
  if (!is_positive_definite(a)) throw NotPositiveDefinite("loewner_ratio: reference matrix is not PD");
  Eigen::LLT<Matrix> llt(a.dense());
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite("loewner_ratio: Cholesky failed");
  const auto l = llt.matrixL();
  const Matrix t = l.solve(b.dense());
  // L^{-1} B L^{-T}; the transpose must be materialized before the in-place solve
  const Matrix tt = t.transpose();
  return max_eigenvalue(SymMatrix(l.solve(tt)));
}

double condition_number(const SymMatrix& c) {
  if (!is_positive_definite(c)) throw NotPositiveDefinite("condition_number: matrix is not PD");
  Eigen::SelfAdjointEigenSolver<Matrix> es(c.dense(), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(c.dim() - 1) / es.eigenvalues()(0);
}

Matrix kalman_gain(const SymMatrix& c, const Matrix& h) {
  if (h.cols() != c.dim()) throw DimensionMismatch("kalman_gain: H has wrong column count");
  if (h.rows() == 0) return Matrix::Zero(c.dim(), 0);
  const Matrix cht = c.dense() * h.transpose();
  Matrix innov = h * cht;
  innov.diagonal().array() += 1.0;
  Eigen::LLT<Matrix> llt(0.5 * (innov + innov.transpose()));
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite("kalman_gain: innovation covariance not PD");
  // G = C H^T M^{-1}  <=>  G^T = M^{-1} H C
  return llt.solve(cht.transpose()).transpose();
}

SymMatrix kalman_update_operator(const SymMatrix& c, const Matrix& h) {
  if (h.cols() != c.dim()) throw DimensionMismatch("kalman_update_operator: H has wrong column count");
  if (h.rows() == 0) return c;
  const Matrix g = kalman_gain(c, h);
  return SymMatrix(c.dense() - g * (h * c.dense()));
}

SymMatrix positive_part(const SymMatrix& m) {
  const Matrix f = positive_part_factor(m);
  if (f.cols() == 0) return SymMatrix::zero(m.dim());
  return SymMatrix(f * f.transpose());
}

Matrix positive_part_factor(const SymMatrix& m) {
  const SpectralDecomp sd = spectral_decomposition(m);
  // eigenvalues at round-off level are zeros of the exact matrix
  const double scale = sd.eigenvalues.size() ? sd.eigenvalues.cwiseAbs().maxCoeff() : 0.0;
  const double floor = static_cast<double>(m.dim()) * std::numeric_limits<double>::epsilon() * scale;
  Index k = 0;
  while (k < sd.eigenvalues.size() && sd.eigenvalues(k) > floor) ++k;
  Matrix f = sd.eigenvectors.leftCols(k);
  for (Index j = 0; j < k; ++j) f.col(j) *= std::sqrt(sd.eigenvalues(j));
  return f;
}

SymMatrix psd_sqrt(const SymMatrix& m) {
  const SpectralDecomp sd = spectral_decomposition(m);
  const Vector r = sd.eigenvalues.cwiseMax(0.0).cwiseSqrt();
  return SymMatrix(sd.eigenvectors * r.asDiagonal() * sd.eigenvectors.transpose());
}

TopPProjection top_p_projection(const SymMatrix& c, Index p) {
  if (p < 1 || p > c.dim()) throw InvalidParams("top_p_projection: need 1 <= p <= dim");
  const SpectralDecomp sd = spectral_decomposition(c);
  TopPProjection out;
  out.eigenvalues = sd.eigenvalues.head(p);
  out.eigenvectors = sd.eigenvectors.leftCols(p);
  out.projector = SymMatrix(out.eigenvectors * out.eigenvectors.transpose());
  out.rho_next = p < c.dim() ? sd.eigenvalues(p) : 0.0;
  return out;
}

SpectralDecomp top_eigenpairs(const BlockOperator& op, Index dim, Index count,
                              const Matrix* start, const EigenSolverOptions& opts) {
  if (count < 0 || count > dim) throw InvalidParams("top_eigenpairs: count out of range");
  const Index block = std::min(dim, count + std::max<Index>(opts.oversampling, 1));

  if (block >= dim) {
    const Matrix full = op(Matrix::Identity(dim, dim));
    SpectralDecomp sd = spectral_decomposition(SymMatrix(full));
    sd.eigenvalues.conservativeResize(count);
    sd.eigenvectors.conservativeResize(dim, count);
    return sd;
  }

  CounterRng rng(substream_key(0x5eedULL, StreamTag::kTestData, dim, block));
  Matrix x = rng.normal_matrix(dim, block);
  if (start != nullptr) {
    if (start->rows() != dim) throw DimensionMismatch("top_eigenpairs: start block has wrong rows");
    const Index s = std::min(start->cols(), block);
    x.leftCols(s) = start->leftCols(s);
  }
  x = orthonormalize(x);

  const int max_iter = opts.max_iterations > 0 ? opts.max_iterations : static_cast<int>(10 * dim);
  for (int it = 0; it < max_iter; ++it) {
    const Matrix y = op(x);
    const Matrix t = x.transpose() * y;
    const SpectralDecomp ritz = spectral_decomposition(SymMatrix(t));
    const Matrix v = x * ritz.eigenvectors;
    const Matrix av = y * ritz.eigenvectors;

    const double scale = std::max(std::abs(ritz.eigenvalues(0)), std::numeric_limits<double>::min());
    double worst = 0.0;
    for (Index j = 0; j < count; ++j)
      worst = std::max(worst, (av.col(j) - ritz.eigenvalues(j) * v.col(j)).norm());
    if (worst <= opts.tolerance * scale) {
      Matrix vecs = v.leftCols(count);
      return sort_descending(ritz.eigenvalues.head(count), vecs);
    }
    x = orthonormalize(av);
  }
  throw NoConvergence("top_eigenpairs: subspace iteration did not converge");
}

LowRankKalman::LowRankKalman(KalmanGainContext ctx) : ctx_(std::move(ctx)) {
  const Index d = ctx_.spread.rows();
  const Index k = ctx_.spread.cols();
  if (d == 0) throw DimensionMismatch("LowRankKalman: empty spread");
  if (k < 2) throw InvalidParams("LowRankKalman: need at least two ensemble members");
  if (ctx_.additive_level < 0) throw InvalidParams("LowRankKalman: negative additive level");
  if (ctx_.obs.rows() > 0 && ctx_.obs.cols() != d)
    throw DimensionMismatch("LowRankKalman: H has wrong column count");

  scaled_ = ctx_.spread / std::sqrt(static_cast<double>(k - 1));
  if (k > d) {
    // more members than dimensions: swap in the d x d factor R^T of scaled^T = QR
    Eigen::HouseholderQR<Matrix> qr(scaled_.transpose());
    scaled_ = Matrix(qr.matrixQR().topRows(d).triangularView<Eigen::Upper>()).transpose();
  }
  const Index q = ctx_.obs.rows();
  if (q == 0) return;

  w_ = ctx_.obs * scaled_;
  const SparseMatrix hht = ctx_.obs * SparseMatrix(ctx_.obs.transpose());
  if (is_diagonal(hht)) {
    Vector qd(q);
    for (Index i = 0; i < q; ++i) qd(i) = 1.0 / (1.0 + ctx_.additive_level * hht.coeff(i, i));
    q_diag_ = qd;
  } else {
    Matrix m = ctx_.additive_level * Matrix(hht);
    m.diagonal().array() += 1.0;
    q_llt_.compute(m);
    if (q_llt_.info() != Eigen::Success) throw SingularInnerSolve("LowRankKalman: I + a H H^T not PD");
  }
  qw_ = q_apply(w_);
  Matrix inner = w_.transpose() * qw_;
  inner = (0.5 * (inner + inner.transpose())).eval();
  inner.diagonal().array() += 1.0;
  inner_llt_.compute(inner);
  if (inner_llt_.info() != Eigen::Success) throw SingularInnerSolve("LowRankKalman: inner system not PD");
  const Vector diag = Matrix(inner_llt_.matrixL()).diagonal();
  if (diag.minCoeff() <= 1e-300 || !diag.allFinite())
    throw SingularInnerSolve("LowRankKalman: inner Cholesky pivot vanished");
}

Matrix LowRankKalman::q_apply(const Matrix& z) const {
  if (q_diag_) return q_diag_->asDiagonal() * z;
  return q_llt_.solve(z);
}

Matrix LowRankKalman::innovation_solve(const Matrix& y) const {
  if (y.rows() != obs_dim()) throw DimensionMismatch("innovation_solve: wrong row count");
  if (obs_dim() == 0) return y;
  const Matrix qy = q_apply(y);
  return qy - qw_ * inner_llt_.solve(qw_.transpose() * y);
}

Matrix LowRankKalman::prior_apply(const Matrix& x) const {
  if (x.rows() != state_dim()) throw DimensionMismatch("prior_apply: wrong row count");
  return scaled_ * (scaled_.transpose() * x) + ctx_.additive_level * x;
}

Matrix LowRankKalman::posterior_apply(const Matrix& x) const {
  const Matrix cx = prior_apply(x);
  if (obs_dim() == 0) return cx;
  const Matrix hcx = ctx_.obs * cx;
  const Matrix z = innovation_solve(hcx);
  return cx - prior_apply(Matrix(ctx_.obs.transpose() * z));
}

Vector LowRankKalman::gain_apply(const Vector& y) const {
  if (obs_dim() == 0) return Vector::Zero(state_dim());
  const Matrix z = innovation_solve(y);
  return prior_apply(Matrix(ctx_.obs.transpose() * z)).col(0);
}

SymMatrix LowRankKalman::prior_dense() const {
  return SymMatrix(prior_apply(Matrix::Identity(state_dim(), state_dim())));
}

SymMatrix LowRankKalman::posterior_dense() const {
  return SymMatrix(posterior_apply(Matrix::Identity(state_dim(), state_dim())));
}

Vector gain_apply_woodbury(const KalmanGainContext& ctx, const Vector& y) {
  return LowRankKalman(ctx).gain_apply(y);
}

}  // namespace enkf

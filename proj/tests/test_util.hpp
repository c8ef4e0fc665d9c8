#pragma once

#include <cstdint>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "enkf/psd_linalg.hpp"
#include "enkf/rng.hpp"

namespace enkf::testing {

inline CounterRng make_rng(std::uint64_t case_id, std::uint64_t instance = 0) {
  return CounterRng(substream_key(case_id, StreamTag::kTestData, instance));
}

inline Matrix random_matrix(CounterRng& rng, Index rows, Index cols) { return rng.normal_matrix(rows, cols); }

// Wishart-like PSD of the given rank, scaled to O(1) entries.
inline SymMatrix random_psd(CounterRng& rng, Index d, Index rank) {
  const Matrix f = rng.normal_matrix(d, rank);
  return SymMatrix(f * f.transpose() / static_cast<double>(std::max<Index>(rank, 1)));
}

// PD with spectrum bounded below by `floor`.
inline SymMatrix random_pd(CounterRng& rng, Index d, double floor = 0.1) {
  return random_psd(rng, d, d).plus_identity(floor);
}

inline SymMatrix random_symmetric(CounterRng& rng, Index d) {
  const Matrix m = rng.normal_matrix(d, d);
  return SymMatrix(m + m.transpose());
}

inline SparseMatrix to_sparse(const Matrix& m) { return m.sparseView(0.0, 0.0); }

inline double rel_diff(const Matrix& a, const Matrix& b) {
  const double scale = std::max(1.0, b.norm());
  return (a - b).norm() / scale;
}

// Largest eigenvalue of b - a; <= slack means a >= b - slack I.
inline double excess(const SymMatrix& a, const SymMatrix& b) { return max_eigenvalue(a - b); }

}  // namespace enkf::testing

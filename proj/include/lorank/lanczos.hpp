#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>

#include "lorank/rng.hpp"
#include "lorank/types.hpp"

namespace lorank {

struct ExtremalEigenpair {
  double smallest = 0.0;
  double largest = 0.0;
  double residual = 0.0;  // |H x - theta x| for the smallest Ritz pair
  int iterations = 0;
  bool dense = false;
};

// Lanczos with full reorthogonalization on an implicit symmetric operator.
// Stops once the smallest Ritz pair's residual estimate drops below
// tol * |largest Ritz value| or the Krylov space is exhausted.
template <typename Scalar>
ExtremalEigenpair lanczos_extremal(
    const std::function<Vector<Scalar>(const Vector<Scalar>&)>& apply, Index dim,
    std::uint64_t seed, int max_iter = 300, double tol = 1e-10) {
  max_iter = static_cast<int>(std::min<Index>(max_iter, dim));
  Matrix<Scalar> basis(dim, max_iter + 1);
  Vector<Scalar> alpha(max_iter), beta(max_iter);
  Rng rng(seed, Stream::Fixture);
  Vector<Scalar> q = rng.normal_matrix<Scalar>(dim, 1);
  q.normalize();
  basis.col(0) = q;

  ExtremalEigenpair out;
  int k = 0;
  Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> tri;
  for (; k < max_iter; ++k) {
    Vector<Scalar> w = apply(basis.col(k));
    alpha(k) = basis.col(k).dot(w);
    // Two passes of classical Gram-Schmidt against the whole basis.
    for (int pass = 0; pass < 2; ++pass)
      w -= basis.leftCols(k + 1) * (basis.leftCols(k + 1).transpose() * w);
    beta(k) = w.norm();

    Matrix<Scalar> T = Matrix<Scalar>::Zero(k + 1, k + 1);
    T.diagonal() = alpha.head(k + 1);
    for (int i = 0; i < k; ++i) T(i, i + 1) = T(i + 1, i) = beta(i);
    tri.compute(T);
    const double lo = double(tri.eigenvalues()(0));
    const double hi = double(tri.eigenvalues()(k));
    const double resid_est = std::abs(double(beta(k) * tri.eigenvectors()(k, 0)));
    out.smallest = lo;
    out.largest = hi;
    out.iterations = k + 1;
    const double scale = std::max(std::abs(lo), std::abs(hi));
    if (beta(k) <= Scalar(1e-14) * std::max(1.0, scale) || resid_est <= tol * std::max(1.0, scale)) {
      ++k;
      break;
    }
    basis.col(k + 1) = w / beta(k);
  }
  const Vector<Scalar> x = basis.leftCols(k) * tri.eigenvectors().col(0);
  out.residual = double((apply(x) - Scalar(out.smallest) * x).norm());
  return out;
}

}  // namespace lorank

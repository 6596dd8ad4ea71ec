#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "lorank/caps.hpp"
#include "lorank/errors.hpp"
#include "lorank/feature_operator.hpp"
#include "lorank/rng.hpp"
#include "lorank/types.hpp"

namespace lorank {

template <typename Scalar>
struct ProblemInstance {
  std::shared_ptr<const FeatureOperator<Scalar>> op;
  Vector<Scalar> baseline;        // f0, length KN
  Vector<Scalar> labels;          // y, length KN
  Matrix<Scalar> planted_target;  // Delta*, m x n
  int target_rank = 0;
  Vector<Scalar> noise;           // xi as drawn (zero for CE)
  Scalar noise_std = Scalar(0);
  LossKind loss_kind = LossKind::MSE;
  std::uint64_t seed = 0;

  const FeatureOperator<Scalar>& features() const { return *op; }
  int m() const { return op->rows(); }
  int n() const { return op->cols(); }
  int K() const { return op->outputs(); }
  int N() const { return op->samples(); }
};

inline void check_operator_size(Index m, Index n, Index K, Index N, std::size_t scalar_bytes,
                                const Caps& caps) {
  const long double bytes = static_cast<long double>(m) * n * K * N * scalar_bytes;
  if (bytes > static_cast<long double>(caps.max_operator_bytes)) {
    fail(ErrorClass::CapExceeded,
         "operator m*n*K*N = " + std::to_string(m) + "*" + std::to_string(n) + "*" +
             std::to_string(K) + "*" + std::to_string(N) + " needs " +
             std::to_string(static_cast<unsigned long long>(bytes)) +
             " bytes, above the cap of " + std::to_string(caps.max_operator_bytes) +
             " bytes; reduce dimensions or raise the memory cap");
  }
}

// Gaussian-iid operator with unit entry variance, so Var(<G, Delta>) = 1 for
// any unit-Frobenius Delta.
template <typename Scalar = double>
FeatureOperator<Scalar> gen_operator(int m, int n, int K, int N, std::uint64_t seed,
                                     const Caps& caps = {}) {
  require(m >= 1 && n >= 1 && K >= 1 && N >= 1, ErrorClass::Domain,
          "gen_operator requires m, n, K, N >= 1");
  check_operator_size(m, n, K, N, sizeof(Scalar), caps);
  Rng rng(seed, Stream::Operator);
  RowMajorMatrix<Scalar> jac(Index(K) * N, Index(m) * n);
  Scalar* data = jac.data();
  for (Index i = 0; i < jac.size(); ++i) data[i] = static_cast<Scalar>(rng.normal());
  return FeatureOperator<Scalar>(m, n, K, N, std::move(jac), Scalar(1));
}

// One-hot of the per-sample argmax; ties go to the lower class index.
template <typename Scalar>
Vector<Scalar> argmax_one_hot(const Vector<Scalar>& logits, int K) {
  const Index samples = logits.size() / K;
  Vector<Scalar> y = Vector<Scalar>::Zero(logits.size());
  for (Index i = 0; i < samples; ++i) {
    Index best = 0;
    for (Index j = 1; j < K; ++j)
      if (logits(i * K + j) > logits(i * K + best)) best = j;
    y(i * K + best) = Scalar(1);
  }
  return y;
}

template <typename Scalar>
ProblemInstance<Scalar> gen_instance(std::shared_ptr<const FeatureOperator<Scalar>> op,
                                     int target_rank, Scalar noise_std, LossKind kind,
                                     std::uint64_t seed) {
  const int m = op->rows();
  const int n = op->cols();
  require(target_rank >= 1 && target_rank <= std::min(m, n), ErrorClass::Domain,
          "target_rank " + std::to_string(target_rank) + " outside [1, " +
              std::to_string(std::min(m, n)) + "]");
  require(noise_std >= Scalar(0), ErrorClass::Domain, "noise_std must be non-negative");

  Rng target_rng(seed, Stream::Target);
  const Matrix<Scalar> left = target_rng.orthonormal_columns<Scalar>(m, target_rank);
  const Matrix<Scalar> right = target_rng.orthonormal_columns<Scalar>(n, target_rank);

  ProblemInstance<Scalar> inst;
  inst.op = op;
  inst.target_rank = target_rank;
  inst.planted_target = left * right.transpose() / std::sqrt(Scalar(target_rank));
  inst.baseline = Vector<Scalar>::Zero(op->size());
  inst.noise_std = noise_std;
  inst.loss_kind = kind;
  inst.seed = seed;

  const Vector<Scalar> clean = op->apply(inst.planted_target);
  if (kind == LossKind::MSE) {
    Rng noise_rng(seed, Stream::Noise);
    inst.noise = noise_rng.normal_matrix<Scalar>(op->size(), 1, noise_std);
    inst.labels = clean + inst.noise;
  } else {
    inst.noise = Vector<Scalar>::Zero(op->size());
    inst.labels = argmax_one_hot<Scalar>(clean, op->outputs());
  }
  return inst;
}

template <typename Scalar>
ProblemInstance<Scalar> gen_instance(const FeatureOperator<Scalar>& op, int target_rank,
                                     Scalar noise_std, LossKind kind, std::uint64_t seed) {
  return gen_instance(std::make_shared<const FeatureOperator<Scalar>>(op), target_rank,
                      noise_std, kind, seed);
}

template <typename Scalar>
struct Projection {
  Matrix<Scalar> left;   // D x m, orthonormal rows
  Matrix<Scalar> right;  // D x n, orthonormal rows
};

template <typename Scalar>
Projection<Scalar> draw_projection(int m, int n, int D, std::uint64_t seed) {
  require(D >= 1 && D <= std::min(m, n), ErrorClass::Domain,
          "projection dimension D=" + std::to_string(D) + " outside [1, " +
              std::to_string(std::min(m, n)) + "]");
  Rng left_rng(seed, Stream::ProjectionLeft);
  Rng right_rng(seed, Stream::ProjectionRight);
  return {left_rng.orthonormal_columns<Scalar>(m, D).transpose(),
          right_rng.orthonormal_columns<Scalar>(n, D).transpose()};
}

// Slices G' = P_L G P_R^T with Haar-random orthonormal-row projections.
template <typename Scalar>
FeatureOperator<Scalar> project_operator(const FeatureOperator<Scalar>& op, int D,
                                         std::uint64_t seed) {
  const Projection<Scalar> proj = draw_projection<Scalar>(op.rows(), op.cols(), D, seed);
  RowMajorMatrix<Scalar> jac(op.size(), Index(D) * D);
  for (Index a = 0; a < op.size(); ++a) {
    RowMajorMatrix<Scalar> g = proj.left * op.slice(a) * proj.right.transpose();
    jac.row(a) = Eigen::Map<const Vector<Scalar>>(g.data(), g.size()).transpose();
  }
  return FeatureOperator<Scalar>(D, D, op.outputs(), op.samples(), std::move(jac),
                                 op.entry_scale());
}

}  // namespace lorank

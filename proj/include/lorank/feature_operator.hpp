#pragma once

#include <cmath>
#include <string>

#include "lorank/errors.hpp"
#include "lorank/types.hpp"

namespace lorank {

// The linear map A: R^{m x n} -> R^{KN}. Row a = sample * K + output of the
// stored matrix is the row-major flattening of the Jacobian slice
// G^{(output)}(X_sample), which is also the on-disk layout.
template <typename Scalar>
class FeatureOperator {
 public:
  using Slice = Eigen::Map<const RowMajorMatrix<Scalar>>;

  FeatureOperator() = default;

  FeatureOperator(int m, int n, int outputs, int samples,
                  RowMajorMatrix<Scalar> jacobians, Scalar entry_scale = Scalar(1))
      : m_(m), n_(n), outputs_(outputs), samples_(samples),
        entry_scale_(entry_scale), jacobians_(std::move(jacobians)) {
    require(m >= 1 && n >= 1 && outputs >= 1 && samples >= 1, ErrorClass::Domain,
            "operator dimensions must be positive");
    require(jacobians_.rows() == Index(outputs) * samples &&
                jacobians_.cols() == Index(m) * n,
            ErrorClass::DimensionMismatch,
            "jacobian stack is " + std::to_string(jacobians_.rows()) + "x" +
                std::to_string(jacobians_.cols()) + ", expected " +
                std::to_string(Index(outputs) * samples) + "x" +
                std::to_string(Index(m) * n));
    require(jacobians_.allFinite(), ErrorClass::Domain, "operator has non-finite entries");
  }

  int rows() const { return m_; }
  int cols() const { return n_; }
  int outputs() const { return outputs_; }
  int samples() const { return samples_; }
  Index size() const { return Index(outputs_) * samples_; }
  Scalar entry_scale() const { return entry_scale_; }

  const RowMajorMatrix<Scalar>& jacobians() const { return jacobians_; }

  Index coordinate(int sample, int output) const { return Index(sample) * outputs_ + output; }

  Slice slice(Index coord) const {
    return Slice(jacobians_.row(coord).data(), m_, n_);
  }
  Slice slice(int sample, int output) const { return slice(coordinate(sample, output)); }

  // A(delta): the KN inner products <G_a, delta>.
  template <typename Derived>
  Vector<Scalar> apply(const Eigen::MatrixBase<Derived>& delta) const {
    check_shape(delta.rows(), delta.cols());
    RowMajorMatrix<Scalar> flat = delta;
    return jacobians_ * Eigen::Map<const Vector<Scalar>>(flat.data(), flat.size());
  }

  // A*(w) = sum_a w_a G_a.
  template <typename Derived>
  Matrix<Scalar> adjoint(const Eigen::MatrixBase<Derived>& w) const {
    require(w.size() == size(), ErrorClass::DimensionMismatch,
            "adjoint input has length " + std::to_string(w.size()) + ", expected " +
                std::to_string(size()));
    RowMajorMatrix<Scalar> flat(m_, n_);
    Eigen::Map<Vector<Scalar>>(flat.data(), flat.size()).noalias() =
        jacobians_.transpose() * w;
    return flat;
  }

  // Operator over the samples [first, first + count).
  FeatureOperator sample_range(int first, int count) const {
    require(first >= 0 && count >= 1 && first + count <= samples_, ErrorClass::Domain,
            "sample range out of bounds");
    return FeatureOperator(m_, n_, outputs_, count,
                           jacobians_.middleRows(Index(first) * outputs_, Index(count) * outputs_),
                           entry_scale_);
  }

  bool operator==(const FeatureOperator& other) const {
    return m_ == other.m_ && n_ == other.n_ && outputs_ == other.outputs_ &&
           samples_ == other.samples_ && entry_scale_ == other.entry_scale_ &&
           jacobians_ == other.jacobians_;
  }

 private:
  void check_shape(Index r, Index c) const {
    require(r == m_ && c == n_, ErrorClass::DimensionMismatch,
            "update is " + std::to_string(r) + "x" + std::to_string(c) +
                ", operator expects " + std::to_string(m_) + "x" + std::to_string(n_));
  }

  int m_ = 0;
  int n_ = 0;
  int outputs_ = 0;
  int samples_ = 0;
  Scalar entry_scale_ = Scalar(1);
  RowMajorMatrix<Scalar> jacobians_;
};

}  // namespace lorank

#pragma once

#include <cmath>
#include <limits>
#include <string>

#include "lorank/caps.hpp"
#include "lorank/errors.hpp"
#include "lorank/synthetic.hpp"
#include "lorank/types.hpp"

namespace lorank {

// Factored update delta = u v^T with weight decay lambda.
template <typename Scalar>
struct LoraPoint {
  Matrix<Scalar> u;  // m x r
  Matrix<Scalar> v;  // n x r
  Scalar lambda = Scalar(0);

  int rank() const { return static_cast<int>(u.cols()); }
  Matrix<Scalar> product() const { return u * v.transpose(); }

  static LoraPoint zeros(int m, int n, int r, Scalar lambda) {
    return {Matrix<Scalar>::Zero(m, r), Matrix<Scalar>::Zero(n, r), lambda};
  }
};

template <typename Scalar>
struct LossReport {
  Scalar data_loss = Scalar(0);
  Scalar reg_loss = Scalar(0);
  Scalar total = Scalar(0);
  LossKind kind = LossKind::MSE;
};

// Parameter-space direction or gradient, in the [vec(u); vec(v)] layout.
template <typename Scalar>
struct FactorPair {
  Matrix<Scalar> du;
  Matrix<Scalar> dv;

  Scalar squared_norm() const { return du.squaredNorm() + dv.squaredNorm(); }
  Scalar norm() const { return std::sqrt(squared_norm()); }

  Vector<Scalar> flat() const {
    Vector<Scalar> out(du.size() + dv.size());
    out << Eigen::Map<const Vector<Scalar>>(du.data(), du.size()),
        Eigen::Map<const Vector<Scalar>>(dv.data(), dv.size());
    return out;
  }

  static FactorPair unflatten(const Vector<Scalar>& x, Index m, Index n, Index r) {
    require(x.size() == r * (m + n), ErrorClass::DimensionMismatch,
            "flat direction has length " + std::to_string(x.size()) + ", expected " +
                std::to_string(r * (m + n)));
    return {Eigen::Map<const Matrix<Scalar>>(x.data(), m, r),
            Eigen::Map<const Matrix<Scalar>>(x.data() + m * r, n, r)};
  }
};

template <typename Scalar>
using FactorGradient = FactorPair<Scalar>;

namespace detail {

template <typename Scalar>
void check_point(const ProblemInstance<Scalar>& inst, const LoraPoint<Scalar>& p) {
  const int m = inst.m(), n = inst.n();
  require(p.u.rows() == m && p.v.rows() == n && p.u.cols() == p.v.cols(),
          ErrorClass::DimensionMismatch,
          "point factors are " + std::to_string(p.u.rows()) + "x" + std::to_string(p.u.cols()) +
              " and " + std::to_string(p.v.rows()) + "x" + std::to_string(p.v.cols()) +
              " for an operator on " + std::to_string(m) + "x" + std::to_string(n));
  require(p.rank() >= 1 && p.rank() <= std::min(m, n), ErrorClass::Domain,
          "rank " + std::to_string(p.rank()) + " outside [1, min(m, n)]");
  require(p.lambda >= Scalar(0), ErrorClass::Domain, "lambda must be non-negative");
}

template <typename Scalar>
void check_one_hot(const Vector<Scalar>& labels, int K) {
  for (Index i = 0; i < labels.size() / K; ++i) {
    Scalar sum = 0;
    for (Index j = 0; j < K; ++j) {
      const Scalar y = labels(i * K + j);
      require(y == Scalar(0) || y == Scalar(1), ErrorClass::Domain,
              "cross-entropy labels must be one-hot");
      sum += y;
    }
    require(sum == Scalar(1), ErrorClass::Domain, "cross-entropy labels must be one-hot");
  }
}

// Per-sample softmax over the K logits, computed after subtracting the max.
template <typename Scalar>
Vector<Scalar> softmax(const Vector<Scalar>& logits, int K) {
  require(logits.allFinite(), ErrorClass::Domain, "non-finite logits");
  Vector<Scalar> p(logits.size());
  for (Index i = 0; i < logits.size() / K; ++i) {
    auto z = logits.segment(i * K, K);
    const Scalar mx = z.maxCoeff();
    auto e = p.segment(i * K, K);
    e = (z.array() - mx).exp().matrix();
    e /= e.sum();
  }
  return p;
}

template <typename Scalar>
Scalar cross_entropy(const Vector<Scalar>& logits, const Vector<Scalar>& labels, int K) {
  require(logits.allFinite(), ErrorClass::Domain, "non-finite logits");
  Scalar total = 0;
  for (Index i = 0; i < logits.size() / K; ++i) {
    auto z = logits.segment(i * K, K);
    const Scalar mx = z.maxCoeff();
    const Scalar lse = mx + std::log((z.array() - mx).exp().sum());
    for (Index j = 0; j < K; ++j) total -= labels(i * K + j) * (z(j) - lse);
  }
  return total;
}

template <typename Scalar>
Scalar data_loss(const ProblemInstance<Scalar>& inst, const Vector<Scalar>& predictions,
                 LossKind kind) {
  const Scalar N = Scalar(inst.N());
  if (kind == LossKind::MSE) return Scalar(0.5) * (predictions - inst.labels).squaredNorm() / N;
  return cross_entropy<Scalar>(predictions, inst.labels, inst.K()) / N;
}

// d(loss)/d(prediction) up to the 1/N factor: yhat - y for MSE, p - y for CE.
template <typename Scalar>
Vector<Scalar> output_residual(const ProblemInstance<Scalar>& inst,
                               const Vector<Scalar>& predictions, LossKind kind) {
  if (kind == LossKind::MSE) return predictions - inst.labels;
  return softmax<Scalar>(predictions, inst.K()) - inst.labels;
}

// Applies the per-sample output curvature: identity for MSE,
// diag(p) - p p^T for CE.
template <typename Scalar>
Vector<Scalar> output_curvature(const ProblemInstance<Scalar>& inst,
                                const Vector<Scalar>& predictions, const Vector<Scalar>& z,
                                LossKind kind) {
  if (kind == LossKind::MSE) return z;
  const int K = inst.K();
  const Vector<Scalar> p = softmax<Scalar>(predictions, K);
  Vector<Scalar> out(z.size());
  for (Index i = 0; i < z.size() / K; ++i) {
    auto pi = p.segment(i * K, K);
    auto zi = z.segment(i * K, K);
    out.segment(i * K, K) = pi.cwiseProduct(zi) - pi * pi.dot(zi);
  }
  return out;
}

template <typename Scalar>
void check_kind(const ProblemInstance<Scalar>& inst, LossKind kind) {
  if (kind == LossKind::CE) check_one_hot(inst.labels, inst.K());
}

}  // namespace detail

template <typename Scalar>
Vector<Scalar> predict(const ProblemInstance<Scalar>& inst, const LoraPoint<Scalar>& p) {
  detail::check_point(inst, p);
  return inst.baseline + inst.features().apply(p.u * p.v.transpose());
}

template <typename Scalar>
Scalar regularization(const LoraPoint<Scalar>& p) {
  return Scalar(0.5) * p.lambda * (p.u.squaredNorm() + p.v.squaredNorm());
}

template <typename Scalar>
LossReport<Scalar> loss(const ProblemInstance<Scalar>& inst, const LoraPoint<Scalar>& p,
                        LossKind kind) {
  detail::check_kind(inst, kind);
  LossReport<Scalar> out;
  out.kind = kind;
  out.data_loss = detail::data_loss(inst, predict(inst, p), kind);
  out.reg_loss = regularization(p);
  out.total = out.data_loss + out.reg_loss;
  return out;
}

// R = (1/N) A*(yhat - y) for MSE, (1/N) A*(softmax - y) for CE.
template <typename Scalar>
Matrix<Scalar> residual_matrix(const ProblemInstance<Scalar>& inst, const LoraPoint<Scalar>& p,
                               LossKind kind) {
  detail::check_kind(inst, kind);
  const Vector<Scalar> e = detail::output_residual(inst, predict(inst, p), kind);
  return inst.features().adjoint(e) / Scalar(inst.N());
}

// Everything one descent step needs, computed with a single pass over A.
template <typename Scalar>
struct Evaluation {
  LossReport<Scalar> loss;
  Vector<Scalar> predictions;
  Matrix<Scalar> residual;  // R, m x n
  FactorGradient<Scalar> gradient;
};

template <typename Scalar>
Evaluation<Scalar> evaluate(const ProblemInstance<Scalar>& inst, const LoraPoint<Scalar>& p,
                            LossKind kind) {
  detail::check_kind(inst, kind);
  Evaluation<Scalar> ev;
  ev.predictions = predict(inst, p);
  ev.loss.kind = kind;
  ev.loss.data_loss = detail::data_loss(inst, ev.predictions, kind);
  ev.loss.reg_loss = regularization(p);
  ev.loss.total = ev.loss.data_loss + ev.loss.reg_loss;
  ev.residual = inst.features().adjoint(detail::output_residual(inst, ev.predictions, kind)) /
                Scalar(inst.N());
  ev.gradient.du = ev.residual * p.v + p.lambda * p.u;
  ev.gradient.dv = ev.residual.transpose() * p.u + p.lambda * p.v;
  return ev;
}

// (R v + lambda u, R^T u + lambda v).
template <typename Scalar>
FactorGradient<Scalar> gradient(const ProblemInstance<Scalar>& inst, const LoraPoint<Scalar>& p,
                                LossKind kind) {
  return evaluate(inst, p, kind).gradient;
}

// Second directional derivative of the regularized loss along (du, dv):
// Gauss-Newton term + 2<R, du dv^T> + lambda (|du|^2 + |dv|^2).
template <typename Scalar>
Scalar hessian_quadratic_form(const ProblemInstance<Scalar>& inst, const LoraPoint<Scalar>& p,
                              const Matrix<Scalar>& du, const Matrix<Scalar>& dv,
                              LossKind kind) {
  detail::check_point(inst, p);
  require(du.rows() == p.u.rows() && du.cols() == p.u.cols() && dv.rows() == p.v.rows() &&
              dv.cols() == p.v.cols(),
          ErrorClass::DimensionMismatch, "direction shape does not match the point");
  detail::check_kind(inst, kind);
  const Scalar N = Scalar(inst.N());
  const Vector<Scalar> preds = predict(inst, p);
  const Vector<Scalar> z = inst.features().apply(du * p.v.transpose() + p.u * dv.transpose());
  const Scalar gauss_newton = z.dot(detail::output_curvature(inst, preds, z, kind)) / N;
  const Matrix<Scalar> R =
      inst.features().adjoint(detail::output_residual(inst, preds, kind)) / N;
  const Scalar cross = Scalar(2) * (R.cwiseProduct(du * dv.transpose())).sum();
  return gauss_newton + cross + p.lambda * (du.squaredNorm() + dv.squaredNorm());
}

template <typename Scalar>
Scalar hessian_quadratic_form(const ProblemInstance<Scalar>& inst, const LoraPoint<Scalar>& p,
                              const FactorPair<Scalar>& dir, LossKind kind) {
  return hessian_quadratic_form(inst, p, dir.du, dir.dv, kind);
}

// d(predictions)/d[vec(u); vec(v)], a KN x r(m+n) matrix.
template <typename Scalar>
Matrix<Scalar> prediction_jacobian(const ProblemInstance<Scalar>& inst,
                                   const LoraPoint<Scalar>& p) {
  detail::check_point(inst, p);
  const Index m = inst.m(), n = inst.n(), r = p.rank();
  const auto& op = inst.features();
  Matrix<Scalar> J(op.size(), r * (m + n));
  Matrix<Scalar> gv(m, r), gtu(n, r);
  for (Index a = 0; a < op.size(); ++a) {
    const auto G = op.slice(a);
    gv.noalias() = G * p.v;
    gtu.noalias() = G.transpose() * p.u;
    J.row(a).head(m * r) = Eigen::Map<const Vector<Scalar>>(gv.data(), m * r).transpose();
    J.row(a).tail(n * r) = Eigen::Map<const Vector<Scalar>>(gtu.data(), n * r).transpose();
  }
  return J;
}

// Dense Hessian in [vec(u); vec(v)] coordinates (column-major per factor).
template <typename Scalar>
Matrix<Scalar> assemble_hessian(const ProblemInstance<Scalar>& inst, const LoraPoint<Scalar>& p,
                                LossKind kind, const Caps& caps = {}) {
  detail::check_point(inst, p);
  detail::check_kind(inst, kind);
  const Index m = inst.m(), n = inst.n(), r = p.rank();
  const Index dim = r * (m + n);
  if (dim > caps.dense_hessian_dim) {
    fail(ErrorClass::CapExceeded,
         "Hessian dimension r(m+n) = " + std::to_string(dim) + " exceeds the dense cap " +
             std::to_string(caps.dense_hessian_dim) +
             "; use the quadratic form or the iterative extremal eigenvalue instead");
  }
  const Scalar N = Scalar(inst.N());
  const Vector<Scalar> preds = predict(inst, p);
  const Matrix<Scalar> J = prediction_jacobian(inst, p);

  Matrix<Scalar> H;
  if (kind == LossKind::MSE) {
    H.noalias() = J.transpose() * J / N;
  } else {
    const int K = inst.K();
    const Vector<Scalar> prob = detail::softmax<Scalar>(preds, K);
    Matrix<Scalar> SJ(J.rows(), J.cols());
    for (Index i = 0; i < J.rows() / K; ++i) {
      auto pi = prob.segment(i * K, K);
      Matrix<Scalar> S = pi.asDiagonal();
      S.noalias() -= pi * pi.transpose();
      SJ.middleRows(i * K, K).noalias() = S * J.middleRows(i * K, K);
    }
    H.noalias() = J.transpose() * SJ / N;
  }

  const Matrix<Scalar> R =
      inst.features().adjoint(detail::output_residual(inst, preds, kind)) / N;
  for (Index k = 0; k < r; ++k) {
    H.block(k * m, r * m + k * n, m, n) += R;
    H.block(r * m + k * n, k * m, n, m) += R.transpose();
  }
  H.diagonal().array() += p.lambda;
  return Scalar(0.5) * (H + H.transpose());
}

// H * d without forming H.
template <typename Scalar>
Vector<Scalar> hessian_vector_product(const ProblemInstance<Scalar>& inst,
                                      const LoraPoint<Scalar>& p, const Vector<Scalar>& d,
                                      LossKind kind) {
  detail::check_point(inst, p);
  detail::check_kind(inst, kind);
  const Index m = inst.m(), n = inst.n(), r = p.rank();
  const FactorPair<Scalar> dir = FactorPair<Scalar>::unflatten(d, m, n, r);
  const Scalar N = Scalar(inst.N());
  const Vector<Scalar> preds = predict(inst, p);
  const Vector<Scalar> z =
      inst.features().apply(dir.du * p.v.transpose() + p.u * dir.dv.transpose());
  const Matrix<Scalar> M =
      inst.features().adjoint(detail::output_curvature(inst, preds, z, kind)) / N;
  const Matrix<Scalar> R =
      inst.features().adjoint(detail::output_residual(inst, preds, kind)) / N;
  FactorPair<Scalar> out{M * p.v + R * dir.dv + p.lambda * dir.du,
                         M.transpose() * p.u + R.transpose() * dir.du + p.lambda * dir.dv};
  return out.flat();
}

}  // namespace lorank

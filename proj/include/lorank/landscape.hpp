#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lorank/caps.hpp"
#include "lorank/errors.hpp"
#include "lorank/lanczos.hpp"
#include "lorank/model.hpp"
#include "lorank/rng.hpp"

namespace lorank {

enum class Classification { GlobalMin, SpuriousSOSP, StrictSaddle, NotConverged };

std::string_view to_string(Classification c);
Classification parse_classification(std::string_view text);

// Analyzer tolerances. Every report carries the values it was produced with.
struct Tolerances {
  double grad_rel = 1e-8;   // grad_tol = grad_rel * (1 + |total loss|)
  double eig_rel = 1e-6;    // eig_tol = eig_rel * |H|_op
  double rank_rel = 1e-8;   // sigma counts iff > rank_rel * max(1, sigma_max)
  double gap_abs = 1e-6;
  double gap_rel = 1e-3;
  double certificate = 1e-6;
};

template <typename Scalar>
Scalar balancedness_residual(const LoraPoint<Scalar>& p) {
  return (p.u.transpose() * p.u - p.v.transpose() * p.v).norm();
}

template <typename Scalar>
struct SvdAlignment {
  Matrix<Scalar> left;    // U_u, m x r, orthonormal
  Matrix<Scalar> right;   // U_v, n x r, orthonormal
  Vector<Scalar> sigma;   // descending
  LoraPoint<Scalar> point;  // (U_u Sigma^{1/2}, U_v Sigma^{1/2}), same product
  int effective_rank = 0;
  Scalar reconstruction_error = Scalar(0);
};

// SVD of u v^T through the r x r core of the thin QR factors. Always succeeds;
// see svd_align for the rank-checked variant.
template <typename Scalar>
SvdAlignment<Scalar> gauge_fix(const LoraPoint<Scalar>& p, const Tolerances& tol = {}) {
  const Index m = p.u.rows(), n = p.v.rows(), r = p.rank();
  Eigen::HouseholderQR<Matrix<Scalar>> qu(p.u), qv(p.v);
  const Matrix<Scalar> Qu = qu.householderQ() * Matrix<Scalar>::Identity(m, r);
  const Matrix<Scalar> Qv = qv.householderQ() * Matrix<Scalar>::Identity(n, r);
  const Matrix<Scalar> Ru = qu.matrixQR().topRows(r).template triangularView<Eigen::Upper>();
  const Matrix<Scalar> Rv = qv.matrixQR().topRows(r).template triangularView<Eigen::Upper>();
  Eigen::JacobiSVD<Matrix<Scalar>> core(Ru * Rv.transpose(), Eigen::ComputeFullU | Eigen::ComputeFullV);

  SvdAlignment<Scalar> out;
  out.left = Qu * core.matrixU();
  out.right = Qv * core.matrixV();
  out.sigma = core.singularValues();
  const Scalar sigma_max = out.sigma.size() ? out.sigma(0) : Scalar(0);
  const Scalar cutoff = Scalar(tol.rank_rel) * std::max(Scalar(1), sigma_max);
  out.effective_rank = int((out.sigma.array() > cutoff).count());
  const Vector<Scalar> root = out.sigma.cwiseSqrt();
  out.point = {out.left * root.asDiagonal(), out.right * root.asDiagonal(), p.lambda};
  out.reconstruction_error =
      (out.left * out.sigma.asDiagonal() * out.right.transpose() - p.u * p.v.transpose()).norm();
  return out;
}

// Throws RankDeficientError carrying the effective rank when u v^T has fewer
// than r singular values above the rank tolerance.
template <typename Scalar>
SvdAlignment<Scalar> svd_align(const LoraPoint<Scalar>& p, const Tolerances& tol = {}) {
  SvdAlignment<Scalar> out = gauge_fix(p, tol);
  if (out.effective_rank < p.rank()) {
    throw RankDeficientError(out.effective_rank,
                             "u v^T has numerical rank " + std::to_string(out.effective_rank) +
                                 " < r = " + std::to_string(p.rank()));
  }
  return out;
}

// Columns spanning the orthogonal complement of the orthonormal columns of
// `basis`: QR of [basis | Gaussian completion].
template <typename Scalar>
Matrix<Scalar> orthonormal_complement(const Matrix<Scalar>& basis, std::uint64_t seed) {
  const Index rows = basis.rows(), k = basis.cols();
  if (k == rows) return Matrix<Scalar>(rows, 0);
  Rng rng(seed, Stream::Completion);
  Matrix<Scalar> stacked(rows, rows);
  stacked << basis, rng.normal_matrix<Scalar>(rows, rows - k);
  Eigen::HouseholderQR<Matrix<Scalar>> qr(stacked);
  const Matrix<Scalar> Q = qr.householderQ();
  return Q.rightCols(rows - k);
}

template <typename Scalar>
struct ResidualBlocks {
  Scalar r11_deviation = Scalar(0);  // |U_u^T R U_v + lambda I|_F
  Scalar r12_norm = Scalar(0);       // |U_u^T R U_v_perp|_F
  Scalar r21_norm = Scalar(0);       // |U_u_perp^T R U_v|_F
  Matrix<Scalar> r22;                // U_u_perp^T R U_v_perp
  Scalar sigma1_r22 = Scalar(0);
  Scalar residual_norm = Scalar(0);  // |R|_F
  Matrix<Scalar> left_perp;
  Matrix<Scalar> right_perp;
};

template <typename Scalar>
Scalar spectral_norm(const Matrix<Scalar>& A) {
  if (A.size() == 0) return Scalar(0);
  return Eigen::JacobiSVD<Matrix<Scalar>>(A).singularValues()(0);
}

// Block decomposition of R in the frames (U_u, U_u_perp) x (U_v, U_v_perp).
template <typename Scalar>
ResidualBlocks<Scalar> residual_blocks(const Matrix<Scalar>& R, const Matrix<Scalar>& left,
                                       const Matrix<Scalar>& right, Scalar lambda,
                                       std::uint64_t completion_seed = 0) {
  const Index r = left.cols();
  ResidualBlocks<Scalar> b;
  b.left_perp = orthonormal_complement(left, derive_seed(completion_seed, {1}));
  b.right_perp = orthonormal_complement(right, derive_seed(completion_seed, {2}));
  b.r11_deviation =
      (left.transpose() * R * right + lambda * Matrix<Scalar>::Identity(r, r)).norm();
  b.r12_norm = (left.transpose() * R * b.right_perp).norm();
  b.r21_norm = (b.left_perp.transpose() * R * right).norm();
  b.r22 = b.left_perp.transpose() * R * b.right_perp;
  b.sigma1_r22 = spectral_norm(b.r22);
  b.residual_norm = R.norm();
  return b;
}

template <typename Scalar>
ResidualBlocks<Scalar> residual_blocks(const ProblemInstance<Scalar>& inst,
                                       const LoraPoint<Scalar>& p, LossKind kind,
                                       const Tolerances& tol = {},
                                       std::uint64_t completion_seed = 0) {
  const SvdAlignment<Scalar> al = svd_align(p, tol);
  return residual_blocks(residual_matrix(inst, al.point, kind), al.left, al.right, p.lambda,
                         completion_seed);
}

// Spectrum of Q(Q, T) = lambda(|Q|^2 + |T|^2) + 2<R22, Q T^T> over
// Q in R^{(m-r) x r}, T in R^{(n-r) x r}: lambda +- sigma_i(R22), plus lambda
// for the |m - n| unpaired coordinates, each repeated r times. Ascending.
template <typename Scalar>
std::vector<double> q_spectrum(const Matrix<Scalar>& r22, Scalar lambda, int r) {
  const Index a = r22.rows(), b = r22.cols();
  std::vector<double> kernel;
  kernel.reserve(a + b);
  const Index paired = std::min(a, b);
  Vector<Scalar> sv = Vector<Scalar>::Zero(paired);
  if (paired > 0) sv = Eigen::JacobiSVD<Matrix<Scalar>>(r22).singularValues();
  for (Index i = 0; i < paired; ++i) {
    kernel.push_back(double(lambda + sv(i)));
    kernel.push_back(double(lambda - sv(i)));
  }
  for (Index i = 0; i < std::max(a, b) - paired; ++i) kernel.push_back(double(lambda));
  std::vector<double> out;
  out.reserve(kernel.size() * r);
  for (int k = 0; k < r; ++k) out.insert(out.end(), kernel.begin(), kernel.end());
  std::sort(out.begin(), out.end());
  return out;
}

// [[lambda I, R22], [R22^T, lambda I]].
template <typename Scalar>
Matrix<Scalar> q_block_kernel(const Matrix<Scalar>& r22, Scalar lambda) {
  const Index a = r22.rows(), b = r22.cols();
  Matrix<Scalar> M = lambda * Matrix<Scalar>::Identity(a + b, a + b);
  M.topRightCorner(a, b) = r22;
  M.bottomLeftCorner(b, a) = r22.transpose();
  return M;
}

// The three terms of the Hessian form at a balanced rank-r critical point.
template <typename Scalar>
struct HessianDecomposition {
  Scalar data_fit = Scalar(0);  // (1/N) |A(V)|^2 (Gauss-Newton term for CE)
  Scalar gauge = Scalar(0);     // lambda |P - S|^2
  Scalar cross = Scalar(0);     // Q(Q, T)
  Scalar total() const { return data_fit + gauge + cross; }
};

template <typename Scalar>
HessianDecomposition<Scalar> hessian_decomposition(const ProblemInstance<Scalar>& inst,
                                                   const LoraPoint<Scalar>& p,
                                                   const Matrix<Scalar>& du,
                                                   const Matrix<Scalar>& dv, LossKind kind,
                                                   const Tolerances& tol = {}) {
  const SvdAlignment<Scalar> al = svd_align(p, tol);
  const ResidualBlocks<Scalar> blocks =
      residual_blocks(residual_matrix(inst, p, kind), al.left, al.right, p.lambda);
  const Matrix<Scalar> P = al.left.transpose() * du;
  const Matrix<Scalar> Q = blocks.left_perp.transpose() * du;
  const Matrix<Scalar> S = al.right.transpose() * dv;
  const Matrix<Scalar> T = blocks.right_perp.transpose() * dv;

  const Vector<Scalar> preds = predict(inst, p);
  const Vector<Scalar> z = inst.features().apply(du * p.v.transpose() + p.u * dv.transpose());
  HessianDecomposition<Scalar> out;
  out.data_fit = z.dot(detail::output_curvature(inst, preds, z, kind)) / Scalar(inst.N());
  out.gauge = p.lambda * (P - S).squaredNorm();
  out.cross = p.lambda * (Q.squaredNorm() + T.squaredNorm()) +
              Scalar(2) * (blocks.r22.cwiseProduct(Q * T.transpose())).sum();
  return out;
}

// Smallest Hessian eigenvalue: dense eigendecomposition within the cap,
// otherwise Lanczos on Hessian-vector products.
template <typename Scalar>
ExtremalEigenpair min_hessian_eig(const ProblemInstance<Scalar>& inst,
                                  const LoraPoint<Scalar>& p, LossKind kind,
                                  const Caps& caps = {}, std::uint64_t seed = 0) {
  const Index dim = Index(p.rank()) * (inst.m() + inst.n());
  if (dim <= caps.dense_hessian_dim) {
    const Matrix<Scalar> H = assemble_hessian(inst, p, kind, caps);
    Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(H, Eigen::EigenvaluesOnly);
    ExtremalEigenpair out;
    out.smallest = double(es.eigenvalues()(0));
    out.largest = double(es.eigenvalues()(dim - 1));
    out.dense = true;
    return out;
  }
  return lanczos_extremal<Scalar>(
      [&](const Vector<Scalar>& x) { return hessian_vector_product(inst, p, x, kind); }, dim,
      seed, 400, 1e-10);
}

struct CertificateReport {
  double lambda = 0.0;
  double op_norm_r = 0.0;
  bool op_norm_ok = false;
  double u0t_w = 0.0;        // |U0^T W|_F
  double w_v0 = 0.0;         // |W V0|_F
  double w_op_excess = 0.0;  // max(0, |W|_op - 1)
  int effective_rank = 0;
  bool certified_global = false;
  std::string advisory;
};

// Subgradient certificate for the nuclear-norm relaxation at a rank-deficient
// point: |R|_op <= lambda and W = -R/lambda - U0 V0^T in the subdifferential.
template <typename Scalar>
CertificateReport nuclear_certificate(const ProblemInstance<Scalar>& inst,
                                      const LoraPoint<Scalar>& p, LossKind kind,
                                      const Tolerances& tol = {}) {
  CertificateReport c;
  c.lambda = double(p.lambda);
  const SvdAlignment<Scalar> al = gauge_fix(p, tol);
  c.effective_rank = al.effective_rank;
  if (al.effective_rank >= p.rank())
    c.advisory = "point is not rank-deficient; the certificate targets rank-deficient SOSPs only";
  const Matrix<Scalar> R = residual_matrix(inst, p, kind);
  c.op_norm_r = double(spectral_norm(R));
  c.op_norm_ok = c.op_norm_r <= c.lambda * (1.0 + tol.certificate);
  if (p.lambda <= Scalar(0)) {
    c.advisory = "lambda = 0: no nuclear-norm certificate exists";
    return c;
  }
  const Index s = al.effective_rank;
  const Matrix<Scalar> U0 = al.left.leftCols(s);
  const Matrix<Scalar> V0 = al.right.leftCols(s);
  const Matrix<Scalar> W = -R / p.lambda - U0 * V0.transpose();
  c.u0t_w = double((U0.transpose() * W).norm());
  c.w_v0 = double((W * V0).norm());
  c.w_op_excess = std::max(0.0, double(spectral_norm(W)) - 1.0);
  c.certified_global = c.op_norm_ok && c.u0t_w <= tol.certificate &&
                       c.w_v0 <= tol.certificate && c.w_op_excess <= tol.certificate;
  return c;
}

template <typename Scalar>
struct TangentBasis {
  Index m = 0, n = 0;
  Matrix<Scalar> left, right, left_perp, right_perp;

  Index dimension() const {
    const Index r = left.cols();
    return r * (m + n) - r * r;
  }
  // Ordering: u_i v_j^T (i, j < r), then u_perp_p v_j^T, then u_i v_perp_q^T.
  Matrix<Scalar> element(Index idx) const {
    const Index r = left.cols();
    if (idx < r * r) return left.col(idx % r) * right.col(idx / r).transpose();
    idx -= r * r;
    const Index mp = m - r;
    if (idx < mp * r) return left_perp.col(idx % mp) * right.col(idx / mp).transpose();
    idx -= mp * r;
    return left.col(idx % r) * right_perp.col(idx / r).transpose();
  }
};

// Frobenius-orthonormal basis of {du v^T + u dv^T}, dimension r(m+n) - r^2.
template <typename Scalar>
TangentBasis<Scalar> tangent_basis(const LoraPoint<Scalar>& p, const Tolerances& tol = {},
                                   std::uint64_t completion_seed = 0) {
  const SvdAlignment<Scalar> al = svd_align(p, tol);
  TangentBasis<Scalar> t;
  t.m = p.u.rows();
  t.n = p.v.rows();
  t.left = al.left;
  t.right = al.right;
  t.left_perp = orthonormal_complement(al.left, derive_seed(completion_seed, {1}));
  t.right_perp = orthonormal_complement(al.right, derive_seed(completion_seed, {2}));
  return t;
}

// KN x dim(T) matrix of A applied to the tangent basis, in basis order.
template <typename Scalar>
Matrix<Scalar> tangent_operator(const FeatureOperator<Scalar>& op, const TangentBasis<Scalar>& t) {
  const Index r = t.left.cols(), mp = t.m - r;
  Matrix<Scalar> out(op.size(), t.dimension());
  Matrix<Scalar> lg(r, t.n), gr(t.m, r);
  for (Index a = 0; a < op.size(); ++a) {
    const auto G = op.slice(a);
    lg.noalias() = t.left.transpose() * G;
    gr.noalias() = G * t.right;
    const Matrix<Scalar> core = lg * t.right;
    const Matrix<Scalar> lower = t.left_perp.transpose() * gr;
    const Matrix<Scalar> side = lg * t.right_perp;
    Index col = 0;
    for (Index j = 0; j < r; ++j)
      for (Index i = 0; i < r; ++i) out(a, col++) = core(i, j);
    for (Index j = 0; j < r; ++j)
      for (Index i = 0; i < mp; ++i) out(a, col++) = lower(i, j);
    for (Index q = 0; q < t.n - r; ++q)
      for (Index i = 0; i < r; ++i) out(a, col++) = side(i, q);
  }
  return out;
}

struct TangentSpectrum {
  std::vector<double> singular_values;  // descending
  double smallest_nonzero = 0.0;
  Index nonzero_count = 0;
  Index tangent_dim = 0;
  Index targets = 0;  // KN
  double rho() const { return double(tangent_dim) / double(targets); }
};

template <typename Scalar>
TangentSpectrum tangent_operator_spectrum(const ProblemInstance<Scalar>& inst,
                                          const LoraPoint<Scalar>& p, const Caps& caps = {},
                                          const Tolerances& tol = {}) {
  const TangentBasis<Scalar> t = tangent_basis(p, tol);
  require(t.dimension() <= caps.dense_tangent_dim, ErrorClass::CapExceeded,
          "tangent dimension " + std::to_string(t.dimension()) + " exceeds the dense cap " +
              std::to_string(caps.dense_tangent_dim));
  const Matrix<Scalar> AT = tangent_operator(inst.features(), t);
  const Vector<Scalar> sv = Eigen::BDCSVD<Matrix<Scalar>>(AT).singularValues();
  TangentSpectrum out;
  out.tangent_dim = t.dimension();
  out.targets = inst.features().size();
  const double cutoff =
      sv.size() ? double(sv(0)) * 1e-10 * double(std::max(AT.rows(), AT.cols())) : 0.0;
  for (Index i = 0; i < sv.size(); ++i) {
    out.singular_values.push_back(double(sv(i)));
    if (double(sv(i)) > cutoff) {
      ++out.nonzero_count;
      out.smallest_nonzero = double(sv(i));
    }
  }
  return out;
}

// Lower Marchenko-Pastur edge alpha (1 - 1/sqrt(rho))^2, rho > 1.
template <typename Scalar>
Scalar mp_edge(Scalar rho, Scalar alpha = Scalar(1)) {
  require(rho > Scalar(1), ErrorClass::Domain, "mp_edge requires rho > 1");
  const Scalar gap = Scalar(1) - Scalar(1) / std::sqrt(rho);
  return alpha * gap * gap;
}

struct ClassifyInputs {
  bool run_ok = true;  // false when the run diverged or errored
  double grad_norm = 0.0;
  double total_loss = 0.0;
  double data_loss = 0.0;
  double min_eig = 0.0;
  double hessian_op_norm = 0.0;
  double global_floor = 0.0;
};

struct Thresholds {
  double grad_tol = 0.0;
  double eig_tol = 0.0;
  double gap_tol = 0.0;
};

inline Thresholds thresholds_for(const ClassifyInputs& in, const Tolerances& tol) {
  return {tol.grad_rel * (1.0 + std::abs(in.total_loss)), tol.eig_rel * in.hessian_op_norm,
          tol.gap_abs + tol.gap_rel * std::abs(in.global_floor)};
}

inline Classification classify(const ClassifyInputs& in, const Tolerances& tol = {}) {
  const Thresholds th = thresholds_for(in, tol);
  if (!in.run_ok || !(in.grad_norm <= th.grad_tol)) return Classification::NotConverged;
  if (in.min_eig < -th.eig_tol) return Classification::StrictSaddle;
  if (in.data_loss - in.global_floor > th.gap_tol) return Classification::SpuriousSOSP;
  return Classification::GlobalMin;
}

template <typename Scalar>
struct CriticalPointReport {
  double grad_norm = 0.0;
  double balance_residual = 0.0;  // of the point as given, before gauge fixing
  std::optional<ResidualBlocks<Scalar>> blocks;
  std::vector<double> q_eigs;
  ExtremalEigenpair hessian;
  LossReport<Scalar> loss;
  Classification classification = Classification::NotConverged;
  std::optional<CertificateReport> certificate;
  int effective_rank = 0;
  double global_floor = 0.0;
  Thresholds thresholds;
  Tolerances tolerances;
  LoraPoint<Scalar> aligned;
};

// Full analysis of a candidate critical point. The point is gauge-fixed to
// its balanced SVD representative first, so everything except
// balance_residual is invariant under (u, v) -> (u Q, v Q^{-T}).
template <typename Scalar>
CriticalPointReport<Scalar> analyze_point(const ProblemInstance<Scalar>& inst,
                                          const LoraPoint<Scalar>& p, LossKind kind,
                                          double global_floor, bool run_ok = true,
                                          const Tolerances& tol = {}, const Caps& caps = {}) {
  CriticalPointReport<Scalar> rep;
  rep.tolerances = tol;
  rep.global_floor = global_floor;
  rep.balance_residual = double(balancedness_residual(p));
  const SvdAlignment<Scalar> al = gauge_fix(p, tol);
  rep.aligned = al.point;
  rep.effective_rank = al.effective_rank;

  const Evaluation<Scalar> ev = evaluate(inst, al.point, kind);
  rep.loss = ev.loss;
  rep.grad_norm = double(ev.gradient.norm());
  rep.hessian = min_hessian_eig(inst, al.point, kind, caps);

  if (al.effective_rank == p.rank()) {
    rep.blocks = residual_blocks(ev.residual, al.left, al.right, p.lambda);
    rep.q_eigs = q_spectrum(rep.blocks->r22, p.lambda, p.rank());
  } else {
    rep.certificate = nuclear_certificate(inst, al.point, kind, tol);
  }

  ClassifyInputs in;
  in.run_ok = run_ok;
  in.grad_norm = rep.grad_norm;
  in.total_loss = double(ev.loss.total);
  in.data_loss = double(ev.loss.data_loss);
  in.min_eig = rep.hessian.smallest;
  in.hessian_op_norm = std::max(std::abs(rep.hessian.smallest), std::abs(rep.hessian.largest));
  in.global_floor = global_floor;
  rep.thresholds = thresholds_for(in, tol);
  rep.classification = classify(in, tol);
  return rep;
}

// min over Delta of |A(Delta) + f0 - y|^2 / 2N, via the range of A.
template <typename Scalar>
double least_squares_floor(const ProblemInstance<Scalar>& inst) {
  const auto& A = inst.features().jacobians();
  const Vector<Scalar> b = inst.labels - inst.baseline;
  const Matrix<Scalar> gram = A * A.transpose();
  Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(gram);
  const Scalar top = es.eigenvalues().cwiseAbs().maxCoeff();
  const Scalar cutoff = top * Scalar(1e-12) * Scalar(gram.rows());
  Vector<Scalar> resid = b;
  for (Index i = 0; i < gram.rows(); ++i) {
    if (es.eigenvalues()(i) > cutoff) {
      const auto q = es.eigenvectors().col(i);
      resid -= q * q.dot(b);
    }
  }
  return double(Scalar(0.5) * resid.squaredNorm() / Scalar(inst.N()));
}

}  // namespace lorank

#include <gtest/gtest.h>

#include <algorithm>

#include "helpers.hpp"
#include "lorank/landscape.hpp"
#include "lorank/optimizer.hpp"

using namespace lorank;
using namespace lorank::testing;

namespace {

// Random orthogonal frame [U | U_perp] of size d.
Matrix<double> random_frame(int d, std::uint64_t seed) {
  Rng rng(seed);
  return rng.orthonormal_columns<double>(d, d);
}

// MSE instance whose residual at `p` equals `R` exactly (requires KN >= mn).
ProblemInstance<double> instance_with_residual(const LoraPoint<double>& p, const Matrix<double>& R,
                                               int K, int N, std::uint64_t seed) {
  auto inst = make_instance(int(R.rows()), int(R.cols()), K, N, LossKind::MSE, seed);
  const auto& A = inst.features().jacobians();
  const RowMajorMatrix<double> Rrm = R;
  const Vector<double> rflat = Eigen::Map<const Vector<double>>(Rrm.data(), Rrm.size());
  // Solve A^T w = N * vec(R) in the least-norm sense.
  const Vector<double> w =
      Matrix<double>(A.transpose()).colPivHouseholderQr().solve(double(N) * rflat);
  inst.labels = inst.features().apply(p.product()) - w;
  return inst;
}

struct CriticalFixture {
  LoraPoint<double> point;
  Matrix<double> left, right, left_perp, right_perp, core;
  ProblemInstance<double> inst;
};

// Exact rank-r critical point with R = -lambda U V^T + U_perp M V_perp^T.
CriticalFixture critical_fixture(int m, int n, int r, double lambda, double sigma_scale,
                                 double m_scale, std::uint64_t seed) {
  CriticalFixture f;
  const Matrix<double> Fu = random_frame(m, seed), Fv = random_frame(n, seed + 1);
  f.left = Fu.leftCols(r);
  f.left_perp = Fu.rightCols(m - r);
  f.right = Fv.leftCols(r);
  f.right_perp = Fv.rightCols(n - r);
  Rng rng(seed + 2);
  f.core = rng.normal_matrix<double>(m - r, n - r);
  f.core *= m_scale / spectral_norm(f.core);
  Vector<double> sigma(r);
  for (int i = 0; i < r; ++i) sigma(i) = sigma_scale * (1.0 + 0.5 * (r - i));
  const Vector<double> root = sigma.cwiseSqrt();
  f.point = {f.left * root.asDiagonal(), f.right * root.asDiagonal(), lambda};
  const Matrix<double> R =
      -lambda * f.left * f.right.transpose() + f.left_perp * f.core * f.right_perp.transpose();
  f.inst = instance_with_residual(f.point, R, 2, (m * n) / 2 + 4, seed + 3);
  return f;
}

}  // namespace

TEST(Balancedness, EqualFactorsAreBalanced) {
  const auto p = random_point(5, 5, 2, 0.0, 1);
  LoraPoint<double> q{p.u, p.u, 0.0};
  EXPECT_EQ(balancedness_residual(q), 0.0);
}

TEST(Balancedness, RescaledPairArithmetic) {
  const auto p = random_point(6, 6, 1, 0.0, 2);
  LoraPoint<double> q{2.0 * p.u, 0.5 * p.u, 0.0};
  const double s = (p.u.transpose() * p.u).norm();
  EXPECT_NEAR(balancedness_residual(q), 15.0 * s / 4.0, 1e-12 * s);
}

TEST(SvdAlign, RecoversKnownDecomposition) {
  const Matrix<double> Fu = random_frame(7, 3), Fv = random_frame(5, 4);
  Vector<double> sigma(3);
  sigma << 3.0, 1.5, 0.25;
  // Unbalanced representative of U diag(sigma) V^T.
  Rng rng(5);
  const Matrix<double> G = rng.normal_matrix<double>(3, 3) + 3 * Matrix<double>::Identity(3, 3);
  LoraPoint<double> p{Fu.leftCols(3) * sigma.asDiagonal() * G, Fv.leftCols(3) * G.inverse().transpose(), 0.0};
  const auto al = svd_align(p);
  EXPECT_LT((al.sigma - sigma).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(al.reconstruction_error, 1e-10);
  EXPECT_LT((al.left.transpose() * al.left - Matrix<double>::Identity(3, 3)).norm(), 1e-12);
  EXPECT_LT((al.right.transpose() * al.right - Matrix<double>::Identity(3, 3)).norm(), 1e-12);
  EXPECT_LT(balancedness_residual(al.point), 1e-12);
  EXPECT_LT((al.point.product() - p.product()).norm(), 1e-10);
}

TEST(SvdAlign, RankCollapsedPoint) {
  auto p = random_point(6, 5, 2, 0.0, 3);
  p.u.col(1).setZero();
  p.v.col(1).setZero();
  try {
    svd_align(p);
    FAIL();
  } catch (const RankDeficientError& e) {
    EXPECT_EQ(e.effective_rank(), 1);
    EXPECT_EQ(e.error_class(), ErrorClass::RankDeficient);
  }
}

TEST(ResidualBlocks, RecoversConstructedCore) {
  const int m = 7, n = 6, r = 2;
  const Matrix<double> Fu = random_frame(m, 10), Fv = random_frame(n, 11);
  Rng rng(12);
  const Matrix<double> M = rng.normal_matrix<double>(m - r, n - r);
  const double lambda = 0.3;
  const Matrix<double> R = -lambda * Fu.leftCols(r) * Fv.leftCols(r).transpose() +
                           Fu.rightCols(m - r) * M * Fv.rightCols(n - r).transpose();
  const auto b = residual_blocks<double>(R, Fu.leftCols(r), Fv.leftCols(r), lambda);
  EXPECT_LT(b.r11_deviation, 1e-12);
  EXPECT_LT(b.r12_norm, 1e-12);
  EXPECT_LT(b.r21_norm, 1e-12);
  // The completion is arbitrary; map it back to the constructed frame.
  const Matrix<double> expected = b.left_perp.transpose() * Fu.rightCols(m - r) * M *
                                  Fv.rightCols(n - r).transpose() * b.right_perp;
  EXPECT_LT((b.r22 - expected).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(b.sigma1_r22, spectral_norm(M), 1e-12);
}

TEST(ResidualBlocks, CompletionChoiceDoesNotMatter) {
  const Matrix<double> Fu = random_frame(6, 20), Fv = random_frame(6, 21);
  Rng rng(22);
  const Matrix<double> R = rng.normal_matrix<double>(6, 6);
  const auto a = residual_blocks<double>(R, Fu.leftCols(2), Fv.leftCols(2), 0.1, 1);
  const auto b = residual_blocks<double>(R, Fu.leftCols(2), Fv.leftCols(2), 0.1, 99);
  EXPECT_NEAR(a.r12_norm, b.r12_norm, 1e-12);
  EXPECT_NEAR(a.r21_norm, b.r21_norm, 1e-12);
  EXPECT_NEAR(a.r22.norm(), b.r22.norm(), 1e-12);
  EXPECT_NEAR(a.sigma1_r22, b.sigma1_r22, 1e-12);
}

TEST(ResidualBlocks, NoiselessInterpolatingPoint) {
  const auto inst = make_instance(6, 6, 2, 6, LossKind::MSE, 2);
  Eigen::JacobiSVD<Matrix<double>> svd(inst.planted_target, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double s = std::sqrt(svd.singularValues()(0));
  LoraPoint<double> p{svd.matrixU().leftCols(1) * s, svd.matrixV().leftCols(1) * s, 0.0};
  EXPECT_LT(residual_blocks(inst, p, LossKind::MSE).residual_norm, 1e-10);
}

TEST(QSpectrum, TwoByTwoAnalytic) {
  Matrix<double> r22(1, 1);
  r22 << 0.3;
  const auto q = q_spectrum<double>(r22, 0.5, 1);
  ASSERT_EQ(q.size(), 2u);
  EXPECT_NEAR(q[0], 0.2, 1e-15);
  EXPECT_NEAR(q[1], 0.8, 1e-15);
}

TEST(QSpectrum, ZeroCoreIsAllLambda) {
  const auto q = q_spectrum<double>(Matrix<double>::Zero(4, 3), 0.7, 2);
  EXPECT_EQ(q.size(), std::size_t(2 * (4 + 3)));
  for (double x : q) EXPECT_EQ(x, 0.7);
}

TEST(QSpectrum, MatchesDenseKernelWithMultiplicity) {
  Rng rng(31);
  for (int t = 0; t < 20; ++t) {
    const int a = 1 + t % 5, b = 1 + (t * 3) % 4, r = 1 + t % 3;
    const Matrix<double> r22 = rng.normal_matrix<double>(a, b);
    const double lambda = 0.1 + rng.uniform();
    // The r copies of the kernel act on the r columns of (Q, T) independently.
    const Matrix<double> kernel = q_block_kernel<double>(r22, lambda);
    Matrix<double> big = Matrix<double>::Zero(r * (a + b), r * (a + b));
    for (int k = 0; k < r; ++k) big.block(k * (a + b), k * (a + b), a + b, a + b) = kernel;
    const Vector<double> dense = Eigen::SelfAdjointEigenSolver<Matrix<double>>(big).eigenvalues();
    const auto q = q_spectrum<double>(r22, lambda, r);
    ASSERT_EQ(q.size(), std::size_t(dense.size()));
    for (std::size_t i = 0; i < q.size(); ++i) EXPECT_NEAR(q[i], dense(Index(i)), 1e-10);
  }
}

TEST(MinHessianEig, PositiveDefiniteFixture) {
  const auto f = critical_fixture(5, 4, 1, 0.5, 1.0, 0.05, 40);
  const auto e = min_hessian_eig(f.inst, f.point, LossKind::MSE);
  EXPECT_TRUE(e.dense);
  EXPECT_GT(e.smallest, 0.0);
}

TEST(MinHessianEig, StrictSaddleBelowLemmaBound) {
  const double lambda = 0.1, sigma1 = 0.4;
  const auto f = critical_fixture(5, 4, 1, lambda, 1e-3, sigma1, 41);
  EXPECT_LT(gradient(f.inst, f.point, LossKind::MSE).norm(), 1e-10);
  // Worst Lemma-3 direction: top singular pair of the core.
  Eigen::JacobiSVD<Matrix<double>> svd(f.core, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Matrix<double> du = f.left_perp * svd.matrixU().col(0);
  const Matrix<double> dv = -f.right_perp * svd.matrixV().col(0);
  const double rayleigh = hessian_quadratic_form(f.inst, f.point, du, dv, LossKind::MSE) /
                          (du.squaredNorm() + dv.squaredNorm());
  const auto e = min_hessian_eig(f.inst, f.point, LossKind::MSE);
  EXPECT_LE(e.smallest, rayleigh + 1e-12);
  EXPECT_LT(rayleigh, lambda - sigma1 + 0.05);
  EXPECT_LT(e.smallest, 0.0);
}

TEST(MinHessianEig, LanczosAgreesWithDense) {
  const auto f = critical_fixture(9, 8, 2, 0.1, 0.2, 0.3, 42);
  const auto dense = min_hessian_eig(f.inst, f.point, LossKind::MSE);
  Caps caps;
  caps.dense_hessian_dim = 4;
  const auto iter = min_hessian_eig(f.inst, f.point, LossKind::MSE, caps, 3);
  EXPECT_FALSE(iter.dense);
  EXPECT_NEAR(iter.smallest, dense.smallest, 1e-8);
  EXPECT_NEAR(iter.largest, dense.largest, 1e-8);
  EXPECT_LT(iter.residual, 1e-6);
}

TEST(MinHessianEig, ZeroInstanceAtOrigin) {
  auto inst = make_instance(4, 3, 2, 3, LossKind::MSE, 1);
  inst.labels.setZero();
  const auto e = min_hessian_eig(inst, LoraPoint<double>::zeros(4, 3, 1, 0.0), LossKind::MSE);
  EXPECT_NEAR(e.smallest, 0.0, 1e-14);
}

TEST(HessianDecomposition, MatchesQuadraticForm) {
  for (int r : {1, 2}) {
    const auto f = critical_fixture(6, 5, r, 0.2, 0.5, 0.35, 50 + r);
    for (int t = 0; t < 200; ++t) {
      const auto dir = random_direction(6, 5, r, 1000 + t);
      const double q = hessian_quadratic_form(f.inst, f.point, dir, LossKind::MSE);
      const double d = hessian_decomposition(f.inst, f.point, dir.du, dir.dv, LossKind::MSE).total();
      EXPECT_NEAR(d, q, 1e-8 * std::max(1.0, std::abs(q))) << "r=" << r << " t=" << t;
    }
  }
}

TEST(QSpectrum, SignMatchesLambdaMinusSigma) {
  Rng rng(60);
  for (int t = 0; t < 50; ++t) {
    const Matrix<double> r22 = rng.normal_matrix<double>(3, 4);
    const double lambda = 2.0 * rng.uniform() * spectral_norm(r22);
    const auto q = q_spectrum<double>(r22, lambda, 1);
    const double gap = lambda - spectral_norm(r22);
    EXPECT_EQ(q.front() > 0, gap > 0);
  }
}

TEST(Classify, Cases) {
  ClassifyInputs in;
  in.grad_norm = 1e-12;
  in.total_loss = 1e-9;
  in.data_loss = 1e-9;
  in.min_eig = -1e-9;
  in.hessian_op_norm = 1.0;
  EXPECT_EQ(classify(in), Classification::GlobalMin);
  in.min_eig = -0.1;
  EXPECT_EQ(classify(in), Classification::StrictSaddle);
  in.min_eig = 1e-3;
  in.data_loss = 0.2;
  EXPECT_EQ(classify(in), Classification::SpuriousSOSP);
  in.grad_norm = 1e-3;
  EXPECT_EQ(classify(in), Classification::NotConverged);
  in.grad_norm = 0;
  in.run_ok = false;
  EXPECT_EQ(classify(in), Classification::NotConverged);
  EXPECT_EQ(parse_classification("SpuriousSOSP"), Classification::SpuriousSOSP);
  EXPECT_THROW(parse_classification("nope"), Error);
}

TEST(Certificate, LargeDecayCollapseIsCertified) {
  const auto inst = make_instance(8, 8, 2, 6, LossKind::MSE, 3, 0.01);
  const double shrink = spectral_norm<double>(inst.features().adjoint(inst.labels) / double(inst.N()));
  TrainConfig cfg;
  cfg.rank = 2;
  cfg.lambda_schedule = {{1.5 * shrink, 1e-10}};
  double best = 1e300;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    best = std::min(best, double(train(inst, cfg, LossKind::MSE, seed + 100).loss.data_loss));
  const auto run = train(inst, cfg, LossKind::MSE, 1);
  ASSERT_TRUE(run.converged);
  const auto c = nuclear_certificate(inst, run.point, LossKind::MSE);
  EXPECT_LT(c.effective_rank, 2);
  EXPECT_TRUE(c.op_norm_ok);
  EXPECT_LE(c.op_norm_r, c.lambda * (1 + 1e-6));
  EXPECT_TRUE(c.certified_global);
  EXPECT_LE(run.loss.data_loss, best + 1e-6);
}

TEST(Certificate, PlantedViolation) {
  const auto inst = make_instance(6, 6, 2, 6, LossKind::MSE, 3, 0.01);
  auto p = LoraPoint<double>::zeros(6, 6, 1, 0.0);
  const double opn = spectral_norm(residual_matrix(inst, p, LossKind::MSE));
  p.lambda = opn / 1.2;
  const auto c = nuclear_certificate(inst, p, LossKind::MSE);
  EXPECT_FALSE(c.op_norm_ok);
  EXPECT_FALSE(c.certified_global);
}

TEST(Certificate, ZeroPointWithinShrinkage) {
  const auto inst = make_instance(6, 6, 2, 6, LossKind::MSE, 3, 0.01);
  auto p = LoraPoint<double>::zeros(6, 6, 1, 0.0);
  p.lambda = 2.0 * spectral_norm(residual_matrix(inst, p, LossKind::MSE));
  const auto c = nuclear_certificate(inst, p, LossKind::MSE);
  EXPECT_EQ(c.effective_rank, 0);
  EXPECT_TRUE(c.certified_global);
  EXPECT_EQ(c.u0t_w, 0.0);
}

TEST(Certificate, FullRankPointGetsAdvisory) {
  const auto f = critical_fixture(5, 4, 1, 0.5, 1.0, 0.05, 70);
  EXPECT_FALSE(nuclear_certificate(f.inst, f.point, LossKind::MSE).advisory.empty());
}

TEST(TangentBasis, DimensionAndOrthonormality) {
  for (auto [m, n, r] : {std::tuple{3, 3, 1}, std::tuple{8, 6, 2}, std::tuple{5, 7, 3}}) {
    const auto p = random_point(m, n, r, 0.0, 80 + m);
    const auto t = tangent_basis(p);
    ASSERT_EQ(t.dimension(), r * (m + n) - r * r);
    Matrix<double> gram(t.dimension(), t.dimension());
    for (Index i = 0; i < t.dimension(); ++i)
      for (Index j = 0; j < t.dimension(); ++j)
        gram(i, j) = (t.element(i).cwiseProduct(t.element(j))).sum();
    EXPECT_LT((gram - Matrix<double>::Identity(t.dimension(), t.dimension())).norm(), 1e-10);
    // Each element is of the form du v^T + u dv^T: the (perp, perp) block vanishes.
    for (Index i = 0; i < t.dimension(); ++i)
      EXPECT_LT((t.left_perp.transpose() * t.element(i) * t.right_perp).norm(), 1e-12);
  }
  EXPECT_EQ(tangent_basis(random_point(3, 3, 1, 0.0, 1)).dimension(), 5);
  EXPECT_EQ(tangent_basis(random_point(8, 6, 2, 0.0, 1)).dimension(), 24);
}

TEST(TangentOperator, MatchesElementwiseApplication) {
  const auto inst = make_instance(6, 5, 2, 4, LossKind::MSE, 5);
  const auto t = tangent_basis(random_point(6, 5, 2, 0.0, 6));
  const Matrix<double> AT = tangent_operator(inst.features(), t);
  for (Index i = 0; i < t.dimension(); ++i)
    EXPECT_LT((AT.col(i) - inst.features().apply(t.element(i))).norm(), 1e-12);
}

TEST(TangentSpectrum, FullColumnRankBelowOne) {
  // dim T = 2*(6+5) - 4 = 18 <= KN = 24.
  const auto inst = make_instance(6, 5, 2, 12, LossKind::MSE, 5);
  const auto s = tangent_operator_spectrum(inst, random_point(6, 5, 2, 0.0, 6));
  EXPECT_EQ(s.tangent_dim, 18);
  EXPECT_EQ(s.nonzero_count, 18);
  EXPECT_LE(s.rho(), 1.0);
}

TEST(TangentSpectrum, BasisRotationInvariance) {
  const auto inst = make_instance(6, 5, 2, 8, LossKind::MSE, 5);
  const auto t = tangent_basis(random_point(6, 5, 2, 0.0, 6));
  const Matrix<double> AT = tangent_operator(inst.features(), t);
  Rng rng(7);
  const Matrix<double> O = rng.orthonormal_columns<double>(AT.cols(), AT.cols());
  const Vector<double> a = Eigen::JacobiSVD<Matrix<double>>(AT).singularValues();
  const Vector<double> b = Eigen::JacobiSVD<Matrix<double>>(Matrix<double>(AT * O)).singularValues();
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(MpEdge, Values) {
  EXPECT_DOUBLE_EQ(mp_edge(4.0), 0.25);
  EXPECT_LT(mp_edge(1.0 + 1e-6), 1e-12);
  EXPECT_NEAR(mp_edge(1.35), 0.0195, 1e-4);
  EXPECT_THROW(mp_edge(1.0), Error);
}

TEST(AnalyzePoint, GaugeInvariance) {
  const auto inst = make_instance(10, 9, 2, 8, LossKind::MSE, 11, 0.01);
  TrainConfig cfg;
  cfg.rank = 2;
  const auto run = train(inst, cfg, LossKind::MSE, 3);
  ASSERT_TRUE(run.converged);
  const auto base = analyze_point(inst, run.point, LossKind::MSE, 0.0);
  Rng rng(12);
  for (int t = 0; t < 5; ++t) {
    Matrix<double> Q = rng.normal_matrix<double>(2, 2);
    Eigen::JacobiSVD<Matrix<double>> svd(Q, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Vector<double> s(2);
    s << 1.0, 0.1 + 0.9 * rng.uniform();  // condition number <= 10
    Q = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
    LoraPoint<double> moved{run.point.u * Q, run.point.v * Q.inverse().transpose(), run.point.lambda};
    const auto rep = analyze_point(inst, moved, LossKind::MSE, 0.0);
    EXPECT_EQ(rep.classification, base.classification);
    ASSERT_EQ(rep.q_eigs.size(), base.q_eigs.size());
    for (std::size_t i = 0; i < rep.q_eigs.size(); ++i) EXPECT_NEAR(rep.q_eigs[i], base.q_eigs[i], 1e-8);
    EXPECT_NEAR(rep.hessian.smallest, base.hessian.smallest, 1e-8);
  }
}

TEST(AnalyzePoint, ConvergedRunStructure) {
  const auto inst = make_instance(10, 10, 2, 12, LossKind::MSE, 13, 0.01);
  TrainConfig cfg;
  const auto run = train(inst, cfg, LossKind::MSE, 5);
  ASSERT_TRUE(run.converged);
  const auto rep = analyze_point(inst, run.point, LossKind::MSE, 0.0);
  ASSERT_TRUE(rep.blocks.has_value());
  const double lambda = run.point.lambda;
  EXPECT_LE(rep.blocks->r11_deviation, 1e-4 * lambda);
  EXPECT_LE(rep.blocks->r12_norm, 1e-6 * (1 + rep.blocks->residual_norm));
  EXPECT_LE(rep.blocks->r21_norm, 1e-6 * (1 + rep.blocks->residual_norm));
  EXPECT_EQ(rep.q_eigs.front() > 0, lambda > rep.blocks->sigma1_r22);
}

TEST(LeastSquaresFloor, ZeroWhenSurjectiveAndMatchesSolveOtherwise) {
  EXPECT_LT(least_squares_floor(make_instance(6, 6, 2, 8, LossKind::MSE, 1, 0.1)), 1e-20);
  const auto inst = make_instance(3, 3, 2, 10, LossKind::MSE, 1, 0.1);
  const Matrix<double> A = inst.features().jacobians();
  const Vector<double> x = A.colPivHouseholderQr().solve(inst.labels);
  const double expected = 0.5 * (A * x - inst.labels).squaredNorm() / inst.N();
  EXPECT_NEAR(least_squares_floor(inst), expected, 1e-12);
}

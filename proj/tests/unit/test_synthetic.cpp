#include <gtest/gtest.h>

#include "lorank/synthetic.hpp"
#include "lorank/theory.hpp"

using namespace lorank;

namespace {

Matrix<double> random_matrix(Rng& rng, Index r, Index c) { return rng.normal_matrix<double>(r, c); }

}  // namespace

TEST(GenOperator, ShapeContract) {
  const auto op = gen_operator<double>(4, 4, 2, 3, 7);
  EXPECT_EQ(op.size(), 6);
  EXPECT_EQ(op.jacobians().rows(), 6);
  EXPECT_EQ(op.slice(2, 1).rows(), 4);
  EXPECT_EQ(op.slice(2, 1).cols(), 4);
  EXPECT_EQ(op.entry_scale(), 1.0);
}

TEST(GenOperator, UnitEntryVariance) {
  const auto op = gen_operator<double>(64, 64, 2, 16, 1);
  const auto& J = op.jacobians();
  ASSERT_GE(J.size(), 100000);
  const double mean = J.mean();
  const double var = (J.array() - mean).square().mean();
  EXPECT_GE(var, 0.95);
  EXPECT_LE(var, 1.05);
}

TEST(GenOperator, DeterministicInSeed) {
  EXPECT_TRUE(gen_operator<double>(5, 3, 2, 4, 11) == gen_operator<double>(5, 3, 2, 4, 11));
  EXPECT_FALSE(gen_operator<double>(5, 3, 2, 4, 11) == gen_operator<double>(5, 3, 2, 4, 12));
}

TEST(GenOperator, RefusesOversizedOperator) {
  Caps caps;
  caps.max_operator_bytes = 1024;
  try {
    gen_operator<double>(16, 16, 2, 4, 0, caps);
    FAIL() << "expected CapExceeded";
  } catch (const Error& e) {
    EXPECT_EQ(e.error_class(), ErrorClass::CapExceeded);
    EXPECT_NE(std::string(e.what()).find("bytes"), std::string::npos);
  }
}

TEST(GenOperator, RejectsNonPositiveDims) {
  EXPECT_THROW(gen_operator<double>(0, 3, 1, 1, 0), Error);
}

TEST(FeatureOperator, AdjointIdentity) {
  const auto op = gen_operator<double>(7, 5, 3, 6, 3);
  Rng rng(99);
  for (int t = 0; t < 100; ++t) {
    const Matrix<double> delta = random_matrix(rng, 7, 5);
    const Vector<double> w = random_matrix(rng, op.size(), 1);
    const double lhs = op.apply(delta).dot(w);
    const double rhs = (delta.cwiseProduct(op.adjoint(w))).sum();
    EXPECT_NEAR(lhs, rhs, 1e-12 * std::max(1.0, std::abs(lhs)));
  }
}

TEST(FeatureOperator, SliceLayoutIsRowMajor) {
  const auto op = gen_operator<double>(3, 4, 2, 2, 5);
  // Entry (i, j) of slice a sits at column i*n + j of row a.
  EXPECT_EQ(op.slice(3)(1, 2), op.jacobians()(3, 1 * 4 + 2));
  Matrix<double> e = Matrix<double>::Zero(3, 4);
  e(2, 1) = 1.0;
  EXPECT_EQ(op.apply(e)(1), op.slice(1)(2, 1));
}

TEST(FeatureOperator, ShapeErrors) {
  const auto op = gen_operator<double>(3, 4, 2, 2, 5);
  EXPECT_THROW(op.apply(Matrix<double>::Zero(4, 3)), Error);
  EXPECT_THROW(op.adjoint(Vector<double>::Zero(3)), Error);
  RowMajorMatrix<double> bad(2, 2);
  bad << 1, 2, std::nan(""), 4;
  EXPECT_THROW(FeatureOperator<double>(1, 2, 1, 2, bad), Error);
}

TEST(GenInstance, NoiselessPlantedInterpolation) {
  const auto op = gen_operator<double>(6, 5, 2, 8, 4);
  const auto inst = gen_instance(op, 1, 0.0, LossKind::MSE, 9);
  EXPECT_NEAR(inst.planted_target.norm(), 1.0, 1e-14);
  const Vector<double> clean = op.apply(inst.planted_target);
  EXPECT_EQ((inst.labels - clean).cwiseAbs().maxCoeff(), 0.0);
  const Matrix<double> R = op.adjoint(clean - inst.labels) / double(op.samples());
  EXPECT_EQ(R.cwiseAbs().maxCoeff(), 0.0);
}

TEST(GenInstance, PlantedTargetRankAndNorm) {
  const auto op = gen_operator<double>(9, 7, 1, 4, 2);
  const auto inst = gen_instance(op, 3, 0.0, LossKind::MSE, 5);
  Eigen::JacobiSVD<Matrix<double>> svd(inst.planted_target);
  const auto sv = svd.singularValues();
  EXPECT_NEAR(sv(0), 1.0 / std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(sv(2), 1.0 / std::sqrt(3.0), 1e-12);
  EXPECT_LT(sv(3), 1e-12);
  EXPECT_NEAR(inst.planted_target.norm(), 1.0, 1e-12);
}

TEST(GenInstance, NoiseLevelConcentrates) {
  const auto op = gen_operator<double>(8, 8, 2, 64, 4);
  const auto inst = gen_instance(op, 1, 0.01, LossKind::MSE, 9);
  const double per_coord = (inst.labels - op.apply(inst.planted_target)).squaredNorm() / op.size();
  EXPECT_GE(per_coord, 0.5e-4);
  EXPECT_LE(per_coord, 1.5e-4);
  EXPECT_LT((inst.labels - op.apply(inst.planted_target) - inst.noise).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(GenInstance, CrossEntropyLabelsAreOneHot) {
  const auto op = gen_operator<double>(5, 5, 2, 20, 4);
  const auto inst = gen_instance(op, 1, 0.0, LossKind::CE, 3);
  for (int i = 0; i < 20; ++i) {
    const double a = inst.labels(2 * i), b = inst.labels(2 * i + 1);
    EXPECT_TRUE((a == 0 || a == 1) && (b == 0 || b == 1));
    EXPECT_EQ(a + b, 1.0);
  }
  EXPECT_EQ(inst.noise.squaredNorm(), 0.0);
}

TEST(GenInstance, TargetRankOutOfRange) {
  const auto op = gen_operator<double>(4, 3, 1, 2, 0);
  EXPECT_THROW(gen_instance(op, 0, 0.0, LossKind::MSE, 0), Error);
  EXPECT_THROW(gen_instance(op, 4, 0.0, LossKind::MSE, 0), Error);
}

TEST(ArgmaxOneHot, TiesGoToLowerIndex) {
  Vector<double> logits(6);
  logits << 1, 1, 0.5, 2, 3, 3;
  Vector<double> y = argmax_one_hot<double>(logits, 3);
  EXPECT_EQ(y(0), 1.0);
  EXPECT_EQ(y(3), 0.0);
  EXPECT_EQ(y(4), 1.0);
  EXPECT_EQ(y(5), 0.0);
}

TEST(ProjectOperator, FullDimensionIsAnIsometryPerSlice) {
  const auto op = gen_operator<double>(6, 6, 2, 3, 1);
  const auto proj = project_operator(op, 6, 8);
  for (Index a = 0; a < op.size(); ++a) {
    const Vector<double> s0 = Eigen::JacobiSVD<Matrix<double>>(Matrix<double>(op.slice(a))).singularValues();
    const Vector<double> s1 = Eigen::JacobiSVD<Matrix<double>>(Matrix<double>(proj.slice(a))).singularValues();
    EXPECT_LT((s0 - s1).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(ProjectOperator, MatchesLiftedApplication) {
  const auto op = gen_operator<double>(9, 7, 2, 5, 1);
  const int D = 4;
  const auto proj = project_operator(op, D, 13);
  const auto P = draw_projection<double>(9, 7, D, 13);
  EXPECT_LT((P.left * P.left.transpose() - Matrix<double>::Identity(D, D)).norm(), 1e-12);
  Rng rng(4);
  const Matrix<double> small = rng.normal_matrix<double>(D, D);
  const Vector<double> lhs = proj.apply(small);
  const Vector<double> rhs = op.apply(P.left.transpose() * small * P.right);
  EXPECT_LT((lhs - rhs).norm(), 1e-12 * rhs.norm());
}

TEST(ProjectOperator, DeterministicAndRangeChecked) {
  const auto op = gen_operator<double>(6, 5, 1, 3, 1);
  EXPECT_TRUE(project_operator(op, 3, 2) == project_operator(op, 3, 2));
  EXPECT_THROW(project_operator(op, 6, 2), Error);
  EXPECT_THROW(project_operator(op, 0, 2), Error);
}

TEST(ProjectOperator, ReducedCapacityRegime) {
  // 96 x 96 projected to D = 32: rank-1 capacity 2D - 1 = 63 < KN = 64.
  const auto op = gen_operator<double>(96, 96, 2, 32, 3);
  const auto proj = project_operator(op, 32, 1);
  EXPECT_EQ(proj.rows(), 32);
  EXPECT_EQ(lora_capacity(proj.rows(), proj.cols(), 1), 63);
  EXPECT_LT(lora_capacity(proj.rows(), proj.cols(), 1), proj.size());
}

TEST(Rng, DeriveSeedSeparatesStreams) {
  EXPECT_NE(derive_seed(1, {1}), derive_seed(1, {2}));
  EXPECT_NE(derive_seed(1, {1}), derive_seed(2, {1}));
  EXPECT_EQ(derive_seed(5, {3, 4}), derive_seed(5, {3, 4}));
  Rng a(7, Stream::Operator), b(7, Stream::Operator);
  EXPECT_EQ(a.normal(), b.normal());
}

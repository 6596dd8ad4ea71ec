#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

#include "helpers.hpp"
#include "lorank/io.hpp"

namespace fs = std::filesystem;
using namespace lorank;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("lorank_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

std::optional<ErrorClass> class_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.error_class();
  }
  return std::nullopt;
}

bool bit_equal(const Matrix<double>& a, const Matrix<double>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

}  // namespace

using IoTest = TempDir;

TEST_F(IoTest, OperatorRoundTripIsBitExact) {
  const auto op = gen_operator<double>(4, 4, 2, 3, 7);
  save_operator(op, dir_ / "op");
  const auto back = load_operator(dir_ / "op");
  EXPECT_TRUE(back == op);
  EXPECT_EQ(std::memcmp(back.jacobians().data(), op.jacobians().data(),
                        sizeof(double) * op.jacobians().size()),
            0);
}

TEST_F(IoTest, ManifestRecordsLayout) {
  save_operator(gen_operator<double>(3, 5, 2, 4, 1), dir_ / "op");
  const Manifest mf = read_manifest(dir_ / "op" / "manifest.txt");
  EXPECT_EQ(mf.at("m"), "3");
  EXPECT_EQ(mf.at("n"), "5");
  EXPECT_EQ(mf.at("K"), "2");
  EXPECT_EQ(mf.at("N"), "4");
  EXPECT_EQ(mf.at("endianness"), "little");
  EXPECT_EQ(fs::file_size(dir_ / "op" / "jacobians.bin"), 3u * 5 * 2 * 4 * sizeof(double));
}

TEST_F(IoTest, TruncatedTensorIsFormatError) {
  save_operator(gen_operator<double>(4, 4, 2, 3, 7), dir_ / "op");
  fs::resize_file(dir_ / "op" / "jacobians.bin", 8 * 10);
  try {
    load_operator(dir_ / "op");
    FAIL() << "expected a format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.error_class(), ErrorClass::Format);
    EXPECT_NE(std::string(e.what()).find("byte count"), std::string::npos);
  }
}

TEST_F(IoTest, UnknownVersionIsRejected) {
  save_operator(gen_operator<double>(2, 2, 1, 2, 3), dir_ / "op");
  Manifest mf = read_manifest(dir_ / "op" / "manifest.txt");
  mf["version"] = "99";
  write_manifest(dir_ / "op" / "manifest.txt", mf);
  EXPECT_EQ(class_of([&] { load_operator(dir_ / "op"); }), ErrorClass::Format);
}

TEST_F(IoTest, BigEndianManifestIsRejected) {
  save_operator(gen_operator<double>(2, 2, 1, 2, 3), dir_ / "op");
  Manifest mf = read_manifest(dir_ / "op" / "manifest.txt");
  mf["endianness"] = "big";
  write_manifest(dir_ / "op" / "manifest.txt", mf);
  EXPECT_EQ(class_of([&] { load_operator(dir_ / "op"); }), ErrorClass::Format);
}

TEST_F(IoTest, MissingDirectoryIsInputMissing) {
  EXPECT_EQ(class_of([&] { load_operator(dir_ / "nope"); }), ErrorClass::InputMissing);
  EXPECT_EQ(class_of([&] { load_instance(dir_ / "nope"); }), ErrorClass::InputMissing);
  EXPECT_EQ(class_of([&] { load_run_record(dir_ / "nope.json"); }), ErrorClass::InputMissing);
}

TEST_F(IoTest, InstanceRoundTrip) {
  const auto inst = lorank::testing::make_instance(5, 4, 2, 6, LossKind::MSE, 11, 0.3, 2);
  save_instance(inst, dir_ / "inst");
  const auto back = load_instance(dir_ / "inst");
  EXPECT_TRUE(back.features() == inst.features());
  EXPECT_TRUE(bit_equal(back.labels, inst.labels));
  EXPECT_TRUE(bit_equal(back.noise, inst.noise));
  EXPECT_TRUE(bit_equal(back.baseline, inst.baseline));
  EXPECT_TRUE(bit_equal(back.planted_target, inst.planted_target));
  EXPECT_EQ(back.target_rank, 2);
  EXPECT_EQ(back.noise_std, 0.3);
  EXPECT_EQ(back.seed, inst.seed);
  EXPECT_EQ(back.loss_kind, LossKind::MSE);
}

TEST_F(IoTest, CeInstanceKeepsLossKind) {
  const auto inst = lorank::testing::make_instance(3, 3, 3, 4, LossKind::CE, 2);
  save_instance(inst, dir_ / "inst");
  EXPECT_EQ(load_instance(dir_ / "inst").loss_kind, LossKind::CE);
}

TEST_F(IoTest, RunRecordRoundTrip) {
  const auto inst = lorank::testing::make_instance(4, 4, 2, 4, LossKind::MSE, 5, 0.01);
  TrainConfig cfg;
  cfg.rank = 2;
  cfg.max_iters = 300;
  cfg.record_interval = 7;
  cfg.lambda_schedule = {{1e-2, 1e-7}, {1e-3, 1e-9}};
  RunRecord rec{(dir_ / "inst").string(), LossKind::MSE, cfg, train(inst, cfg, LossKind::MSE, 9)};
  save_run_record(rec, dir_ / "run.json");
  const RunRecord back = load_run_record(dir_ / "run.json");

  EXPECT_EQ(back.instance_path, rec.instance_path);
  EXPECT_EQ(back.config.rank, 2);
  EXPECT_EQ(back.config.record_interval, 7);
  ASSERT_EQ(back.config.lambda_schedule.size(), 2u);
  EXPECT_EQ(back.config.lambda_schedule[1].grad_tol, 1e-9);
  EXPECT_EQ(back.result.converged, rec.result.converged);
  EXPECT_EQ(back.result.iterations, rec.result.iterations);
  EXPECT_EQ(back.result.newton_steps, rec.result.newton_steps);
  EXPECT_EQ(back.result.seed, 9u);
  EXPECT_EQ(back.result.grad_norm, rec.result.grad_norm);
  EXPECT_EQ(back.result.loss.total, rec.result.loss.total);
  EXPECT_EQ(back.result.point.lambda, rec.result.point.lambda);
  EXPECT_TRUE(bit_equal(back.result.point.u, rec.result.point.u));
  EXPECT_TRUE(bit_equal(back.result.point.v, rec.result.point.v));
  ASSERT_EQ(back.result.trace.size(), rec.result.trace.size());
  for (std::size_t i = 0; i < rec.result.trace.size(); ++i) {
    EXPECT_EQ(back.result.trace[i].iteration, rec.result.trace[i].iteration);
    EXPECT_EQ(back.result.trace[i].total_loss, rec.result.trace[i].total_loss);
  }
}

TEST_F(IoTest, GarbageRunRecordIsFormatError) {
  std::ofstream(dir_ / "bad.json") << "{ not json";
  EXPECT_EQ(class_of([&] { load_run_record(dir_ / "bad.json"); }), ErrorClass::Format);
  std::ofstream(dir_ / "other.json") << R"({"format": "something-else"})";
  EXPECT_EQ(class_of([&] { load_run_record(dir_ / "other.json"); }), ErrorClass::Format);
}

TEST_F(IoTest, AtomicWriteLeavesNoTempFile) {
  write_file_atomic(dir_ / "a.txt", "hello\n");
  EXPECT_TRUE(fs::exists(dir_ / "a.txt"));
  EXPECT_FALSE(fs::exists(dir_ / "a.txt.tmp"));
  std::ifstream in(dir_ / "a.txt");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "hello");
}

TEST_F(IoTest, ManifestIgnoresComments) {
  std::ofstream(dir_ / "m.txt") << "# header\nkey=value\n\nother=3\n";
  const Manifest mf = read_manifest(dir_ / "m.txt");
  EXPECT_EQ(mf.at("key"), "value");
  EXPECT_EQ(mf.size(), 2u);
}

TEST(IoText, DoubleFormattingRoundTrips) {
  for (double x : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 1e-16, 0.0}) {
    EXPECT_EQ(parse_double(format_double(x), "x"), x);
  }
  EXPECT_EQ(format_double(0.5), "0.5");
}

TEST(IoText, ParseRejectsTrailingGarbage) {
  EXPECT_THROW(parse_double("1.5x", "x"), Error);
  EXPECT_THROW(parse_int("12.0", "n"), Error);
  EXPECT_EQ(parse_int("-42", "n"), -42);
}

#pragma once

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include <cstdint>
#include <initializer_list>
#include <string_view>

#include "lorank/types.hpp"

namespace lorank {

// Identity of the project-wide generator, written into every output record.
// Boost's distributions are specified algorithms, so draws are identical
// across standard libraries and platforms.
inline constexpr std::string_view kGeneratorId =
    "mt19937_64+boost.normal;split=splitmix64";

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Child stream seed: a pure function of the parent seed and the tags.
inline std::uint64_t derive_seed(std::uint64_t seed,
                                 std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

// Stream tags for the different consumers of a user seed.
enum class Stream : std::uint64_t {
  Operator = 1,
  Target = 2,
  Noise = 3,
  ProjectionLeft = 4,
  ProjectionRight = 5,
  Init = 6,
  Completion = 7,
  Subsample = 8,
  Fixture = 9,
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, Stream stream)
      : engine_(derive_seed(seed, {static_cast<std::uint64_t>(stream)})) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::uint64_t uniform_index(std::uint64_t upper_exclusive) {
    boost::random::uniform_int_distribution<std::uint64_t> dist(0, upper_exclusive - 1);
    return dist(engine_);
  }

  template <typename Scalar = double>
  Matrix<Scalar> normal_matrix(Index rows, Index cols, Scalar scale = Scalar(1)) {
    Matrix<Scalar> out(rows, cols);
    // Column-major fill order is part of the determinism contract.
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i) out(i, j) = scale * static_cast<Scalar>(normal());
    return out;
  }

  // Haar-distributed matrix with orthonormal columns (QR of a Gaussian with
  // the sign of R's diagonal folded in).
  template <typename Scalar = double>
  Matrix<Scalar> orthonormal_columns(Index rows, Index cols) {
    Matrix<Scalar> g = normal_matrix<Scalar>(rows, cols);
    Eigen::HouseholderQR<Matrix<Scalar>> qr(g);
    Matrix<Scalar> q = qr.householderQ() * Matrix<Scalar>::Identity(rows, cols);
    const Matrix<Scalar>& r = qr.matrixQR();
    for (Index j = 0; j < cols; ++j)
      if (r(j, j) < Scalar(0)) q.col(j) = -q.col(j);
    return q;
  }

 private:
  boost::random::mt19937_64 engine_;
  boost::random::normal_distribution<double> normal_;
  boost::random::uniform_01<double> uniform_;
};

}  // namespace lorank

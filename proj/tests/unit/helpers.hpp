#pragma once

#include <memory>

#include "lorank/model.hpp"
#include "lorank/synthetic.hpp"

namespace lorank::testing {

inline ProblemInstance<double> make_instance(int m, int n, int K, int N, LossKind kind,
                                             std::uint64_t seed, double noise = 0.0,
                                             int target_rank = 1) {
  auto op = std::make_shared<const FeatureOperator<double>>(gen_operator<double>(m, n, K, N, seed));
  return gen_instance<double>(op, target_rank, noise, kind, seed + 1);
}

inline LoraPoint<double> random_point(int m, int n, int r, double lambda, std::uint64_t seed,
                                      double scale = 0.5) {
  Rng rng(seed, Stream::Fixture);
  return {rng.normal_matrix<double>(m, r, scale), rng.normal_matrix<double>(n, r, scale), lambda};
}

inline FactorPair<double> random_direction(int m, int n, int r, std::uint64_t seed) {
  Rng rng(seed, Stream::Fixture);
  return {rng.normal_matrix<double>(m, r), rng.normal_matrix<double>(n, r)};
}

inline double total_loss(const ProblemInstance<double>& inst, const LoraPoint<double>& p,
                         LossKind kind) {
  return loss(inst, p, kind).total;
}

inline LoraPoint<double> shifted(const LoraPoint<double>& p, const FactorPair<double>& d, double t) {
  return {p.u + t * d.du, p.v + t * d.dv, p.lambda};
}

}  // namespace lorank::testing

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lorank/caps.hpp"
#include "lorank/feature_operator.hpp"

namespace lorank {

// Partition of the m x n parameter index set: label(i, j) is the block id.
struct BlockPartition {
  std::vector<std::string> names;
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> label;

  static BlockPartition whole(int m, int n);
  // Consecutive row bands of the given heights (must sum to m).
  static BlockPartition row_bands(int m, int n, const std::vector<int>& heights);
  static BlockPartition col_bands(int m, int n, const std::vector<int>& widths);
};

struct MarginalStats {
  std::string name;
  std::size_t entries = 0;  // population size
  std::size_t sampled = 0;  // entries the moments were computed on
  double mean = 0.0, variance = 0.0, skewness = 0.0, excess_kurtosis = 0.0;
  double ks_distance = 0.0;  // vs N(mean, variance)
};

struct GramSpectrum {
  double top = 0.0;
  double smallest_nonzero = 0.0;
  double condition_number = 0.0;
  int effective_rank = 0;
  double threshold = 0.01;
};

struct StatsReport {
  std::vector<MarginalStats> blocks;
  std::optional<GramSpectrum> gram;  // empty when KN exceeds the dense cap
  std::string gram_note;
  std::optional<double> cross_mean_abs_corr, cross_max_abs_corr;
};

struct StatsOptions {
  double effective_rank_threshold = 0.01;
  std::size_t max_entries = 10'000'000;  // subsample above this many per block
  std::uint64_t seed = 0;
  int workers = 1;
};

// Moments of an arbitrary sample (two-pass).
MarginalStats sample_moments(std::vector<double> values, const std::string& name = "");

// sup |F_n - Phi((x - mean)/sd)| over the sample.
double ks_against_normal(std::vector<double> values, double mean, double sd);

GramSpectrum gram_spectrum(const FeatureOperator<double>& op, double threshold = 0.01);

StatsReport jacobian_stats(const FeatureOperator<double>& op,
                           const std::optional<BlockPartition>& blocks = std::nullopt,
                           const StatsOptions& options = {}, const Caps& caps = {});

}  // namespace lorank

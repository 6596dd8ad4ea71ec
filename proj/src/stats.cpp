#include "lorank/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/normal.hpp>

#include "lorank/parallel.hpp"
#include "lorank/rng.hpp"

namespace lorank {

BlockPartition BlockPartition::whole(int m, int n) {
  BlockPartition p;
  p.names = {"all"};
  p.label = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>::Zero(m, n);
  return p;
}

namespace {

BlockPartition bands(int m, int n, const std::vector<int>& sizes, bool rows) {
  const int total = rows ? m : n;
  require(!sizes.empty() && std::accumulate(sizes.begin(), sizes.end(), 0) == total &&
              std::all_of(sizes.begin(), sizes.end(), [](int s) { return s > 0; }),
          ErrorClass::Domain,
          std::string("block ") + (rows ? "heights" : "widths") + " must be positive and sum to " +
              std::to_string(total));
  BlockPartition p;
  p.label.resize(m, n);
  int start = 0;
  for (std::size_t b = 0; b < sizes.size(); ++b) {
    p.names.push_back((rows ? "rows" : "cols") + std::to_string(start) + "-" +
                      std::to_string(start + sizes[b] - 1));
    if (rows)
      p.label.middleRows(start, sizes[b]).setConstant(int(b));
    else
      p.label.middleCols(start, sizes[b]).setConstant(int(b));
    start += sizes[b];
  }
  return p;
}

double pearson(const double* x, const double* y, std::size_t n) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= double(n);
  my /= double(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return (sxx > 0 && syy > 0) ? sxy / std::sqrt(sxx * syy) : 0.0;
}

}  // namespace

BlockPartition BlockPartition::row_bands(int m, int n, const std::vector<int>& heights) {
  return bands(m, n, heights, true);
}

BlockPartition BlockPartition::col_bands(int m, int n, const std::vector<int>& widths) {
  return bands(m, n, widths, false);
}

MarginalStats sample_moments(std::vector<double> values, const std::string& name) {
  require(values.size() >= 2, ErrorClass::Domain, "moments need at least 2 values");
  MarginalStats s;
  s.name = name;
  s.entries = s.sampled = values.size();
  const double n = double(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double m2 = 0, m3 = 0, m4 = 0;
  for (double x : values) {
    const double d = x - s.mean, d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  s.variance = m2;
  s.skewness = m2 > 0 ? m3 / std::pow(m2, 1.5) : 0.0;
  s.excess_kurtosis = m2 > 0 ? m4 / (m2 * m2) - 3.0 : 0.0;
  s.ks_distance = m2 > 0 ? ks_against_normal(std::move(values), s.mean, std::sqrt(m2)) : 1.0;
  return s;
}

double ks_against_normal(std::vector<double> values, double mean, double sd) {
  require(!values.empty() && sd > 0, ErrorClass::Domain, "KS needs data and a positive sd");
  std::sort(values.begin(), values.end());
  const boost::math::normal_distribution<double> dist(mean, sd);
  const double n = double(values.size());
  double d = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double F = boost::math::cdf(dist, values[i]);
    d = std::max({d, F - double(i) / n, double(i + 1) / n - F});
  }
  return d;
}

GramSpectrum gram_spectrum(const FeatureOperator<double>& op, double threshold) {
  require(threshold > 0 && threshold < 1, ErrorClass::Domain, "threshold must lie in (0, 1)");
  const auto& A = op.jacobians();
  Matrix<double> G = Matrix<double>::Zero(A.rows(), A.rows());
  G.selfadjointView<Eigen::Lower>().rankUpdate(A);
  const Eigen::SelfAdjointEigenSolver<Matrix<double>> es(
      G.selfadjointView<Eigen::Lower>().toDenseMatrix(), Eigen::EigenvaluesOnly);
  const Vector<double>& ev = es.eigenvalues();
  GramSpectrum s;
  s.threshold = threshold;
  s.top = ev(ev.size() - 1);
  const double cutoff = s.top * 1e-10 * double(std::max<Index>(A.rows(), A.cols()));
  s.smallest_nonzero = s.top;
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev(i) > cutoff) s.smallest_nonzero = std::min(s.smallest_nonzero, ev(i));
    if (ev(i) > threshold * s.top) ++s.effective_rank;
  }
  s.condition_number = s.smallest_nonzero > 0 ? s.top / s.smallest_nonzero : 1.0;
  return s;
}

StatsReport jacobian_stats(const FeatureOperator<double>& op,
                           const std::optional<BlockPartition>& blocks_in,
                           const StatsOptions& opt, const Caps& caps) {
  const BlockPartition blocks = blocks_in ? *blocks_in : BlockPartition::whole(op.rows(), op.cols());
  require(blocks.label.rows() == op.rows() && blocks.label.cols() == op.cols(),
          ErrorClass::DimensionMismatch, "block partition does not match the operator shape");
  const int nb = int(blocks.names.size());

  // Flat column indices (row-major within a slice) of each block.
  std::vector<std::vector<Index>> cols(nb);
  for (Index i = 0; i < op.rows(); ++i)
    for (Index j = 0; j < op.cols(); ++j) {
      const int b = blocks.label(i, j);
      require(b >= 0 && b < nb, ErrorClass::Domain, "block label out of range");
      cols[b].push_back(i * op.cols() + j);
    }

  StatsReport rep;
  rep.blocks.resize(nb);
  const auto& A = op.jacobians();
  parallel_for(std::size_t(nb), opt.workers, [&](std::size_t b) {
    const std::size_t population = cols[b].size() * std::size_t(A.rows());
    require(population >= 2, ErrorClass::Domain, "block " + blocks.names[b] + " is too small");
    std::vector<double> values;
    if (population <= opt.max_entries) {
      values.reserve(population);
      for (Index a = 0; a < A.rows(); ++a)
        for (Index c : cols[b]) values.push_back(A(a, c));
    } else {
      Rng rng(derive_seed(opt.seed, {std::uint64_t(Stream::Subsample), b}));
      values.reserve(opt.max_entries);
      for (std::size_t k = 0; k < opt.max_entries; ++k) {
        const std::uint64_t idx = rng.uniform_index(population);
        values.push_back(A(Index(idx / cols[b].size()), cols[b][idx % cols[b].size()]));
      }
    }
    MarginalStats s = sample_moments(std::move(values), blocks.names[b]);
    s.entries = population;
    rep.blocks[b] = s;
  });

  if (A.rows() <= caps.dense_gram_dim) {
    rep.gram = gram_spectrum(op, opt.effective_rank_threshold);
  } else {
    rep.gram_note = "Gram spectrum skipped: KN = " + std::to_string(A.rows()) +
                    " exceeds the dense cap " + std::to_string(caps.dense_gram_dim);
  }

  // Per output coordinate, correlation between paired entries of two blocks.
  if (nb >= 2) {
    double sum = 0, mx = 0;
    std::size_t count = 0;
    std::vector<double> x, y;
    for (int b1 = 0; b1 < nb; ++b1)
      for (int b2 = b1 + 1; b2 < nb; ++b2) {
        const std::size_t len = std::min(cols[b1].size(), cols[b2].size());
        if (len < 2) continue;
        x.resize(len);
        y.resize(len);
        for (Index a = 0; a < A.rows(); ++a) {
          for (std::size_t k = 0; k < len; ++k) {
            x[k] = A(a, cols[b1][k]);
            y[k] = A(a, cols[b2][k]);
          }
          const double rho = std::abs(pearson(x.data(), y.data(), len));
          sum += rho;
          mx = std::max(mx, rho);
          ++count;
        }
      }
    if (count > 0) {
      rep.cross_mean_abs_corr = sum / double(count);
      rep.cross_max_abs_corr = mx;
    }
  }
  return rep;
}

}  // namespace lorank

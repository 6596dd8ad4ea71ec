#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lorank/errors.hpp"
#include "lorank/types.hpp"

namespace lorank {

// Dimension of the rank-r matrix manifold modulo the GL(r) gauge.
inline long long lora_capacity(long long m, long long n, long long r) {
  return r * (m + n) - r * r;
}

template <typename Scalar = double>
Scalar dim_fraction(long long m, long long n, long long r, long long K, long long N) {
  return Scalar(lora_capacity(m, n, r)) / Scalar(K * N);
}

// Smallest r with r(r+1)/2 > KN (symmetric-lift count).
inline int old_min_rank(long long K, long long N) {
  require(K >= 1 && N >= 1, ErrorClass::Domain, "old_min_rank requires K, N >= 1");
  long long r = 1;
  while (r * (r + 1) / 2 <= K * N) ++r;
  return int(r);
}

// Smallest r with r(m+n) - r^2 > cstar * KN.
inline int new_min_rank(long long m, long long n, long long K, long long N, double cstar) {
  require(m >= 1 && n >= 1 && K >= 1 && N >= 1, ErrorClass::Domain,
          "new_min_rank requires m, n, K, N >= 1");
  require(cstar >= 1.0, ErrorClass::Domain, "cstar must be >= 1");
  const double target = cstar * double(K * N);
  const long long r_max = std::min(std::min(m, n), (m + n) / 2);
  long long best = 0;
  for (long long r = 1; r <= r_max; ++r) {
    const long long cap = lora_capacity(m, n, r);
    best = std::max(best, cap);
    if (double(cap) > target) return int(r);
  }
  throw InfeasibleError(double(best),
                        "no rank satisfies r(m+n) - r^2 > " + std::to_string(target) +
                            "; maximal capacity is " + std::to_string(best));
}

// C* = 1 / (1 - sqrt(c))^2, the solution of (sqrt(C*) - 1)^2 = c C*.
template <typename Scalar = double>
Scalar cstar_from_c(Scalar c) {
  require(c >= Scalar(0) && c < Scalar(1), ErrorClass::Domain, "c must lie in [0, 1)");
  const Scalar gap = Scalar(1) - std::sqrt(c);
  return Scalar(1) / (gap * gap);
}

template <typename Scalar = double>
Scalar c_from_cstar(Scalar cstar) {
  require(cstar >= Scalar(1), ErrorClass::Domain, "C* must be >= 1");
  const Scalar gap = Scalar(1) - Scalar(1) / std::sqrt(cstar);
  return gap * gap;
}

struct TracyWidomFit {
  double cstar_inf = 0.0;
  double b = 0.0;
  double residual_norm = 0.0;
  std::size_t points = 0;

  double predict(double kn) const { return cstar_inf + b * std::pow(kn, -2.0 / 3.0); }
};

// Least-squares fit of C*(KN) = C*_inf + b KN^{-2/3}.
inline TracyWidomFit tracy_widom_fit(const std::vector<std::pair<double, double>>& points) {
  require(points.size() >= 3, ErrorClass::Domain, "Tracy-Widom fit needs at least 3 points");
  Matrix<double> X(points.size(), 2);
  Vector<double> y(points.size());
  bool distinct = false;
  for (std::size_t i = 0; i < points.size(); ++i) {
    require(points[i].first > 0, ErrorClass::Domain, "KN must be positive");
    X(i, 0) = 1.0;
    X(i, 1) = std::pow(points[i].first, -2.0 / 3.0);
    y(i) = points[i].second;
    if (points[i].first != points[0].first) distinct = true;
  }
  require(distinct, ErrorClass::Domain, "rank-deficient design: all KN values are equal");
  const Vector<double> coef = X.colPivHouseholderQr().solve(y);
  TracyWidomFit fit;
  fit.cstar_inf = coef(0);
  fit.b = coef(1);
  fit.residual_norm = (X * coef - y).norm();
  fit.points = points.size();
  return fit;
}

struct RademacherBound {
  double value = 0.0;
  double operator_factor = 1.0;  // max_i |G(X_i)|_op when an operator is supplied
  bool monotone_regime = true;   // r <= (m + n) / 2
};

// (B / sqrt(N)) sqrt(r(m+n) - r^2) times the operator factor.
inline RademacherBound rademacher_bound(double B, long long m, long long n, long long r,
                                        long long N, double operator_factor = 1.0) {
  require(B > 0 && N > 0, ErrorClass::Domain, "rademacher_bound requires B, N > 0");
  require(r >= 0, ErrorClass::Domain, "rank must be non-negative");
  RademacherBound out;
  out.operator_factor = operator_factor;
  out.monotone_regime = 2 * r <= m + n;
  if (r == 0) return out;
  out.value = operator_factor * B / std::sqrt(double(N)) * std::sqrt(double(lora_capacity(m, n, r)));
  return out;
}

struct ThresholdReport {
  long long m = 0, n = 0, K = 0, N = 0;
  int old_min_rank = 0;
  std::optional<int> new_min_rank;  // empty when infeasible
  double max_capacity = 0.0;
  double cstar_used = 0.0;
  // Commonly quoted prescription for the K = 2, N = 32 few-shot setup. It
  // differs from the literal evaluation of r(r+1)/2 > KN (11); both are shown.
  std::optional<int> quoted_old_rank;
  std::vector<std::pair<int, double>> rho_at;  // (r, dim-fraction)
};

inline ThresholdReport threshold_report(long long m, long long n, long long K, long long N,
                                        double cstar, const std::vector<int>& ranks) {
  ThresholdReport rep;
  rep.m = m;
  rep.n = n;
  rep.K = K;
  rep.N = N;
  rep.cstar_used = cstar;
  rep.old_min_rank = old_min_rank(K, N);
  try {
    rep.new_min_rank = new_min_rank(m, n, K, N, cstar);
  } catch (const InfeasibleError& e) {
    rep.max_capacity = e.max_capacity();
  }
  if (K == 2 && N == 32) rep.quoted_old_rank = 12;
  for (int r : ranks) rep.rho_at.emplace_back(r, dim_fraction(m, n, r, K, N));
  return rep;
}

struct PLEstimate {
  double mu_hat = 0.0;
  double l_star = 0.0;
  std::size_t pairs_used = 0;
  std::size_t trajectory_length = 0;
};

// mu_hat = min over recorded (loss, |grad|) of |grad|^2 / (2 (loss - L*)),
// skipping pairs within `guard` of L*.
inline PLEstimate pl_estimate(const std::vector<std::pair<double, double>>& trajectory,
                              double l_star, double guard = 1e-12) {
  require(trajectory.size() >= 2, ErrorClass::Domain,
          "PL estimate needs at least 2 recorded (loss, grad_norm) pairs");
  PLEstimate est;
  est.l_star = l_star;
  est.trajectory_length = trajectory.size();
  est.mu_hat = std::numeric_limits<double>::infinity();
  for (const auto& [loss, grad] : trajectory) {
    const double gap = loss - l_star;
    if (!(gap > guard)) continue;
    est.mu_hat = std::min(est.mu_hat, 0.5 * grad * grad / gap);
    ++est.pairs_used;
  }
  if (est.pairs_used == 0)
    fail(ErrorClass::Undefined, "every recorded loss is within the denominator guard of L*");
  return est;
}

}  // namespace lorank

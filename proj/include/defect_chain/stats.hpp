#ifndef DEFECT_CHAIN_STATS_HPP
#define DEFECT_CHAIN_STATS_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "defect_chain/error.hpp"

namespace defect_chain::stats {

/// Two-sided Student-t critical value t_{(1+c)/2, df}.
inline double student_t_factor(double confidence, double degrees_of_freedom) {
  if (!(confidence > 0.0 && confidence < 1.0))
    throw ParameterError("confidence must lie in (0, 1)");
  if (!(degrees_of_freedom > 0.0))
    throw ParameterError("student-t needs at least one degree of freedom");
  boost::math::students_t dist(degrees_of_freedom);
  return boost::math::quantile(dist, 0.5 * (1.0 + confidence));
}

/// Standard normal quantile.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ParameterError("probability must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal(), p);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double mean(std::span<const double> x) {
  if (x.empty()) throw DataError("mean of empty sample");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

/// Unbiased sample variance (n - 1 denominator).
inline double sample_variance(std::span<const double> x) {
  if (x.size() < 2) throw DataError("variance needs at least two values");
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

/// Lower empirical quantile: the ceil(p n)-th order statistic (1-based), so
/// quantile(1/n) is the sample minimum.
inline double empirical_quantile(std::vector<double> x, double p) {
  if (x.empty()) throw DataError("quantile of empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("quantile level must lie in [0, 1]");
  std::sort(x.begin(), x.end());
  const auto n = static_cast<double>(x.size());
  auto k = static_cast<std::size_t>(std::ceil(p * n - 1e-12));
  k = std::clamp<std::size_t>(k, 1, x.size());
  return x[k - 1];
}

}  // namespace defect_chain::stats

#endif  // DEFECT_CHAIN_STATS_HPP

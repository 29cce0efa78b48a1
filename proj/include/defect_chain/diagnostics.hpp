#ifndef DEFECT_CHAIN_DIAGNOSTICS_HPP
#define DEFECT_CHAIN_DIAGNOSTICS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "defect_chain/error.hpp"

namespace defect_chain::diagnostics {

/// Integrated autocorrelation time 1 + 2 sum rho_k, summed up to the first
/// window M with M >= c tau(M). A constant series has tau = 1.
inline double iact(std::span<const double> x, double c = 5.0) {
  const std::size_t n = x.size();
  if (n < 100) throw DiagnosticError("autocorrelation time needs at least 100 values");
  if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) return 1.0;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double c0 = 0.0;
  for (double v : x) c0 += (v - mean) * (v - mean);
  c0 /= static_cast<double>(n);
  if (!(c0 > 0.0)) return 1.0;
  double tau = 1.0;
  for (std::size_t k = 1; k < n; ++k) {
    double ck = 0.0;
    for (std::size_t i = 0; i + k < n; ++i) ck += (x[i] - mean) * (x[i + k] - mean);
    tau += 2.0 * ck / (static_cast<double>(n) * c0);
    if (static_cast<double>(k) >= c * tau) return std::max(tau, 1.0 / static_cast<double>(n));
  }
  throw DiagnosticError("autocorrelation window did not close; series too short");
}

/// Per-component IACT of a sequence of state vectors. Components with zero
/// variance report 1.
inline Eigen::VectorXd iact_components(const std::vector<Eigen::VectorXd>& states,
                                       double c = 5.0) {
  if (states.empty()) throw DiagnosticError("no states");
  const auto d = states.front().size();
  Eigen::VectorXd out(d);
  std::vector<double> series(states.size());
  for (Eigen::Index i = 0; i < d; ++i) {
    for (std::size_t k = 0; k < states.size(); ++k) series[k] = states[k][i];
    out[i] = iact(series, c);
  }
  return out;
}

struct ConvergenceReport {
  Eigen::VectorXd rhat;             // sqrt(1 + B / (n W)) per component, whole chains
  Eigen::VectorXd split_rhat;       // same statistic on half-chains
  Eigen::VectorXd mean_discrepancy; // max pairwise |mean_a - mean_b| / pooled std
  double threshold = 1.1;
  double max_rhat = 1.0;
  double max_split_rhat = 1.0;
  bool converged = true;
};

namespace detail {

/// sqrt(1 + B / (n W)) with B = n var(chain means), W = mean within-chain
/// variance; identical chains give exactly 1.
inline double scale_reduction(const std::vector<std::vector<double>>& chains) {
  const auto m = chains.size();
  const auto n = chains.front().size();
  std::vector<double> means(m);
  double w = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (double v : chains[j]) s += v;
    means[j] = s / static_cast<double>(n);
    double ss = 0.0;
    for (double v : chains[j]) ss += (v - means[j]) * (v - means[j]);
    w += ss / static_cast<double>(n - 1);
  }
  w /= static_cast<double>(m);
  double grand = 0.0;
  for (double v : means) grand += v;
  grand /= static_cast<double>(m);
  double var_means = 0.0;
  for (double v : means) var_means += (v - grand) * (v - grand);
  var_means /= static_cast<double>(m - 1);
  if (var_means == 0.0) return 1.0;
  if (!(w > 0.0)) return std::numeric_limits<double>::infinity();
  return std::sqrt(1.0 + var_means / w);
}

}  // namespace detail

/// Multi-chain convergence over equal-length post-burn-in draws.
inline ConvergenceReport chain_convergence(const std::vector<std::vector<Eigen::VectorXd>>& chains,
                                           double threshold = 1.1) {
  if (chains.size() < 2) throw DiagnosticError("convergence check needs at least two chains");
  const auto n = chains.front().size();
  if (n < 4) throw DiagnosticError("chains are too short for a convergence check");
  for (const auto& c : chains)
    if (c.size() != n) throw DiagnosticError("chains must have equal length");
  const auto d = chains.front().front().size();
  ConvergenceReport r;
  r.threshold = threshold;
  r.rhat.resize(d);
  r.split_rhat.resize(d);
  r.mean_discrepancy.resize(d);
  const auto half = n / 2;
  for (Eigen::Index i = 0; i < d; ++i) {
    std::vector<std::vector<double>> whole, split;
    for (const auto& c : chains) {
      std::vector<double> s(n);
      for (std::size_t k = 0; k < n; ++k) s[k] = c[k][i];
      split.emplace_back(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(half));
      split.emplace_back(s.end() - static_cast<std::ptrdiff_t>(half), s.end());
      whole.push_back(std::move(s));
    }
    r.rhat[i] = detail::scale_reduction(whole);
    r.split_rhat[i] = detail::scale_reduction(split);

    double pooled = 0.0;
    std::vector<double> means;
    for (const auto& s : whole) {
      double m = 0.0;
      for (double v : s) m += v;
      m /= static_cast<double>(n);
      means.push_back(m);
      for (double v : s) pooled += (v - m) * (v - m);
    }
    pooled = std::sqrt(pooled / static_cast<double>(whole.size() * (n - 1)));
    double worst = 0.0;
    for (std::size_t a = 0; a < means.size(); ++a)
      for (std::size_t b = a + 1; b < means.size(); ++b) {
        const double gap = std::abs(means[a] - means[b]);
        worst = std::max(worst, gap == 0.0 ? 0.0 : gap / pooled);
      }
    r.mean_discrepancy[i] = worst;
  }
  r.max_rhat = r.rhat.maxCoeff();
  r.max_split_rhat = r.split_rhat.maxCoeff();
  r.converged = r.max_rhat < threshold && r.max_split_rhat < threshold;
  return r;
}

}  // namespace defect_chain::diagnostics

#endif  // DEFECT_CHAIN_DIAGNOSTICS_HPP

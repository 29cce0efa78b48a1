#ifndef DEFECT_CHAIN_OPTIMIZE_HPP
#define DEFECT_CHAIN_OPTIMIZE_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace defect_chain::optimize {

struct ScalarMinimum {
  double x;
  double value;
};

/// Golden-section search for a minimum of a unimodal function on [lo, hi].
/// Stops once the bracket is narrower than `tol`.
template <class F>
ScalarMinimum golden_section(F&& f, double lo, double hi, double tol) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - inv_phi * (hi - lo);
  double d = lo + inv_phi * (hi - lo);
  double fc = f(c);
  double fd = f(d);
  while (hi - lo > tol) {
    if (fc <= fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - inv_phi * (hi - lo);
      fc = f(c);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + inv_phi * (hi - lo);
      fd = f(d);
    }
  }
  return fc <= fd ? ScalarMinimum{c, fc} : ScalarMinimum{d, fd};
}

struct SimplexResult {
  std::vector<double> x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Nelder-Mead downhill simplex with the standard coefficients
/// (reflection 1, expansion 2, contraction 1/2, shrink 1/2).
/// Converges when both the simplex diameter (relative to `x_tol`) and the
/// spread of function values fall below tolerance.
template <class F>
SimplexResult nelder_mead(F&& f, std::vector<double> x0, std::vector<double> step,
                          double x_tol = 1e-8, double f_tol = 1e-12, int max_iter = 2000) {
  const std::size_t n = x0.size();
  std::vector<std::vector<double>> pts(n + 1, x0);
  for (std::size_t i = 0; i < n; ++i) pts[i + 1][i] += step[i];
  std::vector<double> vals(n + 1);
  for (std::size_t i = 0; i <= n; ++i) vals[i] = f(pts[i]);

  std::vector<std::size_t> order(n + 1);
  auto combine = [n](const std::vector<double>& a, const std::vector<double>& b, double t) {
    std::vector<double> r(n);
    for (std::size_t k = 0; k < n; ++k) r[k] = a[k] + t * (b[k] - a[k]);
    return r;
  };

  SimplexResult res;
  for (int it = 0; it < max_iter; ++it) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return vals[a] < vals[b]; });
    const auto best = order.front();
    const auto worst = order.back();
    const auto second = order[n - 1];

    double diam = 0.0;
    for (std::size_t i = 0; i <= n; ++i)
      for (std::size_t k = 0; k < n; ++k)
        diam = std::max(diam, std::abs(pts[i][k] - pts[best][k]) /
                                  std::max(1.0, std::abs(pts[best][k])));
    if (diam < x_tol && std::abs(vals[worst] - vals[best]) <= f_tol * (1.0 + std::abs(vals[best]))) {
      res.converged = true;
      res.iterations = it;
      break;
    }
    res.iterations = it + 1;

    std::vector<double> centroid(n, 0.0);
    for (std::size_t i = 0; i <= n; ++i) {
      if (i == worst) continue;
      for (std::size_t k = 0; k < n; ++k) centroid[k] += pts[i][k] / static_cast<double>(n);
    }
    auto reflected = combine(centroid, pts[worst], -1.0);
    const double fr = f(reflected);
    if (fr < vals[best]) {
      auto expanded = combine(centroid, pts[worst], -2.0);
      const double fe = f(expanded);
      if (fe < fr) {
        pts[worst] = std::move(expanded);
        vals[worst] = fe;
      } else {
        pts[worst] = std::move(reflected);
        vals[worst] = fr;
      }
      continue;
    }
    if (fr < vals[second]) {
      pts[worst] = std::move(reflected);
      vals[worst] = fr;
      continue;
    }
    const bool outside = fr < vals[worst];
    auto contracted = combine(centroid, outside ? reflected : pts[worst], 0.5);
    const double fc = f(contracted);
    if (fc < (outside ? fr : vals[worst])) {
      pts[worst] = std::move(contracted);
      vals[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i <= n; ++i) {
      if (i == best) continue;
      pts[i] = combine(pts[best], pts[i], 0.5);
      vals[i] = f(pts[i]);
    }
  }
  const auto best =
      static_cast<std::size_t>(std::min_element(vals.begin(), vals.end()) - vals.begin());
  res.x = pts[best];
  res.value = vals[best];
  return res;
}

}  // namespace defect_chain::optimize

#endif  // DEFECT_CHAIN_OPTIMIZE_HPP

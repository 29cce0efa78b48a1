#ifndef DEFECT_CHAIN_PROPAGATE_HPP
#define DEFECT_CHAIN_PROPAGATE_HPP

// From wrinkle samples to strength: forward models, Monte Carlo estimates,
// Weibull and slope-knockdown fits.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "defect_chain/error.hpp"
#include "defect_chain/klfield.hpp"
#include "defect_chain/optimize.hpp"
#include "defect_chain/parallel.hpp"
#include "defect_chain/stats.hpp"

namespace defect_chain::propagate {

using klfield::WrinkleParams;

/// Ply strengths in MPa.
struct Allowables {
  double s13 = 97.0;
  double s23 = 97.0;
  double s33 = 61.0;

  void validate() const {
    if (!(s13 > 0.0 && s23 > 0.0 && s33 > 0.0)) throw ParameterError("allowables must be positive");
  }
};

/// Camanho failure index; compressive sigma_33 does not contribute.
inline double camanho(double sigma33, double sigma23, double sigma13, const Allowables& allow = {}) {
  allow.validate();
  if (!std::isfinite(sigma33) || !std::isfinite(sigma23) || !std::isfinite(sigma13))
    throw ParameterError("stresses must be finite");
  const double t = std::max(sigma33, 0.0) / allow.s33;
  return std::sqrt(t * t + std::pow(sigma23 / allow.s23, 2) + std::pow(sigma13 / allow.s13, 2));
}

/// max |dW/dx1| over the grid. The slope separates as a(x1) g3(x3), so the
/// maximum is max|a| times max|g3|.
inline double max_abs_slope(const klfield::WrinkleField& field, const klfield::SectionGrid& grid) {
  double along = 0.0, through = 0.0;
  for (double x : grid.x1) along = std::max(along, std::abs(field.along_slope_factor(x)));
  for (double z : grid.x3) through = std::max(through, std::abs(field.decay().through.value(z)));
  return along * through;
}

inline double max_abs_slope(const WrinkleParams& xi, const klfield::KLBasis& basis,
                            const klfield::DecaySpec& decay, const klfield::SectionGrid& grid) {
  return max_abs_slope(klfield::WrinkleField(xi, basis, decay), grid);
}

/// Max slope of sampled wrinkles through a lambda cache.
class SlopeEvaluator {
 public:
  SlopeEvaluator(std::shared_ptr<const klfield::BasisCache> cache, klfield::DecaySpec decay,
                 klfield::SectionGrid grid)
      : cache_(std::move(cache)), decay_(decay), grid_(std::move(grid)) {}

  double operator()(const WrinkleParams& xi) const {
    return max_abs_slope(xi, *cache_->get(xi.length_scale), decay_, grid_);
  }

  const klfield::BasisCache& cache() const noexcept { return *cache_; }
  const klfield::DecaySpec& decay() const noexcept { return decay_; }
  const klfield::SectionGrid& grid() const noexcept { return grid_; }

 private:
  std::shared_ptr<const klfield::BasisCache> cache_;
  klfield::DecaySpec decay_;
  klfield::SectionGrid grid_;
};

// ---------------------------------------------------------------------------
// Slope-knockdown surrogate: M_c = M_star exp(-s^q / lambda_q).

struct SurrogateModel {
  double m_star = 8.93;  // kN mm / mm
  double q = 2.867;
  double lambda_q = 4.212;
  std::optional<double> q_lower = 2.587;
  std::optional<double> lambda_lower = 3.834;

  void validate() const {
    if (!(m_star > 0.0 && q > 0.0 && lambda_q > 0.0))
      throw ParameterError("surrogate parameters must be positive");
    if (q_lower.has_value() != lambda_lower.has_value())
      throw ParameterError("lower-bound surrogate needs both q and lambda_q");
    if (q_lower && !(*q_lower > 0.0 && *lambda_lower > 0.0))
      throw ParameterError("lower-bound surrogate parameters must be positive");
  }
};

inline double surrogate_strength(double slope, double m_star, double q, double lambda_q) {
  if (!(slope >= 0.0)) throw ParameterError("slope must be non-negative");
  return m_star * std::exp(-std::pow(slope, q) / lambda_q);
}

inline double surrogate_strength(double slope, const SurrogateModel& m) {
  return surrogate_strength(slope, m.m_star, m.q, m.lambda_q);
}

inline double surrogate_lower_bound(double slope, const SurrogateModel& m) {
  if (!m.q_lower) throw ParameterError("surrogate has no lower-bound parameters");
  return surrogate_strength(slope, m.m_star, *m.q_lower, *m.lambda_lower);
}

struct SurrogateFit {
  SurrogateModel model;
  double rms_relative = 0.0;  // RMS of (fitted - observed) / observed
  std::size_t n_pairs = 0;
  std::size_t n_floored = 0;
};

struct SlopeStrength {
  double slope;
  double mc;
};

/// Fits y = ln(M_star / M_c) = s^q / lambda_q. For fixed q the model is linear
/// in c = 1 / lambda_q, so c is profiled out and q found by a scan plus golden
/// section. The lower bound repeats this with the 0.99 check loss in place of
/// squared error, i.e. a 99% quantile regression of y on s^q.
inline SurrogateFit fit_surrogate(const std::vector<SlopeStrength>& pairs, double m_star) {
  if (pairs.size() < 5) throw ParameterError("surrogate fit needs at least 5 pairs");
  if (!(m_star > 0.0)) throw ParameterError("M_star must be positive");
  constexpr double floor = 1e-9;
  SurrogateFit out;
  out.n_pairs = pairs.size();
  std::vector<double> s, y;
  for (const auto& p : pairs) {
    if (!(p.slope > 0.0) || !std::isfinite(p.slope)) throw ParameterError("surrogate fit needs positive slopes");
    if (!(p.mc > 0.0) || !std::isfinite(p.mc)) throw ParameterError("strengths must be positive");
    double v = std::log(m_star / p.mc);
    if (v < floor) {
      v = floor;
      ++out.n_floored;
    }
    s.push_back(p.slope);
    y.push_back(v);
  }
  if (out.n_floored == pairs.size()) throw FitError("surrogate fit is degenerate (no strength loss)");
  const auto [smin, smax] = std::minmax_element(s.begin(), s.end());
  if (*smax / *smin < 1.0 + 1e-9) throw FitError("surrogate fit needs a spread of slopes");

  // Work in t = s / s_ref so that s^q stays well scaled for large q.
  const double s_ref = std::sqrt(*smin * *smax);
  auto powers = [&](double q) {
    std::vector<double> t(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::pow(s[i] / s_ref, q);
    return t;
  };
  auto ls_c = [&](const std::vector<double>& t) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      num += y[i] * t[i];
      den += t[i] * t[i];
    }
    return num / den;
  };
  auto sse = [&](double q) {
    const auto t = powers(q);
    const double c = ls_c(t);
    double e = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) e += std::pow(y[i] - c * t[i], 2);
    return e;
  };
  // c minimising sum of tau-check losses of y - c t: weighted quantile of y/t.
  auto quantile_c = [&](const std::vector<double>& t, double tau) {
    std::vector<std::size_t> idx(t.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return y[a] / t[a] < y[b] / t[b]; });
    double total = 0.0;
    for (double v : t) total += v;
    double acc = 0.0;
    for (auto i : idx) {
      acc += t[i];
      if (acc >= tau * total) return y[i] / t[i];
    }
    return y[idx.back()] / t[idx.back()];
  };
  auto check = [&](double q, double tau) {
    const auto t = powers(q);
    const double c = quantile_c(t, tau);
    double e = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double r = y[i] - c * t[i];
      e += r >= 0.0 ? tau * r : (tau - 1.0) * r;
    }
    return e;
  };
  auto minimise = [&](auto&& f) {
    constexpr double lo = 0.05, hi = 12.0;
    constexpr int n = 240;
    int best = 0;
    double fbest = std::numeric_limits<double>::infinity();
    for (int k = 0; k <= n; ++k) {
      const double v = f(lo + (hi - lo) * k / n);
      if (v < fbest) {
        fbest = v;
        best = k;
      }
    }
    const double step = (hi - lo) / n;
    const double a = std::max(lo, lo + (best - 1) * step), b = std::min(hi, lo + (best + 1) * step);
    return optimize::golden_section(f, a, b, 1e-10).x;
  };

  const double q = minimise(sse);
  const double c = ls_c(powers(q));
  if (!(c > 0.0) || !std::isfinite(c)) throw FitError("surrogate fit is degenerate (no strength loss)");
  out.model.m_star = m_star;
  out.model.q = q;
  out.model.lambda_q = std::pow(s_ref, q) / c;

  const double tau = 0.99;
  const double ql = minimise([&](double v) { return check(v, tau); });
  const double cl = quantile_c(powers(ql), tau);
  if (cl > 0.0 && std::isfinite(cl)) {
    out.model.q_lower = ql;
    out.model.lambda_lower = std::pow(s_ref, ql) / cl;
  } else {
    out.model.q_lower.reset();
    out.model.lambda_lower.reset();
  }

  double e = 0.0;
  for (const auto& p : pairs) e += std::pow((surrogate_strength(p.slope, out.model) - p.mc) / p.mc, 2);
  out.rms_relative = std::sqrt(e / static_cast<double>(pairs.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Forward strength models.

class ForwardStrengthModel {
 public:
  virtual ~ForwardStrengthModel() = default;
  /// Critical moment M_c in kN mm / mm; deterministic in xi.
  virtual double evaluate(const WrinkleParams& xi, std::size_t sample_id) const = 0;
  virtual std::string id() const = 0;
  /// Degrees-of-freedom proxy; 0 for models without a mesh.
  virtual double fidelity() const { return 0.0; }
  virtual std::string bias_note() const { return ""; }
};

class SurrogateStrengthModel : public ForwardStrengthModel {
 public:
  SurrogateStrengthModel(SurrogateModel model, SlopeEvaluator slope)
      : model_(model), slope_(std::move(slope)) {
    model_.validate();
  }

  double evaluate(const WrinkleParams& xi, std::size_t) const override {
    return surrogate_strength(slope_(xi), model_);
  }
  std::string id() const override { return "surrogate"; }
  std::string bias_note() const override {
    return "model-form error of the slope surrogate relative to the FE model is not estimated";
  }
  const SurrogateModel& model() const noexcept { return model_; }

 private:
  SurrogateModel model_;
  SlopeEvaluator slope_;
};

// ---------------------------------------------------------------------------
// Monte Carlo.

struct StrengthSample {
  std::size_t id = 0;
  double max_slope = std::numeric_limits<double>::quiet_NaN();
  double mc = std::numeric_limits<double>::quiet_NaN();
  bool ok = false;
  std::string error;
};

struct StrengthDistribution {
  std::string model_id;
  std::vector<StrengthSample> samples;
  std::size_t n_ok = 0;
  double mean = 0.0;
  double variance = 0.0;        // unbiased, over successful samples
  double sampling_error = 0.0;  // variance / N
  double ci95_half_width = 0.0; // one-sided, normal approximation
  std::string bias_note;

  std::vector<double> strengths() const {
    std::vector<double> v;
    for (const auto& s : samples)
      if (s.ok) v.push_back(s.mc);
    return v;
  }
};

inline void summarise(StrengthDistribution& d) {
  const auto v = d.strengths();
  d.n_ok = v.size();
  if (v.empty()) return;
  d.mean = stats::mean(v);
  d.variance = v.size() >= 2 ? stats::sample_variance(v) : 0.0;
  d.sampling_error = d.variance / static_cast<double>(v.size());
  d.ci95_half_width = stats::normal_quantile(0.95) * std::sqrt(d.sampling_error);
}

/// Evaluates every sample (in parallel) and reduces in sample order. Model
/// failures are recorded per sample. `slope` may be null.
inline StrengthDistribution monte_carlo(const std::vector<WrinkleParams>& samples,
                                        const ForwardStrengthModel& model,
                                        const SlopeEvaluator* slope = nullptr, int workers = 1) {
  if (samples.empty()) throw DataError("no samples to propagate");
  StrengthDistribution d;
  d.model_id = model.id();
  d.bias_note = model.bias_note();
  d.samples.resize(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    auto& s = d.samples[i];
    s.id = i;
    try {
      if (slope) s.max_slope = (*slope)(samples[i]);
      s.mc = model.evaluate(samples[i], i);
      if (!(s.mc > 0.0) || !std::isfinite(s.mc)) throw NumericalError("non-positive strength");
      s.ok = true;
    } catch (const std::exception& e) {
      s.ok = false;
      s.error = e.what();
    }
  });
  summarise(d);
  return d;
}

// ---------------------------------------------------------------------------
// Weibull.

struct WeibullFit {
  double modulus = 0.0;  // M_W
  double scale = 0.0;    // M_S
  int iterations = 0;
  double log_likelihood = 0.0;
  std::size_t n = 0;

  double cdf(double m) const { return m <= 0.0 ? 0.0 : 1.0 - std::exp(-std::pow(m / scale, modulus)); }
};

/// Maximum likelihood for P(M) = 1 - exp(-(M / M_S)^M_W): Newton on the
/// profile equation for M_W, then M_S in closed form.
inline WeibullFit weibull_fit(const std::vector<double>& data) {
  if (data.size() < 10) throw ParameterError("Weibull fit needs at least 10 samples");
  for (double v : data)
    if (!(v > 0.0) || !std::isfinite(v)) throw FitError("Weibull fit needs positive strengths");
  const double top = *std::max_element(data.begin(), data.end());
  const double bottom = *std::min_element(data.begin(), data.end());
  if (top == bottom) throw FitError("Weibull fit is degenerate: all strengths equal");
  // normalise so that x <= 1; the fit is then exactly scale-equivariant
  const auto n = static_cast<double>(data.size());
  std::vector<double> lx(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) lx[i] = std::log(data[i] / top);
  double mean_lx = 0.0;
  for (double v : lx) mean_lx += v;
  mean_lx /= n;

  // g(k) = 1/k + mean(ln x) - sum x^k ln x / sum x^k, decreasing in k
  auto g_and_dg = [&](double k, double& g, double& dg) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    for (double l : lx) {
      const double w = std::exp(k * l);
      s0 += w;
      s1 += w * l;
      s2 += w * l * l;
    }
    g = 1.0 / k + mean_lx - s1 / s0;
    dg = -1.0 / (k * k) - (s2 / s0 - (s1 / s0) * (s1 / s0));
  };
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  double k = 1.2 / std::sqrt(stats::sample_variance(lx));  // method-of-moments start
  WeibullFit fit;
  fit.n = data.size();
  bool done = false;
  for (int it = 1; it <= 200; ++it) {
    double g, dg;
    g_and_dg(k, g, dg);
    fit.iterations = it;
    if (g > 0.0) lo = k; else hi = k;
    double next = k - g / dg;
    if (!(next > lo && next < hi)) next = std::isinf(hi) ? 2.0 * k : 0.5 * (lo + hi);
    if (std::abs(next - k) <= 1e-13 * k) {
      k = next;
      done = true;
      break;
    }
    k = next;
  }
  if (!done || !std::isfinite(k)) throw FitError("Weibull modulus iteration did not converge", {k});
  double s0 = 0.0;
  for (double l : lx) s0 += std::exp(k * l);
  fit.modulus = k;
  fit.scale = top * std::pow(s0 / n, 1.0 / k);
  double ll = 0.0;
  for (double v : data) {
    const double z = v / fit.scale;
    ll += std::log(k / fit.scale) + (k - 1.0) * std::log(z) - std::pow(z, k);
  }
  fit.log_likelihood = ll;
  return fit;
}

struct CdfPoint {
  double mc;
  double empirical;  // (i - 0.5) / n
  double fitted;
};

inline std::vector<CdfPoint> cdf_points(std::vector<double> data, const std::optional<WeibullFit>& fit) {
  std::sort(data.begin(), data.end());
  std::vector<CdfPoint> pts;
  const auto n = static_cast<double>(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    pts.push_back({data[i], (static_cast<double>(i) + 0.5) / n,
                   fit ? fit->cdf(data[i]) : std::numeric_limits<double>::quiet_NaN()});
  return pts;
}

// ---------------------------------------------------------------------------
// Knockdown summary.

struct KnockdownReport {
  double m_star = 0.0;
  std::size_t n = 0;
  double mean = 0.0;
  double mean_knockdown = 0.0;   // 1 - mean / M_star
  double worst = 0.0;            // smallest strength
  double worst_knockdown = 0.0;  // 1 - worst / M_star
  double worst_retained = 0.0;   // worst / M_star
  std::vector<std::pair<double, double>> quantiles;  // (level, strength)
  std::optional<WeibullFit> weibull;
  std::string weibull_error;
  std::optional<SurrogateFit> surrogate;
  std::string surrogate_error;
};

inline KnockdownReport knockdown_report(const StrengthDistribution& dist, double m_star,
                                        std::vector<double> levels = {0.005, 0.01, 0.05, 0.5}) {
  const auto v = dist.strengths();
  if (v.empty()) throw DataError("no successful strength samples to report");
  if (!(m_star > 0.0)) throw ParameterError("M_star must be positive");
  KnockdownReport r;
  r.m_star = m_star;
  r.n = v.size();
  r.mean = stats::mean(v);
  r.mean_knockdown = 1.0 - r.mean / m_star;
  r.worst = *std::min_element(v.begin(), v.end());
  r.worst_knockdown = 1.0 - r.worst / m_star;
  r.worst_retained = r.worst / m_star;
  for (double p : levels) r.quantiles.emplace_back(p, stats::empirical_quantile(v, p));
  try {
    r.weibull = weibull_fit(v);
  } catch (const Error& e) {
    r.weibull_error = e.what();
  }
  std::vector<SlopeStrength> pairs;
  for (const auto& s : dist.samples)
    if (s.ok && std::isfinite(s.max_slope) && s.max_slope > 0.0) pairs.push_back({s.max_slope, s.mc});
  try {
    r.surrogate = fit_surrogate(pairs, m_star);
  } catch (const Error& e) {
    r.surrogate_error = e.what();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Output.

inline void write_strength_csv(const StrengthDistribution& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "sample_id,max_slope,Mc\n";
  for (const auto& s : d.samples) {
    out << s.id << ',' << s.max_slope << ',';
    if (s.ok) out << s.mc; else out << "nan";
    out << '\n';
  }
}

inline void write_cdf_csv(const std::vector<CdfPoint>& pts, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "Mc,empirical_cdf,weibull_cdf\n";
  for (const auto& p : pts) out << p.mc << ',' << p.empirical << ',' << p.fitted << '\n';
}

}  // namespace defect_chain::propagate

#endif  // DEFECT_CHAIN_PROPAGATE_HPP

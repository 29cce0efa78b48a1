#ifndef DEFECT_CHAIN_BAYES_HPP
#define DEFECT_CHAIN_BAYES_HPP

// Posterior over wrinkle parameters xi = [a_1 .. a_Nw, lambda] given several
// observed misalignment fields.
//
//   delta_i(xi) = 1/2 |F(xi) - d_i|^2 / s2     misfit to observation i
//   Delta(xi)   = min_i delta_i(xi)            closest observation
//   log pi(xi)  = -Delta(xi) + log pi_0(xi)    pi_0 independent Gaussian
//
// F maps xi to arctan(dW/dx1) at the observation's own points. Sampling is
// pCN Metropolis-Hastings in whitened coordinates z = (xi - mu_0) / sigma_0.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "defect_chain/diagnostics.hpp"
#include "defect_chain/error.hpp"
#include "defect_chain/klfield.hpp"
#include "defect_chain/mfia.hpp"
#include "defect_chain/optimize.hpp"
#include "defect_chain/parallel.hpp"
#include "defect_chain/rng.hpp"
#include "defect_chain/stats.hpp"

namespace defect_chain::bayes {

using klfield::DecaySpec;
using klfield::KLBasis;
using klfield::SectionGrid;
using klfield::WrinkleField;
using klfield::WrinkleParams;
using mfia::MisalignmentSamples;

constexpr double neg_inf = -std::numeric_limits<double>::infinity();

struct ObservationSet {
  std::vector<MisalignmentSamples> observations;

  std::size_t size() const noexcept { return observations.size(); }

  std::size_t min_points() const {
    std::size_t m = std::numeric_limits<std::size_t>::max();
    for (const auto& o : observations) m = std::min(m, o.size());
    return m;
  }

  void validate() const {
    if (observations.empty()) throw DataError("need at least one observation");
    for (const auto& o : observations) {
      if (o.points.empty()) throw DataError("observation " + o.source + " has no points");
      o.validate();
    }
  }
};

enum class MisfitNorm { squared, as_written };

/// Sigma_eps = tau * accuracy * I.
struct NoiseModel {
  double accuracy = 0.044;
  double tau = 1.0;
  MisfitNorm norm = MisfitNorm::squared;

  double variance() const noexcept { return tau * accuracy; }

  void validate() const {
    if (!(accuracy > 0.0) || !(tau > 0.0)) throw ParameterError("noise scale must be positive");
  }

  /// tau = t_{(1+c)/2, N-1} / z_{(1+c)/2}, which tends to 1 as N grows.
  static NoiseModel for_sample_count(std::size_t n_phi, double accuracy = 0.044,
                                     double confidence = 0.95,
                                     MisfitNorm norm = MisfitNorm::squared) {
    if (n_phi < 2) throw ParameterError("need at least two data points per observation");
    NoiseModel m;
    m.accuracy = accuracy;
    m.norm = norm;
    m.tau = stats::student_t_factor(confidence, static_cast<double>(n_phi - 1)) /
            stats::normal_quantile(0.5 * (1.0 + confidence));
    m.validate();
    return m;
  }
};

// ---------------------------------------------------------------------------
// Forward model and misfits.

/// F(xi): misalignment angles at the observation points.
inline Eigen::VectorXd forward_angles(const WrinkleField& field, const MisalignmentSamples& obs) {
  Eigen::VectorXd f(static_cast<Eigen::Index>(obs.size()));
  for (std::size_t j = 0; j < obs.size(); ++j)
    f[static_cast<Eigen::Index>(j)] =
        std::atan(field.slope_along({obs.points[j].x1_mm, obs.points[j].x3_mm}));
  return f;
}

inline Eigen::VectorXd observed_angles(const MisalignmentSamples& obs) {
  Eigen::VectorXd d(static_cast<Eigen::Index>(obs.size()));
  for (std::size_t j = 0; j < obs.size(); ++j)
    d[static_cast<Eigen::Index>(j)] = obs.points[j].phi_rad;
  return d;
}

inline double misfit_from_residual(const Eigen::VectorXd& r, const NoiseModel& noise) {
  const double q = r.squaredNorm() / noise.variance();
  return noise.norm == MisfitNorm::squared ? 0.5 * q : 0.5 * std::sqrt(q);
}

inline double misfit(const WrinkleField& field, const MisalignmentSamples& obs,
                     const NoiseModel& noise) {
  return misfit_from_residual(forward_angles(field, obs) - observed_angles(obs), noise);
}

inline double misfit(const WrinkleParams& xi, const MisalignmentSamples& obs,
                     const NoiseModel& noise, const KLBasis& basis, const DecaySpec& decay) {
  return misfit(WrinkleField(xi, basis, decay), obs, noise);
}

/// Delta = min_i delta_i. `closest` receives the minimising index.
inline double data_misfit(const WrinkleField& field, const ObservationSet& data,
                          const NoiseModel& noise, std::size_t* closest = nullptr) {
  if (data.observations.empty()) throw DataError("need at least one observation");
  double best = std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double d = misfit(field, data.observations[i], noise);
    if (d < best) {
      best = d;
      arg = i;
    }
  }
  if (closest) *closest = arg;
  return best;
}

inline double data_misfit(const WrinkleParams& xi, const ObservationSet& data,
                          const NoiseModel& noise, const KLBasis& basis, const DecaySpec& decay,
                          std::size_t* closest = nullptr) {
  return data_misfit(WrinkleField(xi, basis, decay), data, noise, closest);
}

// ---------------------------------------------------------------------------
// Prior.

/// Independent Gaussian over [a_1 .. a_Nw, lambda].
struct PriorModel {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
  double inflation = 1.0;
  std::size_t n_fits = 0;

  Eigen::Index dim() const noexcept { return mean.size(); }

  void validate() const {
    if (mean.size() < 2 || variance.size() != mean.size())
      throw ParameterError("prior mean and variance must have matching length >= 2");
    if (!mean.allFinite() || !(variance.array() > 0.0).all() || !variance.allFinite())
      throw ParameterError("prior variances must be positive and finite");
  }

  double log_density(const Eigen::VectorXd& xi) const {
    const Eigen::ArrayXd d = (xi - mean).array();
    return -0.5 * (d * d / variance.array()).sum() -
           0.5 * (2.0 * std::numbers::pi * variance.array()).log().sum();
  }

  Eigen::VectorXd whiten(const Eigen::VectorXd& xi) const {
    return ((xi - mean).array() / variance.array().sqrt()).matrix();
  }
  Eigen::VectorXd unwhiten(const Eigen::VectorXd& z) const {
    return (mean.array() + variance.array().sqrt() * z.array()).matrix();
  }

  Eigen::VectorXd sample(Rng& rng) const {
    std::normal_distribution<double> nd;
    Eigen::VectorXd z(dim());
    for (Eigen::Index i = 0; i < dim(); ++i) z[i] = nd(rng);
    return unwhiten(z);
  }
};

/// Mean and n-1 variance of the fitted components, the variance multiplied by
/// the two-sided Student-t factor for n-1 degrees of freedom.
inline PriorModel build_prior(const std::vector<WrinkleParams>& fits, double confidence = 0.95) {
  if (fits.size() < 2) throw ParameterError("prior needs at least two fitted observations");
  const Eigen::Index d = fits.front().size();
  Eigen::MatrixXd x(d, static_cast<Eigen::Index>(fits.size()));
  for (std::size_t k = 0; k < fits.size(); ++k) {
    if (fits[k].size() != d) throw ParameterError("fits have different numbers of modes");
    x.col(static_cast<Eigen::Index>(k)) = fits[k].to_vector();
  }
  PriorModel p;
  p.n_fits = fits.size();
  p.mean = x.rowwise().mean();
  const auto n = static_cast<double>(fits.size());
  p.variance = ((x.colwise() - p.mean).array().square().rowwise().sum() / (n - 1.0)).matrix();
  if (!(p.variance.array() > 0.0).all())
    throw ParameterError("degenerate prior: a component has zero variance across the fits");
  p.inflation = stats::student_t_factor(confidence, n - 1.0);
  p.variance *= p.inflation;
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Posterior.

/// Log posterior with an explicit basis; -inf for lambda <= 0 or a wrinkle
/// with det J <= 0 on the grid.
inline double log_posterior(const WrinkleParams& xi, const ObservationSet& data,
                            const PriorModel& prior, const NoiseModel& noise, const KLBasis& basis,
                            const DecaySpec& decay, const SectionGrid& grid) {
  if (!xi.finite() || !(xi.length_scale > 0.0)) return neg_inf;
  const WrinkleField field(xi, basis, decay);
  if (!(klfield::min_jacobian(field, grid) > 0.0)) return neg_inf;
  return -data_misfit(field, data, noise) + prior.log_density(xi.to_vector());
}

/// -Delta(xi) with bases drawn from a lambda cache. Shared read-only between
/// chains.
class MinMisfitLikelihood {
 public:
  MinMisfitLikelihood(ObservationSet data, NoiseModel noise,
                      std::shared_ptr<const klfield::BasisCache> cache, DecaySpec decay,
                      SectionGrid grid, bool enforce_admissible = true)
      : data_(std::move(data)),
        noise_(noise),
        cache_(std::move(cache)),
        decay_(decay),
        grid_(std::move(grid)),
        enforce_(enforce_admissible) {
    data_.validate();
    noise_.validate();
  }

  double operator()(const Eigen::VectorXd& xi_vec) const {
    const auto xi = WrinkleParams::from_vector(xi_vec);
    if (!xi.finite() || !(xi.length_scale >= cache_->quantum())) return neg_inf;
    const auto basis = cache_->get(xi.length_scale);
    const WrinkleField field(xi, *basis, decay_);
    if (enforce_ && !(klfield::min_jacobian(field, grid_) > 0.0)) return neg_inf;
    return -data_misfit(field, data_, noise_);
  }

  bool admissible(const Eigen::VectorXd& xi_vec) const {
    const auto xi = WrinkleParams::from_vector(xi_vec);
    if (!xi.finite() || !(xi.length_scale >= cache_->quantum())) return false;
    const auto basis = cache_->get(xi.length_scale);
    return klfield::min_jacobian(WrinkleField(xi, *basis, decay_), grid_) > 0.0;
  }

  std::size_t closest(const Eigen::VectorXd& xi_vec) const {
    const auto xi = WrinkleParams::from_vector(xi_vec);
    const auto basis = cache_->get(xi.length_scale);
    std::size_t i = 0;
    data_misfit(WrinkleField(xi, *basis, decay_), data_, noise_, &i);
    return i;
  }

  const ObservationSet& data() const noexcept { return data_; }
  const NoiseModel& noise() const noexcept { return noise_; }

 private:
  ObservationSet data_;
  NoiseModel noise_;
  std::shared_ptr<const klfield::BasisCache> cache_;
  DecaySpec decay_;
  SectionGrid grid_;
  bool enforce_;
};

// ---------------------------------------------------------------------------
// pCN Metropolis-Hastings.

struct ChainConfig {
  double beta = 0.25;
  double sigma_pcn = 1.0;
  int burn_in = 0;    // 0: 10 x pilot IACT
  int thinning = 0;   // 0: 2 x pilot IACT
  int n_samples = 200;  // thinned samples over all chains
  int chains = 5;
  std::uint64_t seed = 0;
  bool tune = true;
  double target_acceptance = 0.25;
  int pilot_steps = 2000;
  int max_init_draws = 1000;

  void validate() const {
    if (!(beta > 0.0 && beta <= 1.0)) throw ParameterError("pCN beta must lie in (0, 1]");
    if (!(sigma_pcn > 0.0)) throw ParameterError("sigma_pcn must be positive");
    if (burn_in < 0 || thinning < 0) throw ParameterError("burn-in and thinning must be >= 1 or auto");
    if (chains < 1 || n_samples < chains) throw ParameterError("need at least one sample per chain");
    if (!(target_acceptance > 0.0 && target_acceptance < 1.0))
      throw ParameterError("target acceptance must lie in (0, 1)");
    if (pilot_steps < 500) throw ParameterError("pilot runs need at least 500 steps");
    if (max_init_draws < 1) throw ParameterError("max_init_draws must be positive");
  }
};

/// z' = sqrt(1 - beta^2) z + beta w, w ~ N(0, sigma^2 I).
inline Eigen::VectorXd pcn_propose(const Eigen::VectorXd& z, double beta, double sigma, Rng& rng) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("pCN beta must lie in [0, 1]");
  std::normal_distribution<double> nd(0.0, sigma);
  Eigen::VectorXd out(z.size());
  const double keep = std::sqrt(1.0 - beta * beta);
  for (Eigen::Index i = 0; i < z.size(); ++i) out[i] = keep * z[i] + beta * nd(rng);
  return out;
}

struct ChainState {
  Eigen::VectorXd z;   // whitened
  Eigen::VectorXd xi;
  double log_lik = neg_inf;
};

/// One Metropolis-Hastings step. The pCN kernel is reversible for
/// N(0, sigma^2 I) in z, so the acceptance ratio carries that reference
/// density as the proposal correction next to the likelihood and the
/// whitened prior N(0, I); with sigma = 1 the two cancel. Proposals with a
/// -inf log likelihood (inadmissible) are always rejected.
template <class LogLik>
bool mh_step(ChainState& s, const PriorModel& prior, const LogLik& log_lik, double beta,
             double sigma, Rng& rng) {
  Eigen::VectorXd z = pcn_propose(s.z, beta, sigma, rng);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  Eigen::VectorXd xi = prior.unwhiten(z);
  const double ll = log_lik(xi);
  if (!(ll > neg_inf)) return false;
  const double zz_new = z.squaredNorm(), zz_old = s.z.squaredNorm();
  const double log_alpha = (ll - s.log_lik) - 0.5 * (zz_new - zz_old) +
                           0.5 * (zz_new - zz_old) / (sigma * sigma);
  if (!(std::log(u) < log_alpha)) return false;
  s.z = std::move(z);
  s.xi = std::move(xi);
  s.log_lik = ll;
  return true;
}

/// Initial state drawn from the prior, redrawn until admissible.
template <class LogLik>
ChainState initial_state(const PriorModel& prior, const LogLik& log_lik, Rng& rng, int max_draws) {
  std::normal_distribution<double> nd;
  for (int k = 0; k < max_draws; ++k) {
    ChainState s;
    s.z.resize(prior.dim());
    for (Eigen::Index i = 0; i < prior.dim(); ++i) s.z[i] = nd(rng);
    s.xi = prior.unwhiten(s.z);
    s.log_lik = log_lik(s.xi);
    if (s.log_lik > neg_inf) return s;
  }
  throw NumericalError("no admissible initial state after " + std::to_string(max_draws) +
                       " prior draws");
}

struct Chain {
  std::vector<Eigen::VectorXd> states;  // state after each step
  std::vector<double> log_post;
  std::vector<char> accepted;
  long accepts = 0;
  int burn_in = 0;
  int thinning = 1;
  double beta = 0.0;
  std::vector<Eigen::VectorXd> thinned;
  Eigen::VectorXd iact;  // per component, post burn-in; empty when too short, NaN if unresolved

  double acceptance_ratio() const {
    return states.empty() ? 0.0 : static_cast<double>(accepts) / static_cast<double>(states.size());
  }
  std::vector<Eigen::VectorXd> post_burn_in() const {
    return {states.begin() + burn_in, states.end()};
  }
  /// Largest component IACT; NaN if any component is unresolved.
  double iact_max() const {
    if (iact.size() == 0) return 0.0;
    return iact.hasNaN() ? std::numeric_limits<double>::quiet_NaN() : iact.maxCoeff();
  }
};

/// burn_in steps, then n_thinned * thinning more; every state is recorded
/// and Xi = {x_{b+t}, x_{b+2t}, ...}.
template <class LogLik>
Chain run_chain(const PriorModel& prior, const LogLik& log_lik, double beta, double sigma,
                int burn_in, int thinning, int n_thinned, Rng& rng, int max_init_draws = 1000) {
  if (burn_in < 0 || thinning < 1 || n_thinned < 0)
    throw ParameterError("burn-in must be >= 0 and thinning >= 1");
  Chain c;
  c.burn_in = burn_in;
  c.thinning = thinning;
  c.beta = beta;
  ChainState s = initial_state(prior, log_lik, rng, max_init_draws);
  const long total = static_cast<long>(burn_in) + static_cast<long>(n_thinned) * thinning;
  c.states.reserve(static_cast<std::size_t>(total));
  for (long k = 1; k <= total; ++k) {
    const bool acc = mh_step(s, prior, log_lik, beta, sigma, rng);
    c.accepts += acc;
    c.accepted.push_back(acc);
    c.states.push_back(s.xi);
    c.log_post.push_back(s.log_lik + prior.log_density(s.xi));
    if (k > burn_in && (k - burn_in) % thinning == 0) c.thinned.push_back(s.xi);
  }
  if (total - burn_in >= 100) {
    const auto post = c.post_burn_in();
    c.iact.resize(prior.dim());
    std::vector<double> series(post.size());
    for (Eigen::Index i = 0; i < prior.dim(); ++i) {
      for (std::size_t k = 0; k < post.size(); ++k) series[k] = post[k][i];
      try {
        c.iact[i] = diagnostics::iact(series);
      } catch (const DiagnosticError&) {
        c.iact[i] = std::numeric_limits<double>::quiet_NaN();
      }
    }
  }
  return c;
}

struct TuneResult {
  double beta = 0.0;
  double acceptance = 0.0;      // over the second half of the pilot
  std::vector<double> trace;    // beta after each batch
  bool pinned = false;
  std::string warning;
};

/// Robbins-Monro on log beta in batches of 100 steps:
/// log beta += 2 (acceptance - target) / sqrt(batch), beta kept in [1e-3, 1].
/// A gain of 1 cannot walk log beta down from a start near 1 in 50 batches.
/// Returns the geometric mean of beta over the second half of the batches.
template <class LogLik>
TuneResult tune_beta(const PriorModel& prior, const LogLik& log_lik, double beta0, double sigma,
                     double target, int pilot_steps, Rng& rng, int max_init_draws = 1000) {
  if (pilot_steps < 500) throw ParameterError("pilot runs need at least 500 steps");
  constexpr double lo = 1e-3, hi = 1.0;
  constexpr int batch = 100;
  ChainState s = initial_state(prior, log_lik, rng, max_init_draws);
  TuneResult r;
  double log_beta = std::log(std::clamp(beta0, lo, hi));
  const int batches = pilot_steps / batch;
  std::vector<double> acc_rates;
  for (int b = 1; b <= batches; ++b) {
    int acc = 0;
    for (int k = 0; k < batch; ++k) acc += mh_step(s, prior, log_lik, std::exp(log_beta), sigma, rng);
    const double rate = acc / static_cast<double>(batch);
    acc_rates.push_back(rate);
    log_beta = std::clamp(log_beta + 2.0 * (rate - target) / std::sqrt(static_cast<double>(b)),
                          std::log(lo), std::log(hi));
    r.trace.push_back(std::exp(log_beta));
  }
  const int from = batches / 2;
  double sum_log = 0.0, sum_acc = 0.0;
  for (int b = from; b < batches; ++b) {
    sum_log += std::log(r.trace[static_cast<std::size_t>(b)]);
    sum_acc += acc_rates[static_cast<std::size_t>(b)];
  }
  r.beta = std::exp(sum_log / (batches - from));
  r.acceptance = sum_acc / (batches - from);
  const bool at_bound = r.beta <= lo * (1.0 + 1e-9) || r.beta >= hi * (1.0 - 1e-9);
  if (at_bound && std::abs(r.acceptance - target) > 0.05) {
    r.pinned = true;
    r.warning = "pCN step pinned at its bound without reaching the target acceptance";
  }
  return r;
}

struct SamplingResult {
  std::vector<Chain> chains;
  TuneResult tuning;
  double beta = 0.0;
  double pilot_iact = 0.0;
  int burn_in = 0;
  int thinning = 0;
  std::vector<Eigen::VectorXd> samples;  // pooled thinned samples, chain by chain
  diagnostics::ConvergenceReport convergence;
};

/// Tuning pilot, IACT pilot (when burn-in or thinning is auto), then
/// independent chains on their own streams.
template <class LogLik>
SamplingResult sample_posterior(const ChainConfig& cfg, const PriorModel& prior,
                                const LogLik& log_lik, int workers = 1) {
  cfg.validate();
  prior.validate();
  SamplingResult res;
  res.beta = cfg.beta;
  if (cfg.tune) {
    Rng rng = make_stream(cfg.seed, stream::tune, 0);
    res.tuning = tune_beta(prior, log_lik, cfg.beta, cfg.sigma_pcn, cfg.target_acceptance,
                           cfg.pilot_steps, rng, cfg.max_init_draws);
    res.beta = res.tuning.beta;
  }
  res.burn_in = cfg.burn_in;
  res.thinning = cfg.thinning;
  if (cfg.burn_in == 0 || cfg.thinning == 0) {
    Rng rng = make_stream(cfg.seed, stream::tune, 1);
    const int half = cfg.pilot_steps / 2;
    const auto pilot = run_chain(prior, log_lik, res.beta, cfg.sigma_pcn, half,
                                 1, cfg.pilot_steps - half, rng, cfg.max_init_draws);
    res.pilot_iact = pilot.iact_max();
    if (!std::isfinite(res.pilot_iact))
      throw DiagnosticError("pilot chain too short to resolve its autocorrelation time; "
                            "increase pilot_steps or set burn_in and thinning");
    if (cfg.burn_in == 0) res.burn_in = std::max(1, static_cast<int>(std::ceil(10.0 * res.pilot_iact)));
    if (cfg.thinning == 0) res.thinning = std::max(1, static_cast<int>(std::ceil(2.0 * res.pilot_iact)));
  }

  res.chains.resize(static_cast<std::size_t>(cfg.chains));
  parallel_for(res.chains.size(), workers, [&](std::size_t k) {
    const int n = cfg.n_samples / cfg.chains + (static_cast<int>(k) < cfg.n_samples % cfg.chains);
    Rng rng = make_stream(cfg.seed, stream::chain, k);
    res.chains[k] = run_chain(prior, log_lik, res.beta, cfg.sigma_pcn, res.burn_in, res.thinning,
                              n, rng, cfg.max_init_draws);
  });
  for (const auto& c : res.chains) res.samples.insert(res.samples.end(), c.thinned.begin(), c.thinned.end());

  if (res.chains.size() >= 2) {
    std::size_t len = std::numeric_limits<std::size_t>::max();
    for (const auto& c : res.chains) len = std::min(len, c.states.size() - static_cast<std::size_t>(c.burn_in));
    std::vector<std::vector<Eigen::VectorXd>> post;
    for (const auto& c : res.chains)
      post.emplace_back(c.states.begin() + c.burn_in,
                        c.states.begin() + c.burn_in + static_cast<std::ptrdiff_t>(len));
    res.convergence = diagnostics::chain_convergence(post);
  }
  return res;
}

// ---------------------------------------------------------------------------
// MAP fit of one observation.

/// d phi / d a_k in tan space: g3(x3) [g1'(x1) f_k(x1) + g1(x1) f_k'(x1)].
inline Eigen::MatrixXd slope_design(const KLBasis& basis, const DecaySpec& decay,
                                    const MisalignmentSamples& obs) {
  const auto n = static_cast<Eigen::Index>(obs.size());
  Eigen::MatrixXd b(n, basis.n_modes());
  for (int k = 0; k < basis.n_modes(); ++k) {
    const auto f = basis.mode(k);
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto& p = obs.points[static_cast<std::size_t>(j)];
      b(j, k) = decay.through.value(p.x3_mm) *
                (decay.along.derivative(p.x1_mm) * f.value(p.x1_mm) +
                 decay.along.value(p.x1_mm) * f.derivative(p.x1_mm));
    }
  }
  return b;
}

enum class LambdaCriterion { gcv, rss };

struct FitOptions {
  double lambda_start = 12.9;
  double lambda_step = 0.1;  // initial simplex step, relative
  double lambda_min = 2.0;
  double lambda_max = 60.0;
  int scan_points = 16;      // log-spaced over [lambda_min, lambda_max]
  double rcond = 1e-3;       // relative singular value floor; 1e-12 for exact data
  LambdaCriterion criterion = LambdaCriterion::gcv;
  double x_tol = 1e-6;
  double f_tol = 1e-9;
  int max_iter = 200;
  int gauss_newton_iter = 30;
};

struct FitResult {
  WrinkleParams xi;
  double objective = 0.0;  // sum of squared angle residuals
  double rms = 0.0;
  int rank = 0;            // retained singular directions
  double criterion = 0.0;  // value minimised over lambda
  int iterations = 0;
};

struct AmplitudeFit {
  Eigen::VectorXd a;
  double objective;
  int rank;
};

/// Minimum-norm solve restricted to the leading k singular directions.
inline Eigen::VectorXd tsvd_solve(const Eigen::JacobiSVD<Eigen::MatrixXd>& svd, const Eigen::VectorXd& rhs,
                                  int k) {
  const Eigen::VectorXd c =
      (svd.matrixU().leftCols(k).transpose() * rhs).cwiseQuotient(svd.singularValues().head(k));
  return svd.matrixV().leftCols(k) * c;
}

/// Directions with singular value above rcond times the largest.
inline int numerical_rank(const Eigen::JacobiSVD<Eigen::MatrixXd>& svd, double rcond) {
  const auto& s = svd.singularValues();
  int r = 0;
  while (r < s.size() && s[r] > rcond * s[0]) ++r;
  return r;
}

/// Truncation rank for the linear problem b a = y. GCV = N RSS_k / (N - k)^2
/// over k = 1 .. max_rank sets the noise level s^2 = RSS_k / (N - k); the rank
/// is then cut after the last direction whose data coefficient |u_k . y| is
/// above 3 s (discrete Picard condition). Without the cut a direction that is
/// only noise over a small singular value sends the amplitudes off to infinity.
/// Residuals are built by successive projection so exact data reaches
/// round-off instead of cancelling.
inline int gcv_rank(const Eigen::JacobiSVD<Eigen::MatrixXd>& svd, const Eigen::VectorXd& y, int max_rank) {
  const auto n = static_cast<double>(y.size());
  const Eigen::VectorXd coef = svd.matrixU().leftCols(max_rank).transpose() * y;
  Eigen::VectorXd r = y;
  int best = max_rank;
  double best_g = std::numeric_limits<double>::infinity();
  double best_rss = 0.0;
  for (int k = 1; k <= max_rank && n - k > 0.0; ++k) {
    r -= svd.matrixU().col(k - 1) * coef[k - 1];
    const double rss = r.squaredNorm();
    const double g = n * rss / ((n - k) * (n - k));
    if (g < best_g) {
      best_g = g;
      best = k;
      best_rss = rss;
    }
  }
  const double noise = std::sqrt(best_rss / (n - best));
  int keep = 1;
  for (int k = 0; k < best; ++k)
    if (std::abs(coef[k]) > 3.0 * noise) keep = k + 1;
  return keep;
}

/// Amplitudes for a fixed basis: truncated-SVD least squares on tan(phi), then
/// Gauss-Newton on the angle residuals with the same truncation. Directions
/// below rcond times the largest singular value are always dropped; with
/// `choose_rank` the kept count is further chosen by GCV.
inline AmplitudeFit fit_amplitudes(const Eigen::MatrixXd& b, const Eigen::VectorXd& phi, double rcond,
                                   int gn_iter, bool choose_rank = false) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd y = phi.array().tan().matrix();
  int rank = numerical_rank(svd, rcond);
  if (rank == 0) return {Eigen::VectorXd::Zero(b.cols()), phi.squaredNorm(), 0};
  if (choose_rank) rank = gcv_rank(svd, y, rank);
  Eigen::VectorXd a = tsvd_solve(svd, y, rank);
  auto objective = [&](const Eigen::VectorXd& x) {
    return ((b * x).array().atan() - phi.array()).matrix().squaredNorm();
  };
  double obj = objective(a);
  for (int it = 0; it < gn_iter && obj > 0.0; ++it) {
    const Eigen::ArrayXd s = (b * a).array();
    const Eigen::VectorXd r = (s.atan() - phi.array()).matrix();
    const Eigen::MatrixXd j = (1.0 / (1.0 + s * s)).matrix().asDiagonal() * b;
    Eigen::JacobiSVD<Eigen::MatrixXd> jsvd(j, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd step = tsvd_solve(jsvd, -r, std::min(rank, numerical_rank(jsvd, rcond)));
    double t = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 30; ++ls, t *= 0.5) {
      const Eigen::VectorXd trial = a + t * step;
      const double o = objective(trial);
      if (o < obj) {
        a = trial;
        improved = obj - o > 1e-15 * obj;
        obj = o;
        break;
      }
    }
    if (!improved || t * step.norm() <= 1e-13 * (1.0 + a.norm())) break;
  }
  return {a, obj, rank};
}

/// Least-squares fit of xi to one observation. For each lambda the
/// amplitudes are solved directly on an unquantised basis; lambda itself is
/// found by a simplex started from the best point of a log-spaced scan.
///
/// The residual alone keeps falling as lambda shrinks (shorter modes absorb
/// extraction noise), so by default lambda minimises the generalised
/// cross-validation score N RSS / (N - rank)^2 rather than RSS.
inline FitResult fit_map_observation(const MisalignmentSamples& obs, klfield::CovarianceSpec cov,
                                     int n_modes, const DecaySpec& decay, const SectionGrid& grid,
                                     const FitOptions& opt = {}) {
  if (obs.size() < static_cast<std::size_t>(n_modes) + 1)
    throw ParameterError("fit needs at least N_w + 1 data points");
  if (!(opt.lambda_min > 0.0 && opt.lambda_max > opt.lambda_min))
    throw ParameterError("lambda search range must satisfy 0 < min < max");
  obs.validate();
  const Eigen::VectorXd phi = observed_angles(obs);
  const auto n = static_cast<double>(obs.size());
  FitResult best;
  best.criterion = std::numeric_limits<double>::infinity();

  auto eval = [&](double lambda) {
    if (!(lambda >= opt.lambda_min && lambda <= opt.lambda_max))
      return std::numeric_limits<double>::infinity();
    cov.lambda_mm = lambda;
    const auto basis = klfield::build_kl_basis(cov, n_modes);
    auto fit = fit_amplitudes(slope_design(basis, decay, obs), phi, opt.rcond, opt.gauss_newton_iter,
                              opt.criterion == LambdaCriterion::gcv);
    const double crit = opt.criterion == LambdaCriterion::rss
                            ? fit.objective
                            : n * fit.objective / std::pow(n - fit.rank, 2);
    if (crit < best.criterion) {
      best.criterion = crit;
      best.xi = WrinkleParams{fit.a, lambda};
      best.objective = fit.objective;
      best.rank = fit.rank;
    }
    return crit;
  };

  double start = opt.lambda_start;
  double fstart = eval(start);
  for (int k = 0; k < opt.scan_points; ++k) {
    const double l = opt.lambda_min * std::pow(opt.lambda_max / opt.lambda_min,
                                                k / std::max(1.0, opt.scan_points - 1.0));
    const double f = eval(l);
    if (f < fstart) {
      fstart = f;
      start = l;
    }
  }
  const auto nm = optimize::nelder_mead([&](const std::vector<double>& x) { return eval(x[0]); },
                                        {start}, {opt.lambda_step * start}, opt.x_tol, opt.f_tol,
                                        opt.max_iter);
  auto best_so_far = [&] {
    const auto v = best.xi.to_vector();
    return std::vector<double>(v.data(), v.data() + v.size());
  };
  if (best.xi.amplitudes.size() == 0) throw FitError("MAP fit found no finite objective");
  if (!nm.converged)
    throw FitError("MAP fit did not converge in " + std::to_string(opt.max_iter) + " iterations",
                   best_so_far());
  best.rms = std::sqrt(best.objective / n);
  best.iterations = nm.iterations;
  cov.lambda_mm = best.xi.length_scale;
  const auto basis = klfield::build_kl_basis(cov, n_modes);
  if (!klfield::jacobian_positive(best.xi, basis, decay, grid))
    throw FitError("MAP fit is not an admissible wrinkle (det J <= 0)", best_so_far());
  return best;
}

// ---------------------------------------------------------------------------
// Output.

inline void write_chain_csv(const Chain& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  const auto d = c.states.empty() ? 1 : c.states.front().size();
  out << "step,accepted,log_post";
  for (Eigen::Index i = 1; i < d; ++i) out << ",a_" << i;
  out << ",lambda\n";
  for (std::size_t k = 0; k < c.states.size(); ++k) {
    out << k + 1 << ',' << int(c.accepted[k]) << ',' << c.log_post[k];
    for (Eigen::Index i = 0; i < d; ++i) out << ',' << c.states[k][i];
    out << '\n';
  }
}

inline void write_parameter_csv(const std::vector<Eigen::VectorXd>& samples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  const auto d = samples.empty() ? 1 : samples.front().size();
  out << "sample_id";
  for (Eigen::Index i = 1; i < d; ++i) out << ",a_" << i;
  out << ",lambda\n";
  for (std::size_t k = 0; k < samples.size(); ++k) {
    out << k;
    for (Eigen::Index i = 0; i < d; ++i) out << ',' << samples[k][i];
    out << '\n';
  }
}

inline std::vector<Eigen::VectorXd> read_parameter_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("sample_id,", 0) != 0)
    throw DataError("missing sample_id header in " + path);
  const auto d = std::count(line.begin(), line.end(), ',');
  std::vector<Eigen::VectorXd> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    Eigen::VectorXd v(d);
    for (Eigen::Index i = 0; i < d; ++i) {
      if (!std::getline(ss, cell, ',')) throw DataError("short row in " + path);
      v[i] = std::stod(cell);
    }
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace defect_chain::bayes

#endif  // DEFECT_CHAIN_BAYES_HPP

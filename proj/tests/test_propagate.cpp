#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "defect_chain/external_model.hpp"
#include "defect_chain/propagate.hpp"
#include "support.hpp"

using namespace defect_chain;
using namespace defect_chain::propagate;
using test_support::CaseStudy;

namespace {

/// Returns the first amplitude as the strength; lets tests feed known values.
class EchoModel : public ForwardStrengthModel {
 public:
  double evaluate(const WrinkleParams& xi, std::size_t) const override { return xi.amplitudes[0]; }
  std::string id() const override { return "echo"; }
};

std::vector<WrinkleParams> echo_samples(const std::vector<double>& values) {
  std::vector<WrinkleParams> out;
  for (double v : values) out.push_back({Eigen::VectorXd::Constant(1, v), 1.0});
  return out;
}

std::vector<double> weibull_draws(double modulus, double scale, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = scale * std::pow(-std::log(1.0 - u(rng)), 1.0 / modulus);
  return v;
}

std::vector<SlopeStrength> surrogate_pairs(int n, double q, double lq, double m_star) {
  std::vector<SlopeStrength> pairs;
  for (int i = 0; i < n; ++i) {
    const double s = 0.05 + 0.95 * i / (n - 1);
    pairs.push_back({s, surrogate_strength(s, m_star, q, lq)});
  }
  return pairs;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / ("defect_chain_" + name + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

std::string write_script(const std::filesystem::path& dir, const std::string& name, const std::string& body) {
  const auto p = dir / name;
  std::ofstream(p) << "#!/bin/sh\n" << body << "\n";
  std::filesystem::permissions(p, std::filesystem::perms::owner_all);
  return p.string();
}

}  // namespace

TEST(Camanho, ClosedFormCases) {
  EXPECT_NEAR(camanho(61.0, 0.0, 0.0), 1.0, 1e-12);
  EXPECT_NEAR(camanho(-50.0, 97.0, 0.0), 1.0, 1e-12);
  EXPECT_NEAR(camanho(61.0, 97.0, 97.0), std::sqrt(3.0), 1e-12);
}

TEST(Camanho, ZeroStressAndHomogeneity) {
  EXPECT_EQ(camanho(0.0, 0.0, 0.0), 0.0);
  const double a = camanho(20.0, -30.0, 45.0);
  EXPECT_NEAR(camanho(2.5 * 20.0, 2.5 * -30.0, 2.5 * 45.0), 2.5 * a, 1e-12);
  // compression only ever helps
  EXPECT_NEAR(camanho(-1000.0, 30.0, 40.0), camanho(0.0, 30.0, 40.0), 1e-15);
}

TEST(Camanho, RejectsBadInput) {
  EXPECT_THROW(camanho(NAN, 0.0, 0.0), ParameterError);
  EXPECT_THROW(camanho(1.0, 0.0, 0.0, Allowables{0.0, 97.0, 61.0}), ParameterError);
}

class SlopeTest : public ::testing::Test {
 protected:
  CaseStudy cs;
  klfield::KLBasis basis = cs.basis();
  klfield::SectionGrid grid = klfield::SectionGrid::for_part(cs.geom);
};

TEST_F(SlopeTest, SeparableMaximumEqualsBruteForce) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const auto xi = test_support::draw_wrinkle(cs, basis, 10.0, rng);
    const klfield::WrinkleField f(xi, basis, cs.decay);
    double brute = 0.0;
    for (double x1 : grid.x1)
      for (double x3 : grid.x3) brute = std::max(brute, std::abs(f.slope_along({x1, x3})));
    EXPECT_NEAR(max_abs_slope(f, grid), brute, 1e-12 * brute);
  }
}

TEST_F(SlopeTest, LinearInAmplitudes) {
  Rng rng(12);
  auto xi = test_support::draw_wrinkle(cs, basis, 5.0, rng);
  const double s = max_abs_slope(xi, basis, cs.decay, grid);
  xi.amplitudes *= -3.0;
  EXPECT_NEAR(max_abs_slope(xi, basis, cs.decay, grid), 3.0 * s, 1e-12 * s);
  xi.amplitudes.setZero();
  EXPECT_EQ(max_abs_slope(xi, basis, cs.decay, grid), 0.0);
}

TEST_F(SlopeTest, GridRefinementChangesLittle) {
  Rng rng(13);
  const auto fine = klfield::SectionGrid::for_part(cs.geom, 4096, 16);
  for (int trial = 0; trial < 5; ++trial) {
    const auto xi = test_support::draw_wrinkle(cs, basis, 10.0, rng);
    const double coarse = max_abs_slope(xi, basis, cs.decay, grid);
    const double ref = max_abs_slope(xi, basis, cs.decay, fine);
    EXPECT_LE(coarse, ref * (1.0 + 1e-12));
    EXPECT_LT((ref - coarse) / ref, 0.01);
  }
}

TEST(Surrogate, PristineAndKnownKnockdown) {
  const SurrogateModel m;
  EXPECT_EQ(surrogate_strength(0.0, m), 8.93);
  const double s = std::pow(4.212 * std::log(1.0 / 0.74), 1.0 / 2.867);
  EXPECT_NEAR(surrogate_strength(s, m), 0.74 * 8.93, 1e-12);
  EXPECT_THROW(surrogate_strength(-0.1, m), ParameterError);
}

TEST(Surrogate, MonotoneAndLowerBoundBelow) {
  const SurrogateModel m;
  double prev = m.m_star;
  for (int i = 1; i <= 100; ++i) {
    const double s = 0.01 * i;
    const double v = surrogate_strength(s, m);
    EXPECT_LT(v, prev);
    prev = v;
    EXPECT_LE(surrogate_lower_bound(s, m), v);
  }
}

TEST(FitSurrogate, NoiselessRoundTrip) {
  const auto pairs = surrogate_pairs(200, 2.867, 4.212, 8.93);
  const auto fit = fit_surrogate(pairs, 8.93);
  EXPECT_NEAR(fit.model.q, 2.867, 1e-3 * 2.867);
  EXPECT_NEAR(fit.model.lambda_q, 4.212, 1e-3 * 4.212);
  EXPECT_LT(fit.rms_relative, 1e-6);
  EXPECT_EQ(fit.n_floored, 0u);
}

TEST(FitSurrogate, OtherExponentFamily) {
  const auto fit = fit_surrogate(surrogate_pairs(50, 1.0, 0.8, 5.0), 5.0);
  EXPECT_NEAR(fit.model.q, 1.0, 1e-3);
  EXPECT_NEAR(fit.model.lambda_q, 0.8, 1e-3 * 0.8);
}

TEST(FitSurrogate, MultiplicativeNoise) {
  Rng rng(21);
  std::normal_distribution<double> nd(0.0, 0.05);
  std::uniform_real_distribution<double> u(0.3, 1.6);
  std::vector<SlopeStrength> pairs;
  for (int i = 0; i < 200; ++i) {
    const double s = u(rng);
    pairs.push_back({s, surrogate_strength(s, 8.93, 2.867, 4.212) * (1.0 + nd(rng))});
  }
  const auto fit = fit_surrogate(pairs, 8.93);
  EXPECT_NEAR(fit.model.q, 2.867, 0.1 * 2.867);
  EXPECT_NEAR(fit.model.lambda_q, 4.212, 0.1 * 4.212);
  EXPECT_LE(fit.rms_relative, 0.06);
  ASSERT_TRUE(fit.model.q_lower.has_value());
  // the 99% bound sits under almost every point
  int above = 0;
  for (const auto& p : pairs) above += surrogate_lower_bound(p.slope, fit.model) <= p.mc;
  EXPECT_GE(above, 195);
}

TEST(FitSurrogate, DegenerateInputs) {
  EXPECT_THROW(fit_surrogate(surrogate_pairs(4, 2.0, 1.0, 1.0), 1.0), ParameterError);
  std::vector<SlopeStrength> same(10, {0.3, 8.0});
  EXPECT_THROW(fit_surrogate(same, 8.93), FitError);
  std::vector<SlopeStrength> none;
  for (int i = 1; i <= 10; ++i) none.push_back({0.1 * i, 9.5});
  EXPECT_THROW(fit_surrogate(none, 8.93), FitError);
}

TEST(Weibull, RecoversPaperParameters) {
  const auto v = weibull_draws(62.9, 8.8, 200, 31);
  const auto fit = weibull_fit(v);
  EXPECT_NEAR(fit.modulus, 62.9, 0.15 * 62.9);
  EXPECT_NEAR(fit.scale, 8.8, 0.02 * 8.8);
}

TEST(Weibull, RecoveryAcrossSeeds) {
  int good = 0;
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const auto fit = weibull_fit(weibull_draws(62.9, 8.8, 200, seed));
    good += std::abs(fit.modulus / 62.9 - 1.0) <= 0.15 && std::abs(fit.scale / 8.8 - 1.0) <= 0.02;
  }
  // sd of the modulus MLE at n = 200 is about 5.5%, so nearly all pass
  EXPECT_GE(good, 19);
}

TEST(Weibull, ScoreEquationHoldsAtEstimate) {
  const auto v = weibull_draws(5.0, 2.0, 300, 32);
  const auto fit = weibull_fit(v);
  double s0 = 0.0, s1 = 0.0, ml = 0.0;
  for (double x : v) {
    const double w = std::pow(x / fit.scale, fit.modulus);
    s0 += w;
    s1 += w * std::log(x / fit.scale);
    ml += std::log(x / fit.scale);
  }
  const double n = static_cast<double>(v.size());
  EXPECT_NEAR(s0 / n, 1.0, 1e-10);
  EXPECT_NEAR(n / fit.modulus + ml - s1, 0.0, 1e-8 * n);
}

TEST(Weibull, ScaleEquivariance) {
  const auto v = weibull_draws(62.9, 8.8, 200, 33);
  const auto a = weibull_fit(v);
  for (double c : {1e-3, 0.37, 1000.0}) {
    std::vector<double> w = v;
    for (auto& x : w) x *= c;
    const auto b = weibull_fit(w);
    EXPECT_NEAR(b.modulus, a.modulus, 1e-6 * a.modulus);
    EXPECT_NEAR(b.scale, c * a.scale, 1e-6 * c * a.scale);
  }
}

TEST(Weibull, CdfAtScaleAndMedianEnvelope) {
  const auto v = weibull_draws(62.9, 8.8, 200, 34);
  const auto fit = weibull_fit(v);
  EXPECT_NEAR(fit.cdf(fit.scale), 1.0 - std::exp(-1.0), 1e-15);
  std::vector<double> s = v;
  std::sort(s.begin(), s.end());
  const double median = 0.5 * (s[99] + s[100]);
  EXPECT_NEAR(fit.cdf(median), 0.5, 0.1);
  const auto pts = cdf_points(v, fit);
  ASSERT_EQ(pts.size(), v.size());
  for (std::size_t i = 1; i < pts.size(); ++i) {
    EXPECT_LE(pts[i - 1].mc, pts[i].mc);
    EXPECT_LE(pts[i - 1].fitted, pts[i].fitted);
  }
}

TEST(Weibull, DegenerateAndShortInputs) {
  EXPECT_THROW(weibull_fit(std::vector<double>(20, 8.93)), FitError);
  EXPECT_THROW(weibull_fit(std::vector<double>(9, 1.0)), ParameterError);
  std::vector<double> bad(20, 1.0);
  bad[3] = -1.0;
  EXPECT_THROW(weibull_fit(bad), FitError);
}

TEST(MonteCarlo, ConstantModelHasZeroVariance) {
  const auto d = monte_carlo(echo_samples(std::vector<double>(50, 8.93)), EchoModel{});
  EXPECT_EQ(d.n_ok, 50u);
  EXPECT_NEAR(d.mean, 8.93, 1e-14);
  EXPECT_LT(d.variance, 1e-25);
  EXPECT_LT(d.ci95_half_width, 1e-12);
  const auto r = knockdown_report(d, 8.93);
  EXPECT_FALSE(r.weibull.has_value());
  EXPECT_FALSE(r.weibull_error.empty());
}

TEST(MonteCarlo, UniformStubMeanWithinThreeSigma) {
  constexpr int n = 10000;
  const double bound = 3.0 / std::sqrt(12.0 * n);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    const auto d = monte_carlo(echo_samples(v), EchoModel{});
    EXPECT_LE(std::abs(d.mean - 0.5), bound) << "seed " << seed;
  }
}

TEST(MonteCarlo, HalfWidthScalesAsInverseRootN) {
  Rng rng(41);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(10000);
  for (auto& x : v) x = u(rng);
  const auto full = monte_carlo(echo_samples(v), EchoModel{});
  const auto quarter = monte_carlo(echo_samples({v.begin(), v.begin() + 2500}), EchoModel{});
  const double ratio = quarter.ci95_half_width / full.ci95_half_width;
  EXPECT_GE(ratio, 1.6);
  EXPECT_LE(ratio, 2.6);
  EXPECT_NEAR(full.ci95_half_width, 1.6448536 * std::sqrt(full.variance / 10000.0), 1e-6);
}

TEST(MonteCarlo, PermutationAndWorkerInvariance) {
  Rng rng(42);
  std::uniform_real_distribution<double> u(1.0, 2.0);
  std::vector<double> v(500);
  for (auto& x : v) x = u(rng);
  const auto a = monte_carlo(echo_samples(v), EchoModel{}, nullptr, 1);
  const auto b = monte_carlo(echo_samples(v), EchoModel{}, nullptr, 4);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.variance, b.variance);
  std::shuffle(v.begin(), v.end(), rng);
  const auto c = monte_carlo(echo_samples(v), EchoModel{});
  EXPECT_NEAR(c.mean, a.mean, 1e-14);
  EXPECT_NEAR(c.variance, a.variance, 1e-12);
}

TEST(MonteCarlo, FailuresAreRecordedPerSample) {
  const auto d = monte_carlo(echo_samples({1.0, -2.0, 3.0}), EchoModel{});
  EXPECT_EQ(d.n_ok, 2u);
  EXPECT_FALSE(d.samples[1].ok);
  EXPECT_FALSE(d.samples[1].error.empty());
  EXPECT_EQ(d.mean, 2.0);
  EXPECT_THROW(monte_carlo({}, EchoModel{}), DataError);
}

TEST(Knockdown, PaperMapStrengths) {
  const auto d = monte_carlo(echo_samples({8.61, 8.88, 8.62, 8.91}), EchoModel{});
  const auto r = knockdown_report(d, 8.93);
  EXPECT_NEAR(r.worst_knockdown, 0.0358342665, 1e-9);
  EXPECT_NEAR(100.0 * r.worst_knockdown, 3.58, 0.005);
  EXPECT_EQ(r.worst, 8.61);
  EXPECT_FALSE(r.weibull.has_value());  // four values are too few
}

TEST(Knockdown, LowestQuantileIsTheMinimum) {
  const auto v = weibull_draws(62.9, 8.8, 200, 43);
  const auto r = knockdown_report(monte_carlo(echo_samples(v), EchoModel{}), 8.93, {1.0 / 200, 0.5});
  EXPECT_EQ(r.quantiles[0].second, *std::min_element(v.begin(), v.end()));
  ASSERT_TRUE(r.weibull.has_value());
}

TEST_F(SlopeTest, SurrogateCouplingIsMonotone) {
  auto cache = std::make_shared<klfield::BasisCache>(cs.cov, cs.n_modes);
  const SlopeEvaluator slope(cache, cs.decay, grid);
  const SurrogateStrengthModel model(SurrogateModel{}, slope);
  Rng rng(51);
  std::vector<WrinkleParams> xs;
  for (int i = 0; i < 40; ++i) xs.push_back(test_support::draw_wrinkle(cs, basis, 20.0, rng));
  const auto d = monte_carlo(xs, model, &slope, 2);
  ASSERT_EQ(d.n_ok, xs.size());
  auto rows = d.samples;
  std::sort(rows.begin(), rows.end(), [](auto& a, auto& b) { return a.max_slope < b.max_slope; });
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LE(rows[i].mc, rows[i - 1].mc);
  const auto r = knockdown_report(d, 8.93);
  ASSERT_TRUE(r.surrogate.has_value());
  EXPECT_NEAR(r.surrogate->model.q, 2.867, 1e-3 * 2.867);
}

TEST_F(SlopeTest, ExternalModelRoundTrip) {
  TempDir tmp("ext_ok");
  // strength = 9 minus the largest |W| in the field file
  const auto script = write_script(tmp.path, "model.sh",
      "awk -F, 'NR>1 { w = $3 < 0 ? -$3 : $3; if (w > m) m = w } END { printf \"{\\\"M_c\\\": %.17g}\\n\", 9 - m }' \"$1\"");
  auto cache = std::make_shared<klfield::BasisCache>(cs.cov, cs.n_modes);
  ExternalModelConfig cfg;
  cfg.command = script;
  cfg.work_dir = (tmp.path / "work").string();
  cfg.grid_x1 = 65;
  cfg.grid_x3 = 9;
  const ExternalStrengthModel model(cfg, cache, cs.decay);
  Rng rng(61);
  const auto xi = test_support::draw_wrinkle(cs, basis, 10.0, rng);
  const klfield::WrinkleField f(xi, *cache->get(xi.length_scale), cs.decay);
  double wmax = 0.0;
  for (int i = 0; i < 65; ++i)
    for (int k = 0; k < 9; ++k)
      wmax = std::max(wmax, std::abs(f.displacement({cs.decay.length_mm * i / 64, cs.decay.depth_mm * k / 8})));
  EXPECT_NEAR(model.evaluate(xi, 3), 9.0 - wmax, 1e-12);
  std::ifstream in(tmp.path / "work" / "sample_3.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "x1_mm,x3_mm,W_mm");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 65 * 9);
}

TEST_F(SlopeTest, ExternalModelFailuresAreReported) {
  TempDir tmp("ext_fail");
  auto cache = std::make_shared<klfield::BasisCache>(cs.cov, cs.n_modes);
  const WrinkleParams xi{Eigen::VectorXd::Zero(cs.n_modes), cs.cov.lambda_mm};
  ExternalModelConfig cfg;
  cfg.work_dir = (tmp.path / "work").string();
  cfg.grid_x1 = 5;
  cfg.grid_x3 = 3;

  cfg.command = write_script(tmp.path, "fail.sh", "exit 3");
  const ExternalStrengthModel failing(cfg, cache, cs.decay);
  EXPECT_THROW(failing.evaluate(xi, 0), NumericalError);

  cfg.command = write_script(tmp.path, "garbage.sh", "echo not-json");
  const ExternalStrengthModel garbage(cfg, cache, cs.decay);
  EXPECT_THROW(garbage.evaluate(xi, 0), NumericalError);

  cfg.command = write_script(tmp.path, "slow.sh", "sleep 30");
  cfg.timeout_s = 0.3;
  cfg.retries = 0;
  const ExternalStrengthModel slow(cfg, cache, cs.decay);
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_THROW(slow.evaluate(xi, 0), NumericalError);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 5.0);

  // failures inside monte_carlo stay per sample
  const auto d = monte_carlo({xi, xi}, failing);
  EXPECT_EQ(d.n_ok, 0u);
  EXPECT_NE(d.samples[0].error.find("status 3"), std::string::npos);
}

TEST(StrengthCsv, WritesAllRows) {
  TempDir tmp("csv");
  const auto d = monte_carlo(echo_samples({1.5, -1.0, 2.5}), EchoModel{});
  const auto path = (tmp.path / "s.csv").string();
  write_strength_csv(d, path);
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "sample_id,max_slope,Mc");
  EXPECT_EQ(lines[1], "0,nan,1.5");
  EXPECT_EQ(lines[2], "1,nan,nan");
}

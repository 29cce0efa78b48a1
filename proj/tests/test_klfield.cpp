#include <cmath>
#include <filesystem>
#include <random>
#include <thread>

#include <gtest/gtest.h>
#include <lapacke.h>

#include "defect_chain/klfield.hpp"

using namespace defect_chain;
using namespace defect_chain::klfield;

namespace {

const GeometrySpec kGeom{};

CovarianceSpec case_study_cov(double lambda = 12.9, int grid = 256, double sigma = 0.1425) {
  return {sigma, lambda, kGeom.corner_arc_length_mm(), grid};
}

// Eigenvalues of the same Nystrom matrix from LAPACK, descending.
Eigen::VectorXd lapack_eigenvalues(const CovarianceSpec& cov, Eigen::MatrixXd* vectors = nullptr) {
  NystromSystem sys = nystrom_system(cov);
  const int n = cov.grid_n;
  std::vector<double> a(sys.matrix.data(), sys.matrix.data() + n * n);
  std::vector<double> w(static_cast<std::size_t>(n));
  const int info = LAPACKE_dsyev(LAPACK_COL_MAJOR, 'V', 'U', n, a.data(), n, w.data());
  EXPECT_EQ(info, 0);
  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) out[i] = w[static_cast<std::size_t>(n - 1 - i)];
  if (vectors) {
    vectors->resize(n, n);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < n; ++k)
        (*vectors)(k, i) = a[static_cast<std::size_t>((n - 1 - i) * n + k)];
  }
  return out;
}

WrinkleParams random_params(int n_modes, double lambda, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> z;
  WrinkleParams xi;
  xi.amplitudes.resize(n_modes);
  for (int i = 0; i < n_modes; ++i) xi.amplitudes[i] = scale * z(rng);
  xi.length_scale = lambda;
  return xi;
}

}  // namespace

TEST(KLBasis, CaseStudyHasThirtyNonIncreasingModes) {
  const KLBasis basis = build_kl_basis(case_study_cov(), 30);
  ASSERT_EQ(basis.n_modes(), 30);
  for (int i = 1; i < 30; ++i) EXPECT_LE(basis.eigenvalues()[i], basis.eigenvalues()[i - 1]);
  EXPECT_GT(basis.eigenvalues()[0], 0.0);
  EXPECT_GE(basis.eigenvalues().minCoeff(), 0.0);
}

TEST(KLBasis, RawModesOrthonormalUnderQuadrature) {
  for (double lambda : {6.0, 12.9, 26.0}) {
    const KLBasis basis = build_kl_basis(case_study_cov(lambda), 30);
    const Eigen::MatrixXd gram =
        basis.raw_modes().transpose() * basis.weights().asDiagonal() * basis.raw_modes();
    const double err = (gram - Eigen::MatrixXd::Identity(30, 30)).cwiseAbs().maxCoeff();
    EXPECT_LE(err, 1e-8) << "lambda " << lambda;
  }
}

TEST(KLBasis, EigenvaluesMatchLapackOnSameMatrix) {
  const auto cov = case_study_cov();
  const KLBasis basis = build_kl_basis(cov, 30);
  Eigen::MatrixXd vecs;
  const Eigen::VectorXd ref = lapack_eigenvalues(cov, &vecs);
  const double top = ref[0];
  for (int i = 0; i < 30; ++i) {
    EXPECT_LE(std::abs(basis.eigenvalues()[i] - std::max(ref[i], 0.0)), 1e-10 * top) << i;
    if (ref[i] >= 1e-6 * top) {
      EXPECT_LE(std::abs(basis.eigenvalues()[i] / ref[i] - 1.0), 1e-10) << i;
    }
  }
  // Leading, well separated eigenvectors agree up to sign.
  const Eigen::VectorXd sw = basis.weights().cwiseSqrt();
  for (int i = 0; i < 8; ++i) {
    const Eigen::VectorXd v = sw.cwiseProduct(basis.raw_modes().col(i));
    EXPECT_NEAR(std::abs(v.dot(vecs.col(i))), 1.0, 1e-9) << i;
  }
}

TEST(KLBasis, LeadingEigenvaluesStableUnderGridRefinement) {
  const KLBasis coarse = build_kl_basis(case_study_cov(12.9, 128, 1.0), 10);
  const KLBasis fine = build_kl_basis(case_study_cov(12.9, 256, 1.0), 10);
  for (int i = 0; i < 10; ++i)
    EXPECT_LE(std::abs(coarse.eigenvalues()[i] / fine.eigenvalues()[i] - 1.0), 0.01) << i;
}

TEST(KLBasis, SpectrumDecaysFasterForLongerCorrelation) {
  std::vector<double> ratio;
  for (double lambda : {6.0, 12.9, 26.0}) {
    const KLBasis b = build_kl_basis(case_study_cov(lambda), 30);
    ratio.push_back(b.eigenvalues()[29] / b.eigenvalues()[0]);
  }
  // Past ~mode 15 the larger lambdas sit at roundoff (and may clamp to 0).
  EXPECT_GT(ratio[0], ratio[1]);
  EXPECT_GE(ratio[1], ratio[2]);
  const KLBasis a6 = build_kl_basis(case_study_cov(6.0), 10);
  const KLBasis a13 = build_kl_basis(case_study_cov(12.9), 10);
  const KLBasis a26 = build_kl_basis(case_study_cov(26.0), 10);
  EXPECT_GT(a6.eigenvalues()[9] / a6.eigenvalues()[0], a13.eigenvalues()[9] / a13.eigenvalues()[0]);
  EXPECT_GT(a13.eigenvalues()[9] / a13.eigenvalues()[0], a26.eigenvalues()[9] / a26.eigenvalues()[0]);
}

TEST(KLBasis, RejectsBadParameters) {
  EXPECT_THROW(build_kl_basis(case_study_cov(-1.0), 10), ParameterError);
  EXPECT_THROW(build_kl_basis(case_study_cov(12.9, 256, 0.0), 10), ParameterError);
  EXPECT_THROW(build_kl_basis(case_study_cov(12.9, 40), 30), ParameterError);
}

TEST(KLBasis, ModeSignsStableAcrossNearbyLambda) {
  const KLBasis a = build_kl_basis(case_study_cov(12.90), 12);
  const KLBasis b = build_kl_basis(case_study_cov(12.95), 12);
  for (int i = 0; i < 12; ++i) {
    const double c = (a.raw_modes().col(i).cwiseProduct(a.weights())).dot(b.raw_modes().col(i));
    EXPECT_GT(c, 0.9) << i;
  }
}

TEST(KLBasis, CsvRoundTripPreservesEvaluation) {
  const KLBasis basis = build_kl_basis(case_study_cov(), 12);
  const auto path = std::filesystem::temp_directory_path() / "defect_chain_basis.csv";
  write_basis_csv(basis, path.string());
  const KLBasis back = read_basis_csv(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(back.n_modes(), 12);
  EXPECT_LE((back.eigenvalues() - basis.eigenvalues()).cwiseAbs().maxCoeff(), 1e-15);
  std::mt19937_64 rng(3);
  const auto xi = random_params(12, 12.9, rng);
  const auto decay = DecaySpec::for_corner(kGeom);
  for (double x1 : {3.0, 17.0, 30.0})
    EXPECT_NEAR(eval_wrinkle(xi, basis, decay, {x1, 4.8}), eval_wrinkle(xi, back, decay, {x1, 4.8}),
                1e-13);
}

TEST(BasisCache, QuantizesLambdaAndSharesBases) {
  BasisCache cache(case_study_cov(), 10, 0.05);
  const auto a = cache.get(12.91);
  const auto b = cache.get(12.89);
  EXPECT_EQ(a.get(), b.get());
  EXPECT_NEAR(a->lambda(), 12.9, 1e-12);
  EXPECT_NE(cache.get(12.96).get(), a.get());
  EXPECT_THROW(cache.get(0.0), ParameterError);
}

TEST(BasisCache, ConcurrentAccessYieldsSingleEntryPerKey) {
  BasisCache cache(case_study_cov(), 10, 0.05);
  std::vector<std::thread> pool;
  std::vector<const KLBasis*> seen(8);
  for (int t = 0; t < 8; ++t)
    pool.emplace_back([&, t] { seen[static_cast<std::size_t>(t)] = cache.get(12.9 + 0.05 * (t % 2)).get(); });
  for (auto& th : pool) th.join();
  EXPECT_EQ(cache.size(), 2u);
  for (int t = 2; t < 8; ++t) EXPECT_EQ(seen[static_cast<std::size_t>(t)], seen[static_cast<std::size_t>(t % 2)]);
}

TEST(Decay, CaseStudyEnvelope) {
  const auto d = DecaySpec::for_corner(kGeom);
  EXPECT_DOUBLE_EQ(d.along.value(d.along.center), 1.0);
  EXPECT_DOUBLE_EQ(d.through.value(4.8), 1.0);
  EXPECT_NEAR(d.along.value(0.0), 1e-6, 1e-15);
  EXPECT_NEAR(d.along.value(kGeom.corner_arc_length_mm()), 1e-6, 1e-15);
  EXPECT_NEAR(d.through.value(0.0), 1e-6, 1e-15);
  EXPECT_LT(d.through.value(kGeom.thickness_mm()), 1e-6);
  for (double off : {0.25, 1.5, 3.0, 7.75}) {
    EXPECT_EQ(d.along.value_at_offset(off), d.along.value_at_offset(-off));
    EXPECT_EQ(d.through.value_at_offset(off / 2), d.through.value_at_offset(-off / 2));
    const double lhs = d.through.value(4.8 + off / 2);
    EXPECT_NEAR(lhs, d.through.value(4.8 - off / 2), 1e-13 * lhs);
  }
  EXPECT_THROW(DecayAxis::with_floor(1.0, 1.0, 3, 1e-6), ParameterError);
}

TEST(Decay, DerivativeMatchesFiniteDifference) {
  const auto d = DecaySpec::for_corner(kGeom);
  for (double x : {2.0, 9.0, 15.0, 20.0, 30.0}) {
    const double h = 1e-5;
    const double fd = (d.along.value(x + h) - d.along.value(x - h)) / (2 * h);
    EXPECT_NEAR(d.along.derivative(x), fd, 1e-8);
  }
}

class WrinkleTest : public ::testing::Test {
 protected:
  KLBasis basis = build_kl_basis(case_study_cov(), 30);
  DecaySpec decay = DecaySpec::for_corner(kGeom);
  std::mt19937_64 rng{11};
};

TEST_F(WrinkleTest, ZeroAmplitudesGiveZeroField) {
  WrinkleParams xi{Eigen::VectorXd::Zero(30), 12.9};
  for (double x1 : {0.0, 5.0, 17.3, 34.5})
    for (double x3 : {0.0, 4.8, 9.0}) {
      EXPECT_EQ(eval_wrinkle(xi, basis, decay, {x1, x3}), 0.0);
      EXPECT_EQ(eval_misalignment(xi, basis, decay, {x1, x3}, 1), 0.0);
    }
}

TEST_F(WrinkleTest, SingleModeReproducedAtGridPoints) {
  WrinkleParams xi{Eigen::VectorXd::Zero(30), 12.9};
  xi.amplitudes[0] = 1.0;
  const auto flat = DecaySpec::unit(basis.length(), kGeom.thickness_mm());
  for (Eigen::Index k = 0; k < basis.grid().size(); k += 17)
    EXPECT_NEAR(eval_wrinkle(xi, basis, flat, {basis.grid()[k], 1.0}), basis.modes()(k, 0), 1e-14);
}

TEST_F(WrinkleTest, CornerEndsDecayToFloor) {
  // At the corner ends the envelope leaves 1e-6 of the undecayed KL profile.
  for (int trial = 0; trial < 5; ++trial) {
    const auto xi = random_params(30, 12.9, rng);
    WrinkleField f(xi, basis, decay);
    double profile = 0.0;
    for (int i = 0; i <= 400; ++i)
      profile = std::max(profile, std::abs(f.profile().value(basis.length() * i / 400.0)));
    for (double end : {0.0, basis.length()}) {
      EXPECT_LE(std::abs(f.displacement({end, 4.8})), (1e-6 + 1e-15) * profile);
      EXPECT_NEAR(f.displacement({end, 4.8}), 1e-6 * f.profile().value(end), 1e-18);
    }
  }
}

TEST_F(WrinkleTest, LinearInAmplitudes) {
  const auto a = random_params(30, 12.9, rng);
  const auto b = random_params(30, 12.9, rng);
  WrinkleParams sum{a.amplitudes + b.amplitudes, 12.9};
  for (int i = 0; i < 50; ++i) {
    Point x{basis.length() * i / 49.0, 2.0 + 0.1 * i};
    const double lhs = eval_wrinkle(sum, basis, decay, x);
    const double rhs = eval_wrinkle(a, basis, decay, x) + eval_wrinkle(b, basis, decay, x);
    EXPECT_NEAR(lhs, rhs, 1e-15 + 1e-13 * std::abs(lhs));
  }
}

TEST_F(WrinkleTest, MisalignmentMatchesFiniteDifferenceOfDisplacement) {
  std::uniform_real_distribution<double> u1(0.05 * basis.length(), 0.95 * basis.length());
  std::uniform_real_distribution<double> u3(2.5, 7.0);
  const double h = 1e-4 * basis.length();
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto xi = random_params(30, 12.9, rng);
    const Point x{u1(rng), u3(rng)};
    const double fd = (eval_wrinkle(xi, basis, decay, {x.x1 + h, x.x3}) -
                       eval_wrinkle(xi, basis, decay, {x.x1 - h, x.x3})) / (2 * h);
    const double t = std::tan(eval_misalignment(xi, basis, decay, x, 1));
    if (std::abs(fd) < 1e-6) continue;
    EXPECT_LE(std::abs(t - fd) / std::abs(fd), 1e-4);
    ++checked;
  }
  EXPECT_GT(checked, 150);
}

TEST_F(WrinkleTest, TanMisalignmentScalesLinearly) {
  const auto xi = random_params(30, 12.9, rng);
  WrinkleParams scaled{2.5 * xi.amplitudes, 12.9};
  for (double x1 : {8.0, 15.0, 21.0}) {
    const double t = std::tan(eval_misalignment(xi, basis, decay, {x1, 5.0}, 1));
    const double ts = std::tan(eval_misalignment(scaled, basis, decay, {x1, 5.0}, 1));
    EXPECT_NEAR(ts, 2.5 * t, 1e-13 * std::max(1.0, std::abs(ts)));
  }
}

TEST_F(WrinkleTest, AxisAndDomainErrors) {
  const auto xi = random_params(30, 12.9, rng);
  EXPECT_THROW(eval_misalignment(xi, basis, decay, {5.0, 5.0}, 3), ParameterError);
  EXPECT_EQ(eval_misalignment(xi, basis, decay, {5.0, 5.0}, 2), 0.0);
  EXPECT_THROW(eval_wrinkle(xi, basis, decay, {-1.0, 5.0}), DomainError);
  EXPECT_THROW(eval_wrinkle(xi, basis, decay, {5.0, 50.0}), DomainError);
  WrinkleParams other = xi;
  other.length_scale = 14.0;
  EXPECT_THROW(eval_wrinkle(other, basis, decay, {5.0, 5.0}), ParameterError);
}

TEST_F(WrinkleTest, JacobianCheck) {
  const auto grid = SectionGrid::for_part(kGeom);
  WrinkleParams zero{Eigen::VectorXd::Zero(30), 12.9};
  EXPECT_TRUE(jacobian_positive(zero, basis, decay, grid));

  const auto xi = random_params(30, 12.9, rng);
  WrinkleField f(xi, basis, decay);
  // Brute-force minimum over the full tensor grid matches the separable one.
  double brute = std::numeric_limits<double>::infinity();
  for (double x1 : grid.x1)
    for (double x3 : grid.x3) brute = std::min(brute, 1.0 + f.slope_through({x1, x3}));
  EXPECT_NEAR(min_jacobian(f, grid), brute, 1e-12);

  // Scale until the worst point reaches dW/dx3 = -1.5.
  const double worst_slope = brute - 1.0;
  ASSERT_LT(worst_slope, 0.0);
  WrinkleParams bad{xi.amplitudes * (-1.5 / worst_slope), 12.9};
  EXPECT_NEAR(min_jacobian(WrinkleField(bad, basis, decay), grid), -0.5, 1e-9);
  EXPECT_FALSE(jacobian_positive(bad, basis, decay, grid));
  EXPECT_EQ(jacobian_positive(xi, basis, decay, grid), brute > 0.0);
}

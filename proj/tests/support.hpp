#ifndef DEFECT_CHAIN_TESTS_SUPPORT_HPP
#define DEFECT_CHAIN_TESTS_SUPPORT_HPP

#include <cmath>
#include <numbers>
#include <random>

#include "defect_chain/image.hpp"
#include "defect_chain/klfield.hpp"
#include "defect_chain/rng.hpp"

namespace test_support {

using namespace defect_chain;

struct CaseStudy {
  klfield::GeometrySpec geom;
  klfield::CovarianceSpec cov;
  klfield::DecaySpec decay;
  int n_modes = 30;

  CaseStudy() {
    cov.length_mm = geom.corner_arc_length_mm();
    decay = klfield::DecaySpec::for_corner(geom);
  }

  klfield::KLBasis basis() const { return klfield::build_kl_basis(cov, n_modes); }
};

/// Amplitudes i.i.d. N(0, scale^2), redrawn until the wrinkle is admissible.
inline klfield::WrinkleParams draw_wrinkle(const CaseStudy& cs, const klfield::KLBasis& basis,
                                           double scale, Rng& rng) {
  std::normal_distribution<double> nd;
  const auto grid = klfield::SectionGrid::for_part(cs.geom);
  klfield::WrinkleParams xi{Eigen::VectorXd(cs.n_modes), basis.lambda()};
  do {
    for (int i = 0; i < cs.n_modes; ++i) xi.amplitudes[i] = scale * nd(rng);
  } while (!klfield::jacobian_positive(xi, basis, cs.decay, grid));
  return xi;
}

/// Straight stripes at pixel angle alpha: gray = mid + amp cos(2 pi (r - c tan alpha) / period).
inline GrayImage stripe_image(int w, int h, double alpha, double period = 10.0,
                              double mid = 128.0, double amp = 80.0) {
  GrayImage img(w, h, 1.0, 1.0);
  const double t = std::tan(alpha);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      img.at(c, r) = to_gray(mid + amp * std::cos(2.0 * std::numbers::pi * (r - c * t) / period));
  return img;
}

}  // namespace test_support

#endif  // DEFECT_CHAIN_TESTS_SUPPORT_HPP

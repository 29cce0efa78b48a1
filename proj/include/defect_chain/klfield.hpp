#ifndef DEFECT_CHAIN_KLFIELD_HPP
#define DEFECT_CHAIN_KLFIELD_HPP

// Karhunen-Loeve wrinkle representation.
//
// A wrinkle is the out-of-plane offset
//
//     W(x1, x3) = g1(x1) g3(x3) sum_i a_i f_i(x1; lambda)
//
// where f_i are the leading eigenfunctions of a squared-exponential covariance
// on the corner arc [0, L], each scaled by the square root of its eigenvalue,
// and g1, g3 are decay envelopes centred on the defect. The defect map is
// T(x) = x + W(x) e3, so det J = 1 + dW/dx3.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <mutex>
#include <numbers>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "defect_chain/error.hpp"

namespace defect_chain::klfield {

/// Corner-bend coupon geometry (mm). A radius of +inf marks a flat part.
struct GeometrySpec {
  double radius_mm = 22.0;
  int ply_count = 39;
  double ply_thickness_mm = 0.24;
  double interply_thickness_mm = 0.015;
  double width_mm = 52.0;
  double limb_length_mm = 10.0;

  bool flat() const noexcept { return std::isinf(radius_mm); }

  double thickness_mm() const noexcept {
    return ply_count * ply_thickness_mm + (ply_count - 1) * interply_thickness_mm;
  }

  /// Repeat distance of the ply/interply stack.
  double ply_period_mm() const noexcept { return ply_thickness_mm + interply_thickness_mm; }

  /// Length of the inner corner arc, the x1 extent of the wrinkle domain.
  double corner_arc_length_mm() const noexcept { return radius_mm * std::numbers::pi / 2.0; }

  void validate() const {
    if (!(radius_mm > 0.0) || ply_count < 1 || !(ply_thickness_mm > 0.0) ||
        !(interply_thickness_mm > 0.0) || !(width_mm > 0.0) || !(limb_length_mm > 0.0))
      throw ParameterError("geometry values must all be positive");
  }
};

struct CovarianceSpec {
  double sigma_f = 0.1425;
  double lambda_mm = 12.9;
  double length_mm = 22.0 * std::numbers::pi / 2.0;
  int grid_n = 256;

  void validate(int n_modes) const {
    if (!(sigma_f > 0.0)) throw ParameterError("sigma_f must be positive");
    if (!(lambda_mm > 0.0) || !std::isfinite(lambda_mm))
      throw ParameterError("correlation length must be positive and finite");
    if (!(length_mm > 0.0)) throw ParameterError("domain length must be positive");
    if (n_modes < 1) throw ParameterError("need at least one KL mode");
    if (grid_n < 2 * n_modes)
      throw ParameterError("grid_n must be at least twice the number of modes");
  }
};

/// Natural cubic spline through values on a uniform grid starting at 0.
/// Interpolation is linear in the node values, so splines of a linear
/// combination of modes are the same combination of the mode splines.
class UniformSpline {
 public:
  UniformSpline() = default;
  UniformSpline(double step, Eigen::VectorXd values, Eigen::VectorXd curvature)
      : h_(step), y_(std::move(values)), m_(std::move(curvature)) {}

  double value(double x) const {
    const auto [i, a, b] = locate(x);
    return m_[i] * a * a * a / (6.0 * h_) + m_[i + 1] * b * b * b / (6.0 * h_) +
           (y_[i] / h_ - m_[i] * h_ / 6.0) * a + (y_[i + 1] / h_ - m_[i + 1] * h_ / 6.0) * b;
  }

  double derivative(double x) const {
    const auto [i, a, b] = locate(x);
    return -m_[i] * a * a / (2.0 * h_) + m_[i + 1] * b * b / (2.0 * h_) -
           (y_[i] / h_ - m_[i] * h_ / 6.0) + (y_[i + 1] / h_ - m_[i + 1] * h_ / 6.0);
  }

  double length() const noexcept { return h_ * static_cast<double>(y_.size() - 1); }

 private:
  struct Cell {
    Eigen::Index i;
    double a;  // distance to the right node
    double b;  // distance to the left node
  };
  Cell locate(double x) const {
    const auto last = y_.size() - 2;
    auto i = static_cast<Eigen::Index>(std::floor(x / h_));
    i = std::clamp<Eigen::Index>(i, 0, last);
    const double left = static_cast<double>(i) * h_;
    return {i, left + h_ - x, x - left};
  }

  double h_ = 1.0;
  Eigen::VectorXd y_;
  Eigen::VectorXd m_;
};

/// Second derivatives of natural cubic splines through each column of `y`.
inline Eigen::MatrixXd natural_spline_curvature(const Eigen::MatrixXd& y, double h) {
  const Eigen::Index n = y.rows();
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, y.cols());
  if (n < 3) return m;
  // Thomas algorithm on M_{i-1} + 4 M_i + M_{i+1} = 6 (y_{i+1} - 2 y_i + y_{i-1}) / h^2.
  const Eigen::Index k = n - 2;
  std::vector<double> c(static_cast<std::size_t>(k));
  Eigen::MatrixXd d(k, y.cols());
  for (Eigen::Index i = 0; i < k; ++i)
    d.row(i) = 6.0 * (y.row(i + 2) - 2.0 * y.row(i + 1) + y.row(i)) / (h * h);
  c[0] = 1.0 / 4.0;
  d.row(0) /= 4.0;
  for (Eigen::Index i = 1; i < k; ++i) {
    const double denom = 4.0 - c[static_cast<std::size_t>(i - 1)];
    c[static_cast<std::size_t>(i)] = 1.0 / denom;
    d.row(i) = (d.row(i) - d.row(i - 1)) / denom;
  }
  m.row(k) = d.row(k - 1);
  for (Eigen::Index i = k - 2; i >= 0; --i)
    m.row(i + 1) = d.row(i) - c[static_cast<std::size_t>(i)] * m.row(i + 2);
  return m;
}

/// Uniform-grid quadrature weights: trapezoid rule with fourth-order Gregory
/// end corrections.
inline Eigen::VectorXd quadrature_weights(int n, double length) {
  const double h = length / (n - 1);
  Eigen::VectorXd w = Eigen::VectorXd::Constant(n, h);
  if (n >= 7) {
    constexpr double ends[3] = {3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0};
    for (int i = 0; i < 3; ++i) {
      w[i] = h * ends[i];
      w[n - 1 - i] = h * ends[i];
    }
  } else {
    w[0] = w[n - 1] = h / 2.0;
  }
  return w;
}

/// Symmetric Nystrom matrix W^{1/2} K W^{1/2} of the squared-exponential kernel.
struct NystromSystem {
  Eigen::VectorXd grid;
  Eigen::VectorXd weights;
  Eigen::MatrixXd matrix;
};

inline NystromSystem nystrom_system(const CovarianceSpec& cov) {
  NystromSystem sys;
  const int n = cov.grid_n;
  sys.grid = Eigen::VectorXd::LinSpaced(n, 0.0, cov.length_mm);
  sys.weights = quadrature_weights(n, cov.length_mm);
  const Eigen::VectorXd sw = sys.weights.cwiseSqrt();
  const double var = cov.sigma_f * cov.sigma_f;
  const double l2 = cov.lambda_mm * cov.lambda_mm;
  sys.matrix.resize(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = j; i < n; ++i) {
      const double d = sys.grid[i] - sys.grid[j];
      const double v = sw[i] * var * std::exp(-d * d / l2) * sw[j];
      sys.matrix(i, j) = v;
      sys.matrix(j, i) = v;
    }
  return sys;
}

/// Leading KL eigenpairs on a uniform grid.
///
/// `raw_modes` are orthonormal under the quadrature weights; `modes` are the
/// raw modes scaled by sqrt(eigenvalue), which is the basis the amplitudes
/// multiply.
class KLBasis {
 public:
  KLBasis(CovarianceSpec cov, Eigen::VectorXd grid, Eigen::VectorXd weights,
          Eigen::VectorXd eigenvalues, Eigen::MatrixXd raw_modes)
      : cov_(cov),
        grid_(std::move(grid)),
        weights_(std::move(weights)),
        eigenvalues_(std::move(eigenvalues)),
        raw_(std::move(raw_modes)) {
    modes_ = raw_ * eigenvalues_.cwiseSqrt().asDiagonal();
    curvature_ = natural_spline_curvature(modes_, step());
  }

  const CovarianceSpec& covariance() const noexcept { return cov_; }
  double lambda() const noexcept { return cov_.lambda_mm; }
  double length() const noexcept { return cov_.length_mm; }
  double step() const noexcept { return cov_.length_mm / (cov_.grid_n - 1); }
  int n_modes() const noexcept { return static_cast<int>(eigenvalues_.size()); }
  const Eigen::VectorXd& grid() const noexcept { return grid_; }
  const Eigen::VectorXd& weights() const noexcept { return weights_; }
  const Eigen::VectorXd& eigenvalues() const noexcept { return eigenvalues_; }
  const Eigen::MatrixXd& raw_modes() const noexcept { return raw_; }
  const Eigen::MatrixXd& modes() const noexcept { return modes_; }

  /// Largest |lambda - lambda_basis| for which this basis may stand in.
  double lambda_tolerance() const noexcept { return lambda_tolerance_; }
  void set_lambda_tolerance(double tol) noexcept { lambda_tolerance_ = tol; }

  /// Spline of sum_i a_i f_i.
  UniformSpline combine(const Eigen::VectorXd& amplitudes) const {
    if (amplitudes.size() != n_modes())
      throw ParameterError("amplitude count does not match the number of KL modes");
    return UniformSpline(step(), modes_ * amplitudes, curvature_ * amplitudes);
  }

  UniformSpline mode(int i) const {
    return UniformSpline(step(), modes_.col(i), curvature_.col(i));
  }

 private:
  CovarianceSpec cov_;
  Eigen::VectorXd grid_;
  Eigen::VectorXd weights_;
  Eigen::VectorXd eigenvalues_;
  Eigen::MatrixXd raw_;
  Eigen::MatrixXd modes_;
  Eigen::MatrixXd curvature_;
  double lambda_tolerance_ = 0.0;
};

namespace detail {

// Legendre P_k on [0, L] at each grid point.
inline Eigen::VectorXd legendre_on_grid(const Eigen::VectorXd& grid, double length, int k) {
  Eigen::VectorXd t = (2.0 * grid.array() / length - 1.0).matrix();
  Eigen::VectorXd p0 = Eigen::VectorXd::Ones(grid.size());
  if (k == 0) return p0;
  Eigen::VectorXd p1 = t;
  for (int j = 1; j < k; ++j) {
    Eigen::VectorXd p2 = (((2.0 * j + 1.0) * t.array() * p1.array() - j * p0.array()) / (j + 1.0))
                             .matrix();
    p0 = std::move(p1);
    p1 = std::move(p2);
  }
  return p1;
}

}  // namespace detail

inline KLBasis build_kl_basis(const CovarianceSpec& cov, int n_modes) {
  cov.validate(n_modes);
  NystromSystem sys = nystrom_system(cov);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sys.matrix);
  if (solver.info() != Eigen::Success) throw NumericalError("KL eigensolve failed");

  const Eigen::Index n = cov.grid_n;
  Eigen::VectorXd values(n_modes);
  Eigen::MatrixXd raw(n, n_modes);
  const Eigen::VectorXd inv_sw = sys.weights.cwiseSqrt().cwiseInverse();
  for (int i = 0; i < n_modes; ++i) {
    // Eigen returns eigenvalues in increasing order.
    const Eigen::Index src = n - 1 - i;
    double mu = solver.eigenvalues()[src];
    if (mu < -1e-12) throw NumericalError("covariance operator has a negative eigenvalue");
    values[i] = std::max(mu, 0.0);
    Eigen::VectorXd e = inv_sw.cwiseProduct(solver.eigenvectors().col(src));
    const Eigen::VectorXd p = detail::legendre_on_grid(sys.grid, cov.length_mm, i);
    double proj = sys.weights.dot(e.cwiseProduct(p));
    if (std::abs(proj) < 1e-8) proj = e[0];
    if (proj < 0.0) e = -e;
    raw.col(i) = e;
  }
  return KLBasis(cov, std::move(sys.grid), std::move(sys.weights), std::move(values),
                 std::move(raw));
}

/// Bases keyed by lambda rounded to a quantum. Safe for concurrent use.
class BasisCache {
 public:
  BasisCache(CovarianceSpec cov, int n_modes, double quantum_mm = 0.05)
      : cov_(cov), n_modes_(n_modes), quantum_(quantum_mm) {
    if (!(quantum_mm > 0.0)) throw ParameterError("lambda quantum must be positive");
    cov_.validate(n_modes);
  }

  std::shared_ptr<const KLBasis> get(double lambda_mm) const {
    if (!(lambda_mm > 0.0) || !std::isfinite(lambda_mm))
      throw ParameterError("correlation length must be positive and finite");
    const auto key = static_cast<std::int64_t>(std::llround(lambda_mm / quantum_));
    if (key < 1) throw ParameterError("correlation length below one cache quantum");
    {
      std::lock_guard lock(mutex_);
      if (auto it = entries_.find(key); it != entries_.end()) return it->second;
    }
    CovarianceSpec c = cov_;
    c.lambda_mm = static_cast<double>(key) * quantum_;
    auto basis = std::make_shared<KLBasis>(build_kl_basis(c, n_modes_));
    basis->set_lambda_tolerance(0.5 * quantum_ + 1e-12);
    std::lock_guard lock(mutex_);
    return entries_.emplace(key, std::move(basis)).first->second;
  }

  int n_modes() const noexcept { return n_modes_; }
  double quantum() const noexcept { return quantum_; }
  const CovarianceSpec& covariance() const noexcept { return cov_; }
  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
  }

 private:
  CovarianceSpec cov_;
  int n_modes_;
  double quantum_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::int64_t, std::shared_ptr<const KLBasis>> entries_;
};

/// g(x) = exp(-((x - c) / eta)^n). An infinite eta gives g = 1.
struct DecayAxis {
  double center = 0.0;
  double eta = std::numeric_limits<double>::infinity();
  int exponent = 4;

  static DecayAxis none() { return {}; }

  /// Envelope that has decayed to `floor` at distance `reach` from the centre.
  static DecayAxis with_floor(double center, double reach, int exponent, double floor) {
    if (exponent < 2 || exponent % 2 != 0)
      throw ParameterError("decay exponent must be even and at least 2");
    if (!(reach > 0.0)) throw ParameterError("decay reach must be positive");
    if (!(floor > 0.0 && floor < 1.0)) throw ParameterError("decay floor must lie in (0, 1)");
    return {center, reach / std::pow(-std::log(floor), 1.0 / exponent), exponent};
  }

  double value(double x) const { return value_at_offset(x - center); }

  /// g at signed distance `d` from the centre; even in d.
  double value_at_offset(double d) const {
    if (std::isinf(eta)) return 1.0;
    return std::exp(-std::pow(std::abs(d) / eta, exponent));
  }

  double derivative(double x) const {
    if (std::isinf(eta)) return 0.0;
    const double u = (x - center) / eta;
    return -exponent * std::pow(u, exponent - 1) / eta * std::exp(-std::pow(u, exponent));
  }
};

/// Decay envelopes plus the rectangular domain [0, length] x [0, depth].
struct DecaySpec {
  DecayAxis along;    // x1, arc length
  DecayAxis through;  // x3, depth
  double length_mm = 0.0;
  double depth_mm = 0.0;

  /// Envelopes centred at the arc midpoint R pi/4 and at `center_x3_mm`,
  /// each reaching `floor` on the nearest domain boundary.
  static DecaySpec for_corner(const GeometrySpec& geom, double center_x3_mm = 4.8,
                              int exponent = 4, double floor = 1e-6) {
    DecaySpec d;
    d.length_mm = geom.corner_arc_length_mm();
    d.depth_mm = geom.thickness_mm();
    const double c1 = geom.radius_mm * std::numbers::pi / 4.0;
    d.along = DecayAxis::with_floor(c1, std::min(c1, d.length_mm - c1), exponent, floor);
    d.through = DecayAxis::with_floor(
        center_x3_mm, std::min(center_x3_mm, d.depth_mm - center_x3_mm), exponent, floor);
    return d;
  }

  /// No decay on either axis.
  static DecaySpec unit(double length_mm, double depth_mm) {
    return {DecayAxis::none(), DecayAxis::none(), length_mm, depth_mm};
  }
};

struct Point {
  double x1 = 0.0;
  double x3 = 0.0;
};

/// xi = [a_1 .. a_Nw, lambda].
struct WrinkleParams {
  Eigen::VectorXd amplitudes;
  double length_scale = 12.9;

  Eigen::Index size() const noexcept { return amplitudes.size() + 1; }

  Eigen::VectorXd to_vector() const {
    Eigen::VectorXd v(size());
    v << amplitudes, length_scale;
    return v;
  }

  static WrinkleParams from_vector(const Eigen::VectorXd& v) {
    return {v.head(v.size() - 1), v[v.size() - 1]};
  }

  bool finite() const { return amplitudes.allFinite() && std::isfinite(length_scale); }
};

/// One wrinkle bound to its basis and envelopes, ready for repeated evaluation.
class WrinkleField {
 public:
  WrinkleField(const WrinkleParams& xi, const KLBasis& basis, const DecaySpec& decay)
      : decay_(decay), length_(basis.length()) {
    if (!xi.finite()) throw ParameterError("wrinkle parameters must be finite");
    if (!(xi.length_scale > 0.0)) throw ParameterError("correlation length must be positive");
    const double tol = std::max(basis.lambda_tolerance(), 1e-9 * basis.lambda());
    if (std::abs(xi.length_scale - basis.lambda()) > tol)
      throw ParameterError("basis was built for a different correlation length");
    profile_ = basis.combine(xi.amplitudes);
  }

  double displacement(Point x) const {
    check(x);
    return decay_.along.value(x.x1) * decay_.through.value(x.x3) * profile_.value(x.x1);
  }

  /// dW/dx1.
  double slope_along(Point x) const {
    check(x);
    return decay_.through.value(x.x3) * along_slope_factor(x.x1);
  }

  /// dW/dx3.
  double slope_through(Point x) const {
    check(x);
    return decay_.along.value(x.x1) * profile_.value(x.x1) * decay_.through.derivative(x.x3);
  }

  /// d/dx1 [g1 S] at x1; dW/dx1 = g3(x3) times this.
  double along_slope_factor(double x1) const {
    return decay_.along.derivative(x1) * profile_.value(x1) +
           decay_.along.value(x1) * profile_.derivative(x1);
  }

  /// g1 S at x1; W = g3(x3) times this.
  double along_amplitude(double x1) const {
    return decay_.along.value(x1) * profile_.value(x1);
  }

  const DecaySpec& decay() const noexcept { return decay_; }
  const UniformSpline& profile() const noexcept { return profile_; }

 private:
  void check(Point x) const {
    constexpr double slack = 1e-9;
    if (!(x.x1 >= -slack && x.x1 <= length_ + slack))
      throw DomainError("x1 outside the wrinkle domain");
    if (decay_.depth_mm > 0.0 && !(x.x3 >= -slack && x.x3 <= decay_.depth_mm + slack))
      throw DomainError("x3 outside the wrinkle domain");
  }

  DecaySpec decay_;
  double length_;
  UniformSpline profile_;
};

inline double eval_wrinkle(const WrinkleParams& xi, const KLBasis& basis,
                           const DecaySpec& decay, Point x) {
  return WrinkleField(xi, basis, decay).displacement(x);
}

/// Misalignment angle arctan(dW/dx_axis). Axis 1 is along the arc; axis 2 is
/// the prismatic width direction, along which W does not vary.
inline double eval_misalignment(const WrinkleParams& xi, const KLBasis& basis,
                                const DecaySpec& decay, Point x, int axis) {
  if (axis != 1 && axis != 2) throw ParameterError("misalignment axis must be 1 or 2");
  WrinkleField field(xi, basis, decay);
  if (axis == 2) {
    field.displacement(x);  // domain check
    return 0.0;
  }
  return std::atan(field.slope_along(x));
}

/// Tensor grid over the cross-section for admissibility and slope checks.
struct SectionGrid {
  std::vector<double> x1;
  std::vector<double> x3;

  /// `along` points over the arc and `per_ply` points per ply thickness through
  /// the laminate, both including the end points.
  static SectionGrid for_part(const GeometrySpec& geom, int along = 512, int per_ply = 4) {
    const double len = geom.corner_arc_length_mm();
    const double depth = geom.thickness_mm();
    const auto n3 = static_cast<int>(std::ceil(depth / (geom.ply_thickness_mm / per_ply))) + 1;
    SectionGrid g;
    g.x1.resize(static_cast<std::size_t>(along));
    g.x3.resize(static_cast<std::size_t>(n3));
    for (int i = 0; i < along; ++i) g.x1[static_cast<std::size_t>(i)] = len * i / (along - 1);
    for (int k = 0; k < n3; ++k) g.x3[static_cast<std::size_t>(k)] = depth * k / (n3 - 1);
    return g;
  }
};

/// Smallest det J = 1 + dW/dx3 over the grid. dW/dx3 = (g1 S)(x1) g3'(x3)
/// separates, so the minimum over x3 at each x1 is attained at the extreme of
/// g3' whose sign matches -(g1 S).
inline double min_jacobian(const WrinkleField& field, const SectionGrid& grid) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (double z : grid.x3) {
    const double d = field.decay().through.derivative(z);
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  double worst = std::numeric_limits<double>::infinity();
  for (double x : grid.x1) {
    const double c = field.along_amplitude(x);
    worst = std::min(worst, 1.0 + (c >= 0.0 ? c * lo : c * hi));
  }
  return worst;
}

inline bool jacobian_positive(const WrinkleParams& xi, const KLBasis& basis,
                              const DecaySpec& decay, const SectionGrid& grid) {
  if (!xi.finite() || !(xi.length_scale > 0.0)) return false;
  return min_jacobian(WrinkleField(xi, basis, decay), grid) > 0.0;
}

// ---------------------------------------------------------------------------
// CSV export/import of a basis (grid, weights, eigenvalues, raw modes).

inline void write_basis_csv(const KLBasis& basis, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  const auto& c = basis.covariance();
  out << "sigma_f,lambda_mm,length_mm,grid_n,n_modes\n"
      << c.sigma_f << ',' << c.lambda_mm << ',' << c.length_mm << ',' << c.grid_n << ','
      << basis.n_modes() << "\nmode,eigenvalue\n";
  for (int i = 0; i < basis.n_modes(); ++i)
    out << i + 1 << ',' << basis.eigenvalues()[i] << '\n';
  out << "x_mm,weight";
  for (int i = 0; i < basis.n_modes(); ++i) out << ",raw_" << i + 1;
  out << '\n';
  for (Eigen::Index k = 0; k < basis.grid().size(); ++k) {
    out << basis.grid()[k] << ',' << basis.weights()[k];
    for (int i = 0; i < basis.n_modes(); ++i) out << ',' << basis.raw_modes()(k, i);
    out << '\n';
  }
}

inline KLBasis read_basis_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  auto fields = [&](std::size_t expect) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("truncated basis file " + path);
    std::vector<double> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (expect && v.size() != expect) throw DataError("malformed basis row in " + path);
    return v;
  };
  std::string header;
  std::getline(in, header);
  const auto meta = fields(5);
  CovarianceSpec cov{meta[0], meta[1], meta[2], static_cast<int>(meta[3])};
  const int n_modes = static_cast<int>(meta[4]);
  std::getline(in, header);
  Eigen::VectorXd values(n_modes);
  for (int i = 0; i < n_modes; ++i) values[i] = fields(2)[1];
  std::getline(in, header);
  Eigen::VectorXd grid(cov.grid_n), weights(cov.grid_n);
  Eigen::MatrixXd raw(cov.grid_n, n_modes);
  for (int k = 0; k < cov.grid_n; ++k) {
    const auto row = fields(static_cast<std::size_t>(n_modes) + 2);
    grid[k] = row[0];
    weights[k] = row[1];
    for (int i = 0; i < n_modes; ++i) raw(k, i) = row[static_cast<std::size_t>(i) + 2];
  }
  return KLBasis(cov, std::move(grid), std::move(weights), std::move(values), std::move(raw));
}

}  // namespace defect_chain::klfield

#endif  // DEFECT_CHAIN_KLFIELD_HPP

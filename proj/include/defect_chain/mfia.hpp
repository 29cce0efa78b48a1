#ifndef DEFECT_CHAIN_MFIA_HPP
#define DEFECT_CHAIN_MFIA_HPP

// Ply misalignment from gray-scale B-scans.
//
// At a pixel, a straight trial fibre of length H is rotated and the angle that
// minimises the gray-scale variance along it is taken as the local ply angle.
// Points are placed by a hierarchy of uniformly refined cell grids, each level
// drawing more points where the previous level saw larger mean |phi|.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "defect_chain/error.hpp"
#include "defect_chain/image.hpp"
#include "defect_chain/klfield.hpp"
#include "defect_chain/optimize.hpp"
#include "defect_chain/parallel.hpp"
#include "defect_chain/rng.hpp"

namespace defect_chain::mfia {

constexpr double deg = std::numbers::pi / 180.0;

struct PixelPoint {
  double col = 0.0;
  double row = 0.0;
};

struct TrialFibreConfig {
  double length_px = 28.8;  // H
  double theta_min = -std::numbers::pi / 4.0;
  double theta_max = std::numbers::pi / 4.0;
  double step_px = 0.5;
  double coarse_step = 0.25 * deg;
  double refine_tol = 0.05 * deg;
  double min_coverage = 0.6;  // realized fraction of the fibre after clipping

  void validate() const {
    if (!(length_px >= 3.0)) throw ParameterError("trial fibre length must be at least 3 pixels");
    const double lim = std::numbers::pi / 2.0;
    if (!(theta_min > -lim && theta_max < lim && theta_min < theta_max))
      throw ParameterError("trial fibre angle range must lie inside (-pi/2, pi/2)");
    if (!(step_px > 0.0 && step_px <= length_px))
      throw ParameterError("integration step must be in (0, H]");
    if (!(coarse_step > 0.0) || !(refine_tol > 0.0))
      throw ParameterError("angle steps must be positive");
    if (!(min_coverage > 0.0 && min_coverage <= 1.0))
      throw ParameterError("minimum coverage must lie in (0, 1]");
  }

  /// H = multiple * t, with t the ply thickness in pixels.
  static TrialFibreConfig for_plies(const klfield::GeometrySpec& geom, double pitch_x3_mm,
                                    double multiple = 3.0) {
    if (!(pitch_x3_mm > 0.0)) throw ParameterError("pixel pitch must be positive");
    TrialFibreConfig cfg;
    cfg.length_px = multiple * geom.ply_thickness_mm / pitch_x3_mm;
    cfg.validate();
    return cfg;
  }
};

inline int fibre_sample_count(const TrialFibreConfig& cfg) {
  return static_cast<int>(std::floor(cfg.length_px / cfg.step_px + 1e-9)) + 1;
}

/// Mean squared deviation of the gray value along the trial fibre, sampled
/// every step_px with bilinear interpolation. Samples falling outside the
/// image are dropped and the mean is taken over the rest.
inline double fibre_variance(const GrayImage& img, PixelPoint x, double theta,
                             const TrialFibreConfig& cfg) {
  const int n = fibre_sample_count(cfg);
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const double mid = 0.5 * (n - 1);
  int used = 0;
  double shift = 0.0, sum = 0.0, sum_sq = 0.0;
  for (int k = 0; k < n; ++k) {
    const double h = (k - mid) * cfg.step_px;
    const double col = x.col + h * c;
    const double row = x.row + h * s;
    if (!img.contains(col, row)) continue;
    const double g = img.bilinear(col, row);
    if (used == 0) shift = g;
    sum += g - shift;
    sum_sq += (g - shift) * (g - shift);
    ++used;
  }
  if (used == 0) throw DomainError("trial fibre lies outside the image");
  if (used < cfg.min_coverage * n) throw DomainError("trial fibre is clipped below minimum length");
  const double m = sum / used;
  return std::max(0.0, sum_sq / used - m * m);
}

/// Pixel-space angle minimising fibre_variance: a coarse scan over the range,
/// then golden-section refinement within one coarse step of each of the three
/// lowest coarse local minima. J can have minima about a degree apart, so a
/// single bracket is not enough. Ties go to the smaller |theta|.
inline double estimate_angle(const GrayImage& img, PixelPoint x, const TrialFibreConfig& cfg) {
  const int k = std::max(1, static_cast<int>(std::lround((cfg.theta_max - cfg.theta_min) /
                                                         cfg.coarse_step)));
  const double step = (cfg.theta_max - cfg.theta_min) / k;
  std::vector<double> theta(static_cast<std::size_t>(k) + 1), j(theta.size());
  for (int i = 0; i <= k; ++i) {
    double t = cfg.theta_min + i * step;
    if (std::abs(t) < 1e-12) t = 0.0;
    theta[static_cast<std::size_t>(i)] = t;
    j[static_cast<std::size_t>(i)] = fibre_variance(img, x, t, cfg);
  }
  double best = 0.0;
  double best_j = std::numeric_limits<double>::infinity();
  auto consider = [&](double t, double v) {
    const double tie = 1e-12 * (1.0 + v);
    if (v < best_j - tie || (v <= best_j + tie && std::abs(t) < std::abs(best))) {
      best = t;
      best_j = v;
    }
  };
  std::vector<std::size_t> minima;
  for (std::size_t i = 0; i < j.size(); ++i) {
    consider(theta[i], j[i]);
    const bool left = i == 0 || j[i] <= j[i - 1];
    const bool right = i + 1 == j.size() || j[i] <= j[i + 1];
    if (left && right) minima.push_back(i);
  }
  if (best_j == 0.0) return best;
  std::sort(minima.begin(), minima.end(), [&](std::size_t a, std::size_t b) { return j[a] < j[b]; });
  if (minima.size() > 3) minima.resize(3);
  for (std::size_t i : minima) {
    const double lo = std::max(cfg.theta_min, theta[i] - step);
    const double hi = std::min(cfg.theta_max, theta[i] + step);
    const auto r = optimize::golden_section([&](double t) { return fibre_variance(img, x, t, cfg); },
                                            lo, hi, cfg.refine_tol);
    consider(r.x, r.value);
  }
  return best;
}

/// tan(phi_phys) = (pitch_3 / pitch_1) tan(phi_pix).
inline double physical_angle(double theta_pix, double pitch_x1_mm, double pitch_x3_mm) {
  return std::atan(pitch_x3_mm / pitch_x1_mm * std::tan(theta_pix));
}

inline double pixel_angle(double phi_phys, double pitch_x1_mm, double pitch_x3_mm) {
  return std::atan(pitch_x1_mm / pitch_x3_mm * std::tan(phi_phys));
}

// ---------------------------------------------------------------------------
// Misalignment samples.

struct MisalignmentSample {
  double x1_mm = 0.0;
  double x3_mm = 0.0;
  double phi_rad = 0.0;
};

struct MisalignmentSamples {
  std::string source;
  std::vector<MisalignmentSample> points;

  std::size_t size() const noexcept { return points.size(); }

  void validate() const {
    for (const auto& p : points) {
      if (!std::isfinite(p.x1_mm) || !std::isfinite(p.x3_mm))
        throw DataError("non-finite sample position in " + source);
      if (!(std::abs(p.phi_rad) < std::numbers::pi / 2.0))
        throw DataError("misalignment angle outside (-pi/2, pi/2) in " + source);
    }
  }
};

inline void write_samples_csv(const MisalignmentSamples& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "x1_mm,x3_mm,phi_rad\n";
  for (const auto& p : s.points) out << p.x1_mm << ',' << p.x3_mm << ',' << p.phi_rad << '\n';
}

inline MisalignmentSamples read_samples_csv(const std::string& path, std::string source = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("x1_mm,x3_mm,phi_rad", 0) != 0)
    throw DataError("missing x1_mm,x3_mm,phi_rad header in " + path);
  MisalignmentSamples s;
  s.source = source.empty() ? path : std::move(source);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    double v[3];
    for (double& x : v) {
      if (!std::getline(ss, cell, ',')) throw DataError("short row in " + path);
      try {
        x = std::stod(cell);
      } catch (const std::exception&) {
        throw DataError("non-numeric value in " + path);
      }
    }
    s.points.push_back({v[0], v[1], v[2]});
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Hierarchical sampling.

/// Half-open pixel rectangle [c0, c1) x [r0, r1).
struct CellRect {
  int c0 = 0, r0 = 0, c1 = 0, r1 = 0;

  int width() const noexcept { return c1 - c0; }
  int height() const noexcept { return r1 - r0; }
  long pixels() const noexcept { return static_cast<long>(width()) * height(); }
  bool contains(int col, int row) const noexcept {
    return col >= c0 && col < c1 && row >= r0 && row < r1;
  }
  bool operator==(const CellRect&) const = default;
};

/// Quadrants in the order top-left, top-right, bottom-left, bottom-right.
inline std::array<CellRect, 4> child_rects(const CellRect& r) {
  const int cm = r.c0 + r.width() / 2;
  const int rm = r.r0 + r.height() / 2;
  return {CellRect{r.c0, r.r0, cm, rm}, CellRect{cm, r.r0, r.c1, rm},
          CellRect{r.c0, rm, cm, r.r1}, CellRect{cm, rm, r.c1, r.r1}};
}

struct HierarchyConfig {
  int m0 = 12;
  int levels = 3;
  std::vector<int> budgets{200, 200, 200};  // N_phi^(j)

  void validate() const {
    if (m0 < 1) throw ParameterError("m0 must be positive");
    if (levels < 1) throw ParameterError("need at least one sampling level");
    if (static_cast<int>(budgets.size()) != levels)
      throw ParameterError("need one sample budget per level");
    for (int b : budgets)
      if (b < 1) throw ParameterError("sample budgets must be positive");
  }

  long total_budget() const { return std::accumulate(budgets.begin(), budgets.end(), 0L); }
  /// sum of m_j = 4^j m0 over the levels.
  long total_cells() const {
    long s = 0, m = m0;
    for (int j = 0; j < levels; ++j, m *= 4) s += m;
    return s;
  }
};

struct TreeCell {
  CellRect rect;
  int parent = -1;
  int allocated = 0;                 // points drawn in this cell on this level
  std::vector<std::size_t> samples;  // indices of those points
  double mean_abs = 0.0;             // mean |phi| over every point so far inside the cell
  double gamma = 0.0;
};

struct TreeLevel {
  int budget = 0;
  bool uniform = false;  // zero total misalignment, fractions fell back to 1/m
  std::vector<TreeCell> cells;
};

struct SampleAllocationTree {
  CellRect root;
  int grid_cols = 0;
  int grid_rows = 0;
  std::vector<TreeLevel> levels;
};

struct Fractions {
  std::vector<double> gamma;
  bool uniform = false;
};

/// gamma_i = mean_i / sum(mean), or 1/m when the sum is zero.
inline Fractions allocation_fractions(const std::vector<double>& mean_abs) {
  if (mean_abs.empty()) throw ParameterError("no cells");
  double total = 0.0;
  for (double v : mean_abs) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw DataError("cell misalignment must be finite and >= 0");
    total += v;
  }
  Fractions f;
  f.gamma.resize(mean_abs.size());
  if (total > 0.0) {
    for (std::size_t i = 0; i < mean_abs.size(); ++i) f.gamma[i] = mean_abs[i] / total;
  } else {
    f.uniform = true;
    std::fill(f.gamma.begin(), f.gamma.end(), 1.0 / static_cast<double>(mean_abs.size()));
  }
  return f;
}

/// n_i = ceil(gamma_i N). Products within 1e-9 of an integer are taken as that
/// integer, so exact fractions are not pushed up by rounding.
inline std::vector<int> allocate_counts(const std::vector<double>& gamma, int budget) {
  std::vector<int> n(gamma.size());
  for (std::size_t i = 0; i < gamma.size(); ++i)
    n[i] = static_cast<int>(std::ceil(gamma[i] * budget - 1e-9));
  return n;
}

/// Columns x rows factorisation of m whose cells are closest to square.
inline std::pair<int, int> level0_grid(int width, int height, int m) {
  std::pair<int, int> best{m, 1};
  double best_err = std::numeric_limits<double>::infinity();
  for (int nx = 1; nx <= m; ++nx) {
    if (m % nx) continue;
    const int ny = m / nx;
    const double err = std::abs(std::log((static_cast<double>(width) / nx) /
                                         (static_cast<double>(height) / ny)));
    if (err < best_err - 1e-12) {
      best_err = err;
      best = {nx, ny};
    }
  }
  return best;
}

/// n distinct pixels of the rectangle (all of them when n exceeds its size),
/// as (col, row) in row-major order.
inline std::vector<std::pair<int, int>> sample_pixels(const CellRect& rect, int n, Rng& rng) {
  const long total = rect.pixels();
  std::set<long> picked;
  if (n >= total) {
    for (long i = 0; i < total; ++i) picked.insert(i);
  } else {
    // Floyd's algorithm.
    for (long j = total - n; j < total; ++j) {
      const long t = std::uniform_int_distribution<long>(0, j)(rng);
      if (!picked.insert(t).second) picked.insert(j);
    }
  }
  std::vector<std::pair<int, int>> out;
  out.reserve(picked.size());
  for (long i : picked)
    out.emplace_back(rect.c0 + static_cast<int>(i % rect.width()),
                     rect.r0 + static_cast<int>(i / rect.width()));
  return out;
}

struct HierarchicalResult {
  SampleAllocationTree tree;
  MisalignmentSamples samples;
};

/// Multilevel sampling. Level 0 splits the image (inset so every trial fibre
/// keeps enough length) into m0 cells with ceil(N0 / m0) random points each.
/// Each later level quarters every cell and gives the four children of cell i
/// ceil(gamma_i N_{j+1}) new points between them, where gamma comes from the
/// mean |phi| seen so far in each parent.
inline HierarchicalResult hierarchical_sample(const GrayImage& img, const TrialFibreConfig& fibre,
                                              const HierarchyConfig& hc, Rng& rng,
                                              int workers = 1) {
  fibre.validate();
  hc.validate();
  // A fibre centred m pixels inside the edges keeps at least 1/2 + m/H of its
  // length when one end leaves the image, and 2 sqrt(2) m / H when both ends do
  // (near a corner at 45 degrees).
  const double need = std::max((fibre.min_coverage - 0.5) * fibre.length_px,
                               fibre.min_coverage * fibre.length_px / (2.0 * std::numbers::sqrt2));
  const int margin = static_cast<int>(std::ceil(need)) + 1;
  HierarchicalResult res;
  auto& tree = res.tree;
  tree.root = {margin, margin, img.width() - margin, img.height() - margin};
  if (tree.root.width() < 1 || tree.root.height() < 1)
    throw ParameterError("image is too small for the trial fibre length");
  std::tie(tree.grid_cols, tree.grid_rows) =
      level0_grid(tree.root.width(), tree.root.height(), hc.m0);
  const int refine = 1 << (hc.levels - 1);
  if (tree.root.width() < tree.grid_cols * refine || tree.root.height() < tree.grid_rows * refine)
    throw ParameterError("level cells do not fit in the image");

  const std::uint64_t base_seed = rng();
  const double p1 = img.pitch_x1();
  const double p3 = img.pitch_x3();
  struct Hit {
    int col, row;
    double phi;
  };
  std::vector<Hit> hits;

  tree.levels.resize(static_cast<std::size_t>(hc.levels));
  {
    auto& l0 = tree.levels[0];
    l0.budget = hc.budgets[0];
    const int per_cell = (hc.budgets[0] + hc.m0 - 1) / hc.m0;
    for (int gy = 0; gy < tree.grid_rows; ++gy)
      for (int gx = 0; gx < tree.grid_cols; ++gx) {
        TreeCell cell;
        cell.rect = {tree.root.c0 + gx * tree.root.width() / tree.grid_cols,
                     tree.root.r0 + gy * tree.root.height() / tree.grid_rows,
                     tree.root.c0 + (gx + 1) * tree.root.width() / tree.grid_cols,
                     tree.root.r0 + (gy + 1) * tree.root.height() / tree.grid_rows};
        cell.allocated = per_cell;
        l0.cells.push_back(std::move(cell));
      }
  }

  for (int j = 0; j < hc.levels; ++j) {
    auto& level = tree.levels[static_cast<std::size_t>(j)];
    const std::size_t m = level.cells.size();

    std::vector<std::vector<Hit>> drawn(m);
    parallel_for(m, workers, [&](std::size_t i) {
      const auto& cell = level.cells[i];
      Rng cell_rng = make_stream(base_seed, stream::cell,
                                 (static_cast<std::uint64_t>(j) << 32) | i);
      for (auto [c, r] : sample_pixels(cell.rect, cell.allocated, cell_rng)) {
        const double t = estimate_angle(img, {static_cast<double>(c), static_cast<double>(r)}, fibre);
        drawn[i].push_back({c, r, physical_angle(t, p1, p3)});
      }
    });
    for (std::size_t i = 0; i < m; ++i)
      for (const auto& h : drawn[i]) {
        level.cells[i].samples.push_back(hits.size());
        hits.push_back(h);
      }

    std::vector<double> means(m);
    for (std::size_t i = 0; i < m; ++i) {
      auto& cell = level.cells[i];
      double sum = 0.0;
      long count = 0;
      for (const auto& h : hits)
        if (cell.rect.contains(h.col, h.row)) {
          sum += std::abs(h.phi);
          ++count;
        }
      if (count > 0)
        cell.mean_abs = sum / static_cast<double>(count);
      else
        cell.mean_abs = tree.levels[static_cast<std::size_t>(j - 1)]
                            .cells[static_cast<std::size_t>(cell.parent)]
                            .mean_abs;
      means[i] = cell.mean_abs;
    }
    const auto frac = allocation_fractions(means);
    level.uniform = frac.uniform;
    for (std::size_t i = 0; i < m; ++i) level.cells[i].gamma = frac.gamma[i];

    if (j + 1 == hc.levels) break;
    auto& next = tree.levels[static_cast<std::size_t>(j + 1)];
    next.budget = hc.budgets[static_cast<std::size_t>(j + 1)];
    const auto counts = allocate_counts(frac.gamma, next.budget);
    Rng split_rng = make_stream(base_seed, stream::cell, ~static_cast<std::uint64_t>(j));
    for (std::size_t i = 0; i < m; ++i) {
      const auto kids = child_rects(level.cells[i].rect);
      std::array<int, 4> share;
      share.fill(counts[i] / 4);
      std::array<int, 4> order{0, 1, 2, 3};
      std::shuffle(order.begin(), order.end(), split_rng);
      for (int r = 0; r < counts[i] % 4; ++r) ++share[static_cast<std::size_t>(order[r])];
      for (std::size_t q = 0; q < 4; ++q) {
        TreeCell child;
        child.rect = kids[q];
        child.parent = static_cast<int>(i);
        child.allocated = share[q];
        next.cells.push_back(std::move(child));
      }
    }
  }

  res.samples.points.reserve(hits.size());
  for (const auto& h : hits) res.samples.points.push_back({h.col * p1, h.row * p3, h.phi});
  return res;
}

inline nlohmann::json tree_to_json(const SampleAllocationTree& tree) {
  using nlohmann::json;
  auto rect = [](const CellRect& r) { return json::array({r.c0, r.r0, r.c1, r.r1}); };
  json out;
  out["root"] = rect(tree.root);
  out["grid"] = {tree.grid_cols, tree.grid_rows};
  out["levels"] = json::array();
  for (std::size_t j = 0; j < tree.levels.size(); ++j) {
    const auto& level = tree.levels[j];
    json cells = json::array();
    for (const auto& c : level.cells)
      cells.push_back({{"rect", rect(c.rect)},
                       {"parent", c.parent},
                       {"allocated", c.allocated},
                       {"samples", c.samples},
                       {"mean_abs_phi", c.mean_abs},
                       {"gamma", c.gamma}});
    out["levels"].push_back(
        {{"level", j}, {"budget", level.budget}, {"uniform", level.uniform}, {"cells", cells}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corner unwrapping. The curved image has its inner surface on the top row and
// the centre of curvature a distance R above it, over the middle column.
// The unwrapped image keeps the size and pitches: column k is arc length
// (k - centre) p1 along the focus radius, row r is depth r p3.

inline void check_focus(const klfield::GeometrySpec& geom, double focus_radius_mm) {
  if (!(focus_radius_mm >= geom.radius_mm && focus_radius_mm <= geom.radius_mm + geom.thickness_mm()))
    throw ParameterError("focus radius must lie within the laminate annulus");
}

inline GrayImage unwrap_corner(const GrayImage& img, const klfield::GeometrySpec& geom,
                               double focus_radius_mm) {
  if (geom.flat()) return img;
  check_focus(geom, focus_radius_mm);
  const double p1 = img.pitch_x1(), p3 = img.pitch_x3();
  const double uc = 0.5 * (img.width() - 1) * p1;
  GrayImage out(img.width(), img.height(), p1, p3);
  for (int r = 0; r < img.height(); ++r) {
    const double rho = geom.radius_mm + r * p3;
    for (int k = 0; k < img.width(); ++k) {
      const double theta = (k * p1 - uc) / focus_radius_mm;
      const double u = uc + rho * std::sin(theta);
      const double v = rho * std::cos(theta) - geom.radius_mm;
      out.at(k, r) = to_gray(img.bilinear_clamped(u / p1, v / p3));
    }
  }
  return out;
}

/// Inverse of unwrap_corner: bends a flat image onto the corner.
inline GrayImage wrap_corner(const GrayImage& flat, const klfield::GeometrySpec& geom,
                             double focus_radius_mm) {
  if (geom.flat()) return flat;
  check_focus(geom, focus_radius_mm);
  const double p1 = flat.pitch_x1(), p3 = flat.pitch_x3();
  const double uc = 0.5 * (flat.width() - 1) * p1;
  GrayImage out(flat.width(), flat.height(), p1, p3);
  for (int r = 0; r < flat.height(); ++r)
    for (int c = 0; c < flat.width(); ++c) {
      const double du = c * p1 - uc;
      const double dv = r * p3 + geom.radius_mm;
      const double rho = std::hypot(du, dv);
      const double theta = std::atan2(du, dv);
      const double k = (theta * focus_radius_mm + uc) / p1;
      const double row = (rho - geom.radius_mm) / p3;
      out.at(c, r) = to_gray(flat.bilinear_clamped(k, row));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic B-scans.

struct SynthConfig {
  double pitch_x1_mm = 0.05;
  double pitch_x3_mm = 0.025;
  double noise_sigma = 0.0;     // gray levels
  double blur_per_mm = 0.0;     // Gaussian sigma (pixels) per mm of |depth - focus|
  double focus_depth_mm = 4.8;
  double gray_dark = 40.0;
  double gray_bright = 210.0;
  int truth_stride_px = 8;

  void validate() const {
    if (!(pitch_x1_mm > 0.0) || !(pitch_x3_mm > 0.0))
      throw ParameterError("pixel pitch must be positive");
    if (!(noise_sigma >= 0.0) || !(blur_per_mm >= 0.0))
      throw ParameterError("noise and blur must be non-negative");
    if (!(gray_dark >= 0.0 && gray_bright <= 255.0 && gray_dark < gray_bright))
      throw ParameterError("gray levels must satisfy 0 <= dark < bright <= 255");
    if (truth_stride_px < 1) throw ParameterError("truth stride must be positive");
  }
};

/// Undeformed depth z whose ply line passes through (x1, x3), i.e. the root of
/// z + A(x1) g3(z) = x3 with A = g1 S.
inline double material_depth(const klfield::WrinkleField& field, double x1, double x3) {
  const double a = field.along_amplitude(x1);
  const auto& g3 = field.decay().through;
  double lo = x3 - std::abs(a) - 1.0;
  double hi = x3 + std::abs(a) + 1.0;
  double z = x3 - a * g3.value(x3);
  for (int it = 0; it < 100; ++it) {
    const double f = z + a * g3.value(z) - x3;
    if (std::abs(f) < 1e-13 * (1.0 + std::abs(x3))) return z;
    if (f > 0.0)
      hi = z;
    else
      lo = z;
    const double d = 1.0 + a * g3.derivative(z);
    double next = d > 0.0 ? z - f / d : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    z = next;
  }
  return z;
}

/// Physical ply angle at (x1, x3) of the deformed laminate.
inline double ply_angle(const klfield::WrinkleField& field, double x1, double x3) {
  const double z = material_depth(field, x1, x3);
  return std::atan(field.decay().through.value(z) * field.along_slope_factor(x1));
}

/// Gray value of the undeformed stack at depth z: bright resin lines between
/// darker plies, one period per ply plus interply.
inline double stack_gray(double z, double period, const SynthConfig& cfg) {
  const double p = 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * z / period));
  return cfg.gray_dark + (cfg.gray_bright - cfg.gray_dark) * p * p;
}

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  const int half = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> w(static_cast<std::size_t>(2 * half + 1));
  double s = 0.0;
  for (int k = -half; k <= half; ++k) {
    w[static_cast<std::size_t>(k + half)] = std::exp(-0.5 * k * k / (sigma * sigma));
    s += w[static_cast<std::size_t>(k + half)];
  }
  for (double& v : w) v /= s;
  return w;
}

/// Separable Gaussian blur whose sigma depends on the row.
inline void depth_blur(std::vector<double>& f, int w, int h, const std::vector<double>& sigma) {
  std::vector<double> tmp(f.size());
  auto at = [w](std::vector<double>& v, int c, int r) -> double& {
    return v[static_cast<std::size_t>(r) * static_cast<std::size_t>(w) + static_cast<std::size_t>(c)];
  };
  for (int r = 0; r < h; ++r) {
    const double s = sigma[static_cast<std::size_t>(r)];
    if (s < 0.05) {
      for (int c = 0; c < w; ++c) at(tmp, c, r) = at(f, c, r);
      continue;
    }
    const auto k = gaussian_kernel(s);
    const int half = static_cast<int>(k.size() / 2);
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int d = -half; d <= half; ++d)
        acc += k[static_cast<std::size_t>(d + half)] * at(f, std::clamp(c + d, 0, w - 1), r);
      at(tmp, c, r) = acc;
    }
  }
  for (int r = 0; r < h; ++r) {
    const double s = sigma[static_cast<std::size_t>(r)];
    if (s < 0.05) {
      for (int c = 0; c < w; ++c) at(f, c, r) = at(tmp, c, r);
      continue;
    }
    const auto k = gaussian_kernel(s);
    const int half = static_cast<int>(k.size() / 2);
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int d = -half; d <= half; ++d)
        acc += k[static_cast<std::size_t>(d + half)] * at(tmp, c, std::clamp(r + d, 0, h - 1));
      at(f, c, r) = acc;
    }
  }
}

}  // namespace detail

struct SynthScan {
  GrayImage image;
  MisalignmentSamples truth;
};

/// Renders the ply stack displaced by the wrinkle on the domain
/// [0, L] x [0, depth], pixel (c, r) sitting at (c p1, r p3).
inline SynthScan synth_bscan(const klfield::WrinkleParams& xi, const klfield::KLBasis& basis,
                             const klfield::DecaySpec& decay, const klfield::GeometrySpec& geom,
                             const SynthConfig& cfg, Rng& rng) {
  cfg.validate();
  if (!klfield::jacobian_positive(xi, basis, decay, klfield::SectionGrid::for_part(geom)))
    throw ParameterError("wrinkle is not admissible (det J <= 0)");
  const klfield::WrinkleField field(xi, basis, decay);
  const double len = decay.length_mm;
  const double depth = decay.depth_mm;
  const int w = static_cast<int>(std::floor(len / cfg.pitch_x1_mm + 1e-9)) + 1;
  const int h = static_cast<int>(std::floor(depth / cfg.pitch_x3_mm + 1e-9)) + 1;
  const double period = geom.ply_period_mm();

  std::vector<double> f(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  for (int c = 0; c < w; ++c) {
    const double x1 = c * cfg.pitch_x1_mm;
    for (int r = 0; r < h; ++r)
      f[static_cast<std::size_t>(r) * static_cast<std::size_t>(w) + static_cast<std::size_t>(c)] =
          stack_gray(material_depth(field, x1, r * cfg.pitch_x3_mm), period, cfg);
  }
  if (cfg.blur_per_mm > 0.0) {
    std::vector<double> sigma(static_cast<std::size_t>(h));
    for (int r = 0; r < h; ++r)
      sigma[static_cast<std::size_t>(r)] =
          cfg.blur_per_mm * std::abs(r * cfg.pitch_x3_mm - cfg.focus_depth_mm);
    detail::depth_blur(f, w, h, sigma);
  }
  SynthScan out{GrayImage(w, h, cfg.pitch_x1_mm, cfg.pitch_x3_mm), {}};
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double g = cfg.noise_sigma > 0.0 ? f[i] + cfg.noise_sigma * noise(rng) : f[i];
    out.image.pixels()[i] = to_gray(g);
  }
  for (int r = 0; r < h; r += cfg.truth_stride_px)
    for (int c = 0; c < w; c += cfg.truth_stride_px) {
      const double x1 = c * cfg.pitch_x1_mm, x3 = r * cfg.pitch_x3_mm;
      out.truth.points.push_back({x1, x3, ply_angle(field, x1, x3)});
    }
  return out;
}

}  // namespace defect_chain::mfia

#endif  // DEFECT_CHAIN_MFIA_HPP

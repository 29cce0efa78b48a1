#ifndef DEFECT_CHAIN_CONFIG_HPP
#define DEFECT_CHAIN_CONFIG_HPP

// Pipeline configuration: an INI file whose keys carry their units.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "defect_chain/bayes.hpp"
#include "defect_chain/error.hpp"
#include "defect_chain/external_model.hpp"
#include "defect_chain/klfield.hpp"
#include "defect_chain/mfia.hpp"
#include "defect_chain/parallel.hpp"
#include "defect_chain/propagate.hpp"

namespace defect_chain {

/// How the synthetic case-study wrinkles are drawn. Every scan shares one
/// base wrinkle; scan k scales it by 1 + spread (2k/(count-1) - 1) and adds
/// i.i.d. N(0, perturbation^2) to each amplitude.
struct GeneratorConfig {
  int count = 4;
  double base_scale = 30.0;
  double spread = 0.5;
  double perturbation = 0.1;

  void validate() const {
    if (count < 0) throw ParameterError("synth count must be >= 0");
    if (!(base_scale >= 0.0) || !(perturbation >= 0.0) || !(spread >= 0.0 && spread < 1.0))
      throw ParameterError("generator scales must be >= 0 and spread in [0, 1)");
  }
};

struct ModelConfig {
  std::string kind = "surrogate";  // surrogate | external
  propagate::SurrogateModel surrogate;
  propagate::ExternalModelConfig external;
};

struct PipelineConfig {
  std::string source_path;
  klfield::GeometrySpec geometry;
  klfield::CovarianceSpec covariance;
  int n_modes = 30;
  double decay_center_x3_mm = 4.8;
  int decay_exponent = 4;
  double decay_floor = 1e-6;
  double lambda_quantum_mm = 0.05;
  int grid_along = 512;
  int grid_per_ply = 4;

  GeneratorConfig generator;
  mfia::SynthConfig synth;
  mfia::TrialFibreConfig fibre;
  double fibre_length_plies = 3.0;
  mfia::HierarchyConfig hierarchy;
  bool images_curved = false;

  bayes::FitOptions fit;
  double prior_confidence = 0.95;
  bayes::NoiseModel noise;
  double noise_confidence = 0.95;
  bayes::ChainConfig chain;
  double rhat_threshold = 1.1;

  ModelConfig model;
  int compare_samples = 200;

  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir = "run";
  int workers = 0;  // 0: DEFECT_CHAIN_WORKERS or hardware concurrency

  klfield::DecaySpec decay() const {
    return klfield::DecaySpec::for_corner(geometry, decay_center_x3_mm, decay_exponent, decay_floor);
  }
  klfield::SectionGrid grid() const {
    return klfield::SectionGrid::for_part(geometry, grid_along, grid_per_ply);
  }

  void validate() const {
    geometry.validate();
    if (geometry.flat()) throw ParameterError("the pipeline needs a finite corner radius");
    covariance.validate(n_modes);
    if (!(decay_center_x3_mm > 0.0 && decay_center_x3_mm < geometry.thickness_mm()))
      throw ParameterError("decay centre must lie inside the laminate");
    decay();
    if (!(lambda_quantum_mm > 0.0)) throw ParameterError("lambda quantum must be positive");
    if (grid_along < 2 || grid_per_ply < 1) throw ParameterError("section grid is too coarse");
    generator.validate();
    synth.validate();
    fibre.validate();
    hierarchy.validate();
    if (!(prior_confidence > 0.0 && prior_confidence < 1.0) ||
        !(noise_confidence > 0.0 && noise_confidence < 1.0))
      throw ParameterError("confidence levels must lie in (0, 1)");
    noise.validate();
    chain.validate();
    if (!(rhat_threshold > 1.0)) throw ParameterError("convergence threshold must exceed 1");
    if (model.kind == "surrogate") {
      model.surrogate.validate();
    } else if (model.kind == "external") {
      auto ext = model.external;  // the work directory is set per run
      if (ext.work_dir.empty()) ext.work_dir = out_dir;
      ext.validate();
      std::istringstream cmd(model.external.command);
      std::string exe;
      cmd >> exe;
      if (exe.find('/') != std::string::npos && !std::filesystem::exists(exe))
        throw ParameterError("external model program not found: " + exe);
    } else {
      throw ParameterError("model kind must be surrogate or external, got " + model.kind);
    }
    if (compare_samples < 10) throw ParameterError("compare needs at least 10 prior samples");
    if (!seed_set) throw ParameterError("a seed is required ([run] seed or --seed)");
    if (workers < 1) throw ParameterError("workers must be >= 1");
  }
};

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ParameterError("bad integer list entry '" + item + "'");
    }
  }
  return out;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ParameterError("bad boolean '" + s + "'");
}

}  // namespace detail

/// Reads an INI config. Unknown keys are an error, so a typo cannot silently
/// fall back to a default. Relative paths resolve against the file's directory.
inline PipelineConfig load_config(const std::string& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(path, tree);
  } catch (const pt::ini_parser_error& e) {
    throw IoError("cannot read config: " + std::string(e.what()));
  }
  PipelineConfig c;
  c.source_path = path;
  const auto base = std::filesystem::absolute(path).parent_path();

  for (const auto& [section, keys] : tree) {
    for (const auto& [key, node] : keys) {
      const std::string v = node.data();
      auto num = [&] {
        try {
          std::size_t used = 0;
          const double x = std::stod(v, &used);
          if (v.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(v);
          return x;
        } catch (const std::exception&) {
          throw ParameterError("[" + section + "] " + key + ": expected a number, got '" + v + "'");
        }
      };
      auto integer = [&] {
        const double x = num();
        if (x != std::floor(x)) throw ParameterError("[" + section + "] " + key + ": expected an integer");
        return static_cast<int>(x);
      };
      const std::string k = section + "." + key;
      if (k == "geometry.radius_mm") c.geometry.radius_mm = num();
      else if (k == "geometry.ply_count") c.geometry.ply_count = integer();
      else if (k == "geometry.ply_thickness_mm") c.geometry.ply_thickness_mm = num();
      else if (k == "geometry.interply_thickness_mm") c.geometry.interply_thickness_mm = num();
      else if (k == "geometry.width_mm") c.geometry.width_mm = num();
      else if (k == "geometry.limb_length_mm") c.geometry.limb_length_mm = num();
      else if (k == "covariance.sigma_f") c.covariance.sigma_f = num();
      else if (k == "covariance.lambda_mm") c.covariance.lambda_mm = num();
      else if (k == "covariance.grid_points") c.covariance.grid_n = integer();
      else if (k == "covariance.modes") c.n_modes = integer();
      else if (k == "covariance.lambda_quantum_mm") c.lambda_quantum_mm = num();
      else if (k == "decay.center_x3_mm") c.decay_center_x3_mm = num();
      else if (k == "decay.exponent") c.decay_exponent = integer();
      else if (k == "decay.floor") c.decay_floor = num();
      else if (k == "decay.grid_along") c.grid_along = integer();
      else if (k == "decay.grid_per_ply") c.grid_per_ply = integer();
      else if (k == "synth.count") c.generator.count = integer();
      else if (k == "synth.base_scale") c.generator.base_scale = num();
      else if (k == "synth.spread") c.generator.spread = num();
      else if (k == "synth.perturbation") c.generator.perturbation = num();
      else if (k == "synth.pitch_x1_mm") c.synth.pitch_x1_mm = num();
      else if (k == "synth.pitch_x3_mm") c.synth.pitch_x3_mm = num();
      else if (k == "synth.noise_gray") c.synth.noise_sigma = num();
      else if (k == "synth.blur_px_per_mm") c.synth.blur_per_mm = num();
      else if (k == "synth.focus_depth_mm") c.synth.focus_depth_mm = num();
      else if (k == "mfia.fibre_length_plies") c.fibre_length_plies = num();
      else if (k == "mfia.step_px") c.fibre.step_px = num();
      else if (k == "mfia.theta_max_deg") {
        c.fibre.theta_max = num() * std::numbers::pi / 180.0;
        c.fibre.theta_min = -c.fibre.theta_max;
      }
      else if (k == "mfia.min_coverage") c.fibre.min_coverage = num();
      else if (k == "mfia.cells_level0") c.hierarchy.m0 = integer();
      else if (k == "mfia.budgets") {
        c.hierarchy.budgets = detail::parse_int_list(v);
        c.hierarchy.levels = static_cast<int>(c.hierarchy.budgets.size());
      }
      else if (k == "mfia.curved_images") c.images_curved = detail::parse_bool(v);
      else if (k == "fit.rcond") c.fit.rcond = num();
      else if (k == "fit.lambda_start_mm") c.fit.lambda_start = num();
      else if (k == "fit.lambda_min_mm") c.fit.lambda_min = num();
      else if (k == "fit.lambda_max_mm") c.fit.lambda_max = num();
      else if (k == "fit.criterion") {
        if (v == "gcv") c.fit.criterion = bayes::LambdaCriterion::gcv;
        else if (v == "rss") c.fit.criterion = bayes::LambdaCriterion::rss;
        else throw ParameterError("fit.criterion must be gcv or rss");
      }
      else if (k == "prior.confidence") c.prior_confidence = num();
      else if (k == "noise.accuracy_rad2") c.noise.accuracy = num();
      else if (k == "noise.confidence") c.noise_confidence = num();
      else if (k == "noise.misfit") {
        if (v == "squared") c.noise.norm = bayes::MisfitNorm::squared;
        else if (v == "as_written") c.noise.norm = bayes::MisfitNorm::as_written;
        else throw ParameterError("noise.misfit must be squared or as_written");
      }
      else if (k == "chain.chains") c.chain.chains = integer();
      else if (k == "chain.samples") c.chain.n_samples = integer();
      else if (k == "chain.beta") c.chain.beta = num();
      else if (k == "chain.sigma_pcn") c.chain.sigma_pcn = num();
      else if (k == "chain.burn_in") c.chain.burn_in = integer();
      else if (k == "chain.thinning") c.chain.thinning = integer();
      else if (k == "chain.tune") c.chain.tune = detail::parse_bool(v);
      else if (k == "chain.target_acceptance") c.chain.target_acceptance = num();
      else if (k == "chain.pilot_steps") c.chain.pilot_steps = integer();
      else if (k == "chain.rhat_threshold") c.rhat_threshold = num();
      else if (k == "model.kind") c.model.kind = v;
      else if (k == "model.m_star_knmm_per_mm") c.model.surrogate.m_star = num();
      else if (k == "model.q") c.model.surrogate.q = num();
      else if (k == "model.lambda_q") c.model.surrogate.lambda_q = num();
      else if (k == "model.q_lower") c.model.surrogate.q_lower = num();
      else if (k == "model.lambda_q_lower") c.model.surrogate.lambda_lower = num();
      else if (k == "model.command") c.model.external.command = v;
      else if (k == "model.timeout_s") c.model.external.timeout_s = num();
      else if (k == "model.retries") c.model.external.retries = integer();
      else if (k == "compare.prior_samples") c.compare_samples = integer();
      else if (k == "run.seed") {
        const double s = num();
        if (s < 0 || s != std::floor(s)) throw ParameterError("seed must be a non-negative integer");
        c.seed = static_cast<std::uint64_t>(s);
        c.seed_set = true;
      }
      else if (k == "run.out_dir") c.out_dir = v;
      else if (k == "run.workers") c.workers = integer();
      else throw ParameterError("unknown config key [" + section + "] " + key);
    }
  }
  c.covariance.length_mm = c.geometry.corner_arc_length_mm();
  c.fibre.length_px = c.fibre_length_plies * c.geometry.ply_thickness_mm / c.synth.pitch_x3_mm;
  if (!c.model.external.command.empty()) {
    std::istringstream cmd(c.model.external.command);
    std::string exe, rest;
    cmd >> exe;
    std::getline(cmd, rest);
    if (exe.find('/') != std::string::npos && std::filesystem::path(exe).is_relative())
      c.model.external.command = (base / exe).lexically_normal().string() + rest;
  }
  if (const char* w = std::getenv("DEFECT_CHAIN_WORKERS")) {
    try {
      c.workers = std::stoi(w);
    } catch (const std::exception&) {
      throw ParameterError("DEFECT_CHAIN_WORKERS must be an integer");
    }
  } else if (c.workers == 0) {
    c.workers = worker_count();
  }
  return c;
}

}  // namespace defect_chain

#endif  // DEFECT_CHAIN_CONFIG_HPP

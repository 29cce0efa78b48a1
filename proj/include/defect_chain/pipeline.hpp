#ifndef DEFECT_CHAIN_PIPELINE_HPP
#define DEFECT_CHAIN_PIPELINE_HPP

// The five pipeline stages. Each reads only files written by earlier stages
// under the run directory, writes its own subdirectory and a manifest, and
// returns an exit code.
//
//   <out>/synth/     scan_<k>.pgm, scan_<k>.json, truth_<k>.csv, wrinkle_<k>.csv
//   <out>/extract/   obs_<k>.csv, tree_<k>.json
//   <out>/infer/     map_fits.csv, fits.json, prior.json, chain_<k>.csv, samples.csv, diagnostics.json
//   <out>/propagate/ strengths.csv, cdf.csv, report.json
//   <out>/compare/   prior_samples.csv, prior_strengths.csv, report.json

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "defect_chain/bayes.hpp"
#include "defect_chain/config.hpp"
#include "defect_chain/error.hpp"
#include "defect_chain/external_model.hpp"
#include "defect_chain/image.hpp"
#include "defect_chain/klfield.hpp"
#include "defect_chain/mfia.hpp"
#include "defect_chain/propagate.hpp"
#include "defect_chain/rng.hpp"

namespace defect_chain::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* software_version = "0.1.0";

// ---------------------------------------------------------------------------
// Files and manifests.

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw IoError("SHA-256 unavailable");
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

inline void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

/// Records a stage: config snapshot, input and output checksums, timings.
/// Checksummed artifacts are deterministic; the manifest itself is not,
/// because it carries wall-clock timings.
class Manifest {
 public:
  Manifest(std::string stage, const PipelineConfig& cfg, fs::path root)
      : stage_(std::move(stage)), root_(std::move(root)), start_(std::chrono::steady_clock::now()) {
    j_["stage"] = stage_;
    j_["software_version"] = software_version;
    j_["seed"] = cfg.seed;
    j_["workers"] = cfg.workers;
    std::ifstream in(cfg.source_path);
    std::stringstream ss;
    ss << in.rdbuf();
    j_["config"] = {{"path", cfg.source_path}, {"text", ss.str()}};
    j_["inputs"] = json::object();
    j_["artifacts"] = json::object();
    j_["timings_s"] = json::object();
  }

  void input(const fs::path& p) { j_["inputs"][rel(p)] = sha256_file(p); }
  void artifact(const fs::path& p) { j_["artifacts"][rel(p)] = sha256_file(p); }
  void time(const std::string& step, double seconds) { j_["timings_s"][step] = seconds; }
  void note(const std::string& key, json value) { j_[key] = std::move(value); }

  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

  void write(ExitCode code) {
    j_["timings_s"]["total"] = elapsed();
    j_["exit_code"] = static_cast<int>(code);
    write_json(j_, root_ / ("manifest_" + stage_ + ".json"));
  }

 private:
  std::string rel(const fs::path& p) const {
    const auto r = fs::relative(p, root_);
    return r.empty() || r.string().rfind("..", 0) == 0 ? p.string() : r.generic_string();
  }

  std::string stage_;
  fs::path root_;
  std::chrono::steady_clock::time_point start_;
  json j_;
};

/// Files named <prefix><k><ext> in `dir`, sorted by k.
inline std::vector<fs::path> indexed_files(const fs::path& dir, const std::string& prefix,
                                           const std::vector<std::string>& exts) {
  std::vector<std::pair<long, fs::path>> found;
  if (!fs::exists(dir)) return {};
  const std::regex re(prefix + "([0-9]+)");
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension().string();
    if (std::find(exts.begin(), exts.end(), ext) == exts.end()) continue;
    std::smatch m;
    const auto stem = e.path().stem().string();
    if (std::regex_match(stem, m, re)) found.emplace_back(std::stol(m[1]), e.path());
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& f : found) out.push_back(f.second);
  return out;
}

inline json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Eigen::VectorXd json_vec(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline json prior_json(const bayes::PriorModel& p, double confidence) {
  return {{"mean", vec_json(p.mean)}, {"variance", vec_json(p.variance)}, {"inflation", p.inflation},
          {"n_fits", p.n_fits}, {"confidence", confidence},
          {"layout", "a_1..a_N, lambda_mm; variance already includes the inflation factor"}};
}

inline bayes::PriorModel read_prior(const fs::path& path) {
  const auto j = read_json(path);
  bayes::PriorModel p;
  try {
    p.mean = json_vec(j.at("mean"));
    p.variance = json_vec(j.at("variance"));
    p.inflation = j.at("inflation").get<double>();
    p.n_fits = j.at("n_fits").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError("bad prior file " + path.string() + ": " + e.what());
  }
  p.validate();
  return p;
}

/// Shared model objects built from a config.
struct Context {
  PipelineConfig cfg;
  fs::path root;
  klfield::DecaySpec decay;
  klfield::SectionGrid grid;
  std::shared_ptr<klfield::BasisCache> cache;

  explicit Context(PipelineConfig c)
      : cfg(std::move(c)), root(cfg.out_dir), decay(cfg.decay()), grid(cfg.grid()),
        cache(std::make_shared<klfield::BasisCache>(cfg.covariance, cfg.n_modes, cfg.lambda_quantum_mm)) {
    fs::create_directories(root);
  }

  fs::path dir(const std::string& stage) const {
    const auto d = root / stage;
    fs::create_directories(d);
    return d;
  }

  bool admissible(const klfield::WrinkleParams& xi) const {
    if (!xi.finite() || !(xi.length_scale > 0.0)) return false;
    try {
      return klfield::jacobian_positive(xi, *cache->get(xi.length_scale), decay, grid);
    } catch (const ParameterError&) {
      return false;
    }
  }
};

// ---------------------------------------------------------------------------
// synth

/// Ground-truth wrinkles for the synthetic case study (see GeneratorConfig).
inline std::vector<klfield::WrinkleParams> generate_wrinkles(const Context& ctx) {
  const auto& g = ctx.cfg.generator;
  const int n = ctx.cfg.n_modes;
  const double lambda = ctx.cfg.covariance.lambda_mm;
  constexpr int max_draws = 1000;
  std::normal_distribution<double> nd;
  auto factor = [&](int k) {
    return g.count < 2 ? 1.0 : 1.0 + g.spread * (2.0 * k / (g.count - 1) - 1.0);
  };

  Rng base_rng = make_stream(ctx.cfg.seed, stream::synth, 0);
  klfield::WrinkleParams base{Eigen::VectorXd(n), lambda};
  int draws = 0;
  for (;; ++draws) {
    if (draws == max_draws) throw NumericalError("no admissible base wrinkle; lower synth.base_scale");
    for (int i = 0; i < n; ++i) base.amplitudes[i] = g.base_scale * nd(base_rng);
    // det J is affine in the amplitudes, so the largest factor is the binding one
    klfield::WrinkleParams top = base;
    top.amplitudes *= factor(g.count - 1);
    if (ctx.admissible(top)) break;
  }

  std::vector<klfield::WrinkleParams> out;
  for (int k = 0; k < g.count; ++k) {
    Rng rng = make_stream(ctx.cfg.seed, stream::synth, static_cast<std::uint64_t>(k) + 1);
    klfield::WrinkleParams xi{Eigen::VectorXd(n), lambda};
    for (draws = 0;; ++draws) {
      if (draws == max_draws) throw NumericalError("no admissible perturbed wrinkle; lower synth.perturbation");
      for (int i = 0; i < n; ++i) xi.amplitudes[i] = factor(k) * base.amplitudes[i] + g.perturbation * nd(rng);
      if (ctx.admissible(xi)) break;
    }
    out.push_back(xi);
  }
  return out;
}

inline ExitCode cmd_synth(const Context& ctx) {
  Manifest man("synth", ctx.cfg, ctx.root);
  const auto dir = ctx.dir("synth");
  const auto truths = generate_wrinkles(ctx);
  const auto basis = ctx.cache->get(ctx.cfg.covariance.lambda_mm);
  std::vector<mfia::SynthScan> scans(truths.size());
  parallel_for(truths.size(), ctx.cfg.workers, [&](std::size_t k) {
    Rng rng = make_stream(ctx.cfg.seed, stream::synth, 1000 + k);
    scans[k] = mfia::synth_bscan(truths[k], *basis, ctx.decay, ctx.cfg.geometry, ctx.cfg.synth, rng);
  });
  for (std::size_t k = 0; k < truths.size(); ++k) {
    const auto stem = dir / ("scan_" + std::to_string(k));
    write_pgm(scans[k].image, stem.string() + ".pgm");
    write_json({{"pitch_x1_mm", ctx.cfg.synth.pitch_x1_mm}, {"pitch_x3_mm", ctx.cfg.synth.pitch_x3_mm},
                {"curved", false}, {"noise_gray", ctx.cfg.synth.noise_sigma}},
               stem.string() + ".json");
    const auto truth = dir / ("truth_" + std::to_string(k) + ".csv");
    mfia::write_samples_csv(scans[k].truth, truth.string());
    const auto wrinkle = dir / ("wrinkle_" + std::to_string(k) + ".csv");
    bayes::write_parameter_csv({truths[k].to_vector()}, wrinkle.string());
    for (const auto& p : {fs::path(stem.string() + ".pgm"), fs::path(stem.string() + ".json"), truth, wrinkle})
      man.artifact(p);
  }
  man.note("count", truths.size());
  man.write(ExitCode::success);
  return ExitCode::success;
}

// ---------------------------------------------------------------------------
// extract

struct ImageMeta {
  double pitch_x1_mm;
  double pitch_x3_mm;
  bool curved;
};

inline ImageMeta image_meta(const PipelineConfig& cfg, const fs::path& image) {
  ImageMeta m{cfg.synth.pitch_x1_mm, cfg.synth.pitch_x3_mm, cfg.images_curved};
  auto side = image;
  side.replace_extension(".json");
  if (fs::exists(side)) {
    const auto j = read_json(side);
    m.pitch_x1_mm = j.value("pitch_x1_mm", m.pitch_x1_mm);
    m.pitch_x3_mm = j.value("pitch_x3_mm", m.pitch_x3_mm);
    m.curved = j.value("curved", m.curved);
  }
  if (!(m.pitch_x1_mm > 0.0 && m.pitch_x3_mm > 0.0)) throw DataError("bad pixel pitch for " + image.string());
  return m;
}

/// Extracts every image; with no explicit list, every scan_<k> from synth.
/// Failed images are reported and make the stage fail after the rest are done.
inline ExitCode cmd_extract(const Context& ctx, std::vector<fs::path> images = {}) {
  Manifest man("extract", ctx.cfg, ctx.root);
  const auto dir = ctx.dir("extract");
  if (images.empty()) images = indexed_files(ctx.root / "synth", "scan_", {".pgm", ".png"});
  if (images.empty()) throw DataError("no images to extract (run synth or pass --images)");
  json failures = json::object();
  for (std::size_t k = 0; k < images.size(); ++k) {
    try {
      const auto meta = image_meta(ctx.cfg, images[k]);
      man.input(images[k]);
      auto img = read_image(images[k].string(), meta.pitch_x1_mm, meta.pitch_x3_mm);
      if (meta.curved)
        img = mfia::unwrap_corner(img, ctx.cfg.geometry, ctx.cfg.geometry.radius_mm + ctx.cfg.synth.focus_depth_mm);
      auto fibre = ctx.cfg.fibre;
      fibre.length_px = ctx.cfg.fibre_length_plies * ctx.cfg.geometry.ply_thickness_mm / meta.pitch_x3_mm;
      Rng rng = make_stream(ctx.cfg.seed, stream::extract, k);
      auto res = mfia::hierarchical_sample(img, fibre, ctx.cfg.hierarchy, rng, ctx.cfg.workers);
      const auto obs = dir / ("obs_" + std::to_string(k) + ".csv");
      const auto tree = dir / ("tree_" + std::to_string(k) + ".json");
      mfia::write_samples_csv(res.samples, obs.string());
      write_json(mfia::tree_to_json(res.tree), tree);
      man.artifact(obs);
      man.artifact(tree);
    } catch (const Error& e) {
      failures[images[k].string()] = e.what();
    }
  }
  man.note("failures", failures);
  const auto code = failures.empty() ? ExitCode::success : ExitCode::validation;
  man.write(code);
  if (!failures.empty())
    throw DataError(std::to_string(failures.size()) + " image(s) could not be extracted: " + failures.dump());
  return code;
}

// ---------------------------------------------------------------------------
// infer

inline json convergence_json(const diagnostics::ConvergenceReport& r) {
  return {{"rhat", vec_json(r.rhat)}, {"split_rhat", vec_json(r.split_rhat)},
          {"mean_discrepancy", vec_json(r.mean_discrepancy)}, {"max_rhat", r.max_rhat},
          {"max_split_rhat", r.max_split_rhat}, {"threshold", r.threshold}, {"converged", r.converged}};
}

inline ExitCode cmd_infer(const Context& ctx, std::optional<fs::path> prior_file = std::nullopt) {
  Manifest man("infer", ctx.cfg, ctx.root);
  const auto dir = ctx.dir("infer");
  const auto obs_files = indexed_files(ctx.root / "extract", "obs_", {".csv"});
  if (obs_files.empty()) throw DataError("no observations under " + (ctx.root / "extract").string());
  bayes::ObservationSet data;
  for (const auto& f : obs_files) {
    man.input(f);
    data.observations.push_back(mfia::read_samples_csv(f.string(), f.filename().string()));
  }
  data.validate();

  // MAP fits, one per observation
  auto t0 = man.elapsed();
  std::vector<std::optional<bayes::FitResult>> fits(data.size());
  std::vector<std::string> fit_errors(data.size());
  parallel_for(data.size(), ctx.cfg.workers, [&](std::size_t k) {
    try {
      fits[k] = bayes::fit_map_observation(data.observations[k], ctx.cfg.covariance, ctx.cfg.n_modes,
                                           ctx.decay, ctx.grid, ctx.cfg.fit);
    } catch (const Error& e) {
      fit_errors[k] = e.what();
    }
  });
  man.time("map_fits", man.elapsed() - t0);
  json fits_j = json::array();
  std::vector<klfield::WrinkleParams> fit_params;
  std::vector<Eigen::VectorXd> fit_vecs;
  for (std::size_t k = 0; k < data.size(); ++k) {
    if (!fits[k]) {
      fits_j.push_back({{"observation", obs_files[k].filename().string()}, {"error", fit_errors[k]}});
      continue;
    }
    const auto& f = *fits[k];
    fits_j.push_back({{"observation", obs_files[k].filename().string()}, {"lambda_mm", f.xi.length_scale},
                      {"rms_rad", f.rms}, {"rank", f.rank}, {"criterion", f.criterion},
                      {"iterations", f.iterations}, {"amplitudes", vec_json(f.xi.amplitudes)}});
    fit_params.push_back(f.xi);
    fit_vecs.push_back(f.xi.to_vector());
  }
  write_json(fits_j, dir / "fits.json");
  man.artifact(dir / "fits.json");
  for (std::size_t k = 0; k < data.size(); ++k)
    if (!fits[k]) {
      man.write(ExitCode::numerical);
      throw FitError("MAP fit failed for " + obs_files[k].string() + ": " + fit_errors[k]);
    }
  bayes::write_parameter_csv(fit_vecs, (dir / "map_fits.csv").string());
  man.artifact(dir / "map_fits.csv");

  // prior: from the fits, or a prior file from an earlier run
  bayes::PriorModel prior;
  if (prior_file) {
    man.input(*prior_file);
    prior = read_prior(*prior_file);
    if (prior.dim() != fit_vecs.front().size()) throw DataError("prior file has the wrong dimension");
  } else {
    if (fit_params.size() < 2)
      throw ParameterError("the prior needs at least two observations; pass --prior with a prior.json "
                           "from an earlier run to infer from a single scan");
    prior = bayes::build_prior(fit_params, ctx.cfg.prior_confidence);
  }
  write_json(prior_json(prior, ctx.cfg.prior_confidence), dir / "prior.json");
  man.artifact(dir / "prior.json");

  auto noise = bayes::NoiseModel::for_sample_count(data.min_points(), ctx.cfg.noise.accuracy,
                                                   ctx.cfg.noise_confidence, ctx.cfg.noise.norm);
  bayes::MinMisfitLikelihood lik(data, noise, ctx.cache, ctx.decay, ctx.grid);
  auto chain_cfg = ctx.cfg.chain;
  chain_cfg.seed = ctx.cfg.seed;

  t0 = man.elapsed();
  const auto res = bayes::sample_posterior(chain_cfg, prior, lik, ctx.cfg.workers);
  man.time("sampling", man.elapsed() - t0);

  json chains_j = json::array();
  for (std::size_t k = 0; k < res.chains.size(); ++k) {
    const auto& c = res.chains[k];
    const auto path = dir / ("chain_" + std::to_string(k) + ".csv");
    bayes::write_chain_csv(c, path.string());
    man.artifact(path);
    json iact = c.iact.size() ? vec_json(c.iact) : json::array();
    chains_j.push_back({{"steps", c.states.size()}, {"acceptance", c.acceptance_ratio()},
                        {"thinned", c.thinned.size()}, {"iact", iact}});
  }
  std::size_t inadmissible = 0;
  for (const auto& s : res.samples)
    if (!ctx.admissible(klfield::WrinkleParams::from_vector(s))) ++inadmissible;
  bayes::write_parameter_csv(res.samples, (dir / "samples.csv").string());
  man.artifact(dir / "samples.csv");

  auto conv = res.convergence;
  if (res.chains.size() >= 2) {
    // recompute with the configured threshold
    conv.threshold = ctx.cfg.rhat_threshold;
    conv.converged = conv.max_rhat < conv.threshold && conv.max_split_rhat < conv.threshold;
  }
  json diag = {
      {"noise", {{"variance_rad2", noise.variance()}, {"tau", noise.tau}, {"accuracy_rad2", noise.accuracy},
                 {"misfit", noise.norm == bayes::MisfitNorm::squared ? "squared" : "as_written"},
                 {"points_min", data.min_points()}}},
      {"tuning", {{"enabled", chain_cfg.tune}, {"beta", res.beta}, {"acceptance", res.tuning.acceptance},
                  {"trace", res.tuning.trace}, {"pinned", res.tuning.pinned}, {"warning", res.tuning.warning}}},
      {"pilot_iact", res.pilot_iact},
      {"burn_in", res.burn_in},
      {"thinning", res.thinning},
      {"chains", chains_j},
      {"samples", res.samples.size()},
      {"inadmissible_samples", inadmissible},
      {"convergence", res.chains.size() >= 2 ? convergence_json(conv) : json(nullptr)},
  };
  write_json(diag, dir / "diagnostics.json");
  man.artifact(dir / "diagnostics.json");
  const bool ok = res.chains.size() < 2 || conv.converged;
  const auto code = ok ? ExitCode::success : ExitCode::convergence;
  man.write(code);
  return code;
}

// ---------------------------------------------------------------------------
// propagate and compare

inline std::unique_ptr<propagate::ForwardStrengthModel> make_model(const Context& ctx, const std::string& tag) {
  const propagate::SlopeEvaluator slope(ctx.cache, ctx.decay, ctx.grid);
  if (ctx.cfg.model.kind == "external") {
    auto ext = ctx.cfg.model.external;
    ext.work_dir = (ctx.root / "model_work" / tag).string();
    return std::make_unique<propagate::ExternalStrengthModel>(ext, ctx.cache, ctx.decay);
  }
  return std::make_unique<propagate::SurrogateStrengthModel>(ctx.cfg.model.surrogate, slope);
}

inline json weibull_json(const propagate::KnockdownReport& r) {
  if (!r.weibull) return {{"error", r.weibull_error}};
  return {{"modulus", r.weibull->modulus}, {"scale", r.weibull->scale}, {"n", r.weibull->n},
          {"log_likelihood", r.weibull->log_likelihood}, {"iterations", r.weibull->iterations}};
}

inline json report_json(const propagate::StrengthDistribution& d, const propagate::KnockdownReport& r) {
  json q = json::array();
  for (const auto& [p, v] : r.quantiles) q.push_back({{"level", p}, {"Mc", v}});
  json sur = {{"error", r.surrogate_error}};
  if (r.surrogate) {
    const auto& m = r.surrogate->model;
    sur = {{"q", m.q}, {"lambda_q", m.lambda_q}, {"rms_relative", r.surrogate->rms_relative},
           {"n_pairs", r.surrogate->n_pairs}, {"n_floored", r.surrogate->n_floored}};
    if (m.q_lower) sur["lower_bound"] = {{"q", *m.q_lower}, {"lambda_q", *m.lambda_lower}};
  }
  json failures = json::array();
  for (const auto& s : d.samples)
    if (!s.ok) failures.push_back({{"sample_id", s.id}, {"error", s.error}});
  return {{"model", d.model_id},
          {"n_samples", d.samples.size()},
          {"n_ok", d.n_ok},
          {"failures", failures},
          {"mean_Mc", d.mean},
          {"variance", d.variance},
          {"sampling_error", d.sampling_error},
          {"ci95_one_sided_half_width", d.ci95_half_width},
          {"bias_note", d.bias_note},
          {"m_star", r.m_star},
          {"mean_knockdown", r.mean_knockdown},
          {"worst_Mc", r.worst},
          {"worst_knockdown", r.worst_knockdown},
          {"quantiles", q},
          {"weibull", weibull_json(r)},
          {"slope_fit", sur}};
}

struct Propagated {
  propagate::StrengthDistribution dist;
  propagate::KnockdownReport report;
};

inline Propagated propagate_set(const Context& ctx, const std::vector<Eigen::VectorXd>& xs,
                                const std::string& tag) {
  std::vector<klfield::WrinkleParams> params;
  for (const auto& v : xs) params.push_back(klfield::WrinkleParams::from_vector(v));
  const auto model = make_model(ctx, tag);
  const propagate::SlopeEvaluator slope(ctx.cache, ctx.decay, ctx.grid);
  Propagated p;
  p.dist = propagate::monte_carlo(params, *model, &slope, ctx.cfg.workers);
  if (p.dist.n_ok == 0) throw NumericalError("every " + tag + " sample failed in the strength model");
  p.report = propagate::knockdown_report(p.dist, ctx.cfg.model.surrogate.m_star,
                                         {1.0 / static_cast<double>(p.dist.n_ok), 0.01, 0.05, 0.5});
  return p;
}

inline ExitCode cmd_propagate(const Context& ctx) {
  Manifest man("propagate", ctx.cfg, ctx.root);
  const auto dir = ctx.dir("propagate");
  const auto in = ctx.root / "infer" / "samples.csv";
  man.input(in);
  const auto xs = bayes::read_parameter_csv(in.string());
  if (xs.empty()) throw DataError("no posterior samples in " + in.string());
  const auto p = propagate_set(ctx, xs, "posterior");
  propagate::write_strength_csv(p.dist, (dir / "strengths.csv").string());
  propagate::write_cdf_csv(propagate::cdf_points(p.dist.strengths(), p.report.weibull), (dir / "cdf.csv").string());
  write_json(report_json(p.dist, p.report), dir / "report.json");
  for (const char* f : {"strengths.csv", "cdf.csv", "report.json"}) man.artifact(dir / f);
  man.write(ExitCode::success);
  return ExitCode::success;
}

/// Draws independent samples from the prior and propagates them through the
/// same model as the posterior samples.
inline ExitCode cmd_compare(const Context& ctx) {
  Manifest man("compare", ctx.cfg, ctx.root);
  const auto dir = ctx.dir("compare");
  const auto prior_path = ctx.root / "infer" / "prior.json";
  const auto post_path = ctx.root / "infer" / "samples.csv";
  man.input(prior_path);
  man.input(post_path);
  const auto prior = read_prior(prior_path);
  const auto post = bayes::read_parameter_csv(post_path.string());
  if (post.empty()) throw DataError("no posterior samples in " + post_path.string());

  Rng rng = make_stream(ctx.cfg.seed, stream::compare);
  std::vector<Eigen::VectorXd> draws;
  std::size_t admissible = 0;
  for (int i = 0; i < ctx.cfg.compare_samples; ++i) {
    draws.push_back(prior.sample(rng));
    admissible += ctx.admissible(klfield::WrinkleParams::from_vector(draws.back()));
  }
  bayes::write_parameter_csv(draws, (dir / "prior_samples.csv").string());

  const auto a = propagate_set(ctx, post, "posterior");
  const auto b = propagate_set(ctx, draws, "prior");
  propagate::write_strength_csv(b.dist, (dir / "prior_strengths.csv").string());
  propagate::write_cdf_csv(propagate::cdf_points(b.dist.strengths(), b.report.weibull),
                           (dir / "prior_cdf.csv").string());
  auto side = [](const Propagated& p, std::size_t n_admissible) {
    auto j = report_json(p.dist, p.report);
    j["n_admissible"] = n_admissible;
    return j;
  };
  json rep = {{"posterior", side(a, a.dist.samples.size())}, {"prior", side(b, admissible)}};
  if (a.report.weibull && b.report.weibull) {
    rep["modulus_posterior"] = a.report.weibull->modulus;
    rep["modulus_prior"] = b.report.weibull->modulus;
    rep["prior_modulus_at_least_posterior"] = b.report.weibull->modulus >= a.report.weibull->modulus;
  }
  write_json(rep, dir / "report.json");
  for (const char* f : {"prior_samples.csv", "prior_strengths.csv", "prior_cdf.csv", "report.json"})
    man.artifact(dir / f);
  man.write(ExitCode::success);
  return ExitCode::success;
}

}  // namespace defect_chain::pipeline

#endif  // DEFECT_CHAIN_PIPELINE_HPP

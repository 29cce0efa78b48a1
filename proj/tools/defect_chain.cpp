#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "defect_chain/config.hpp"
#include "defect_chain/pipeline.hpp"

namespace dc = defect_chain;

int main(int argc, char** argv) {
  CLI::App app{"Wrinkle defect chain: synthetic scans, extraction, Bayesian inference, strength propagation"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> images;
  std::string prior_file;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "INI configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "master seed (overrides [run] seed)");
    sub->add_option("--out", out_dir, "run directory (overrides [run] out_dir)");
  };
  auto* synth = app.add_subcommand("synth", "render synthetic B-scans from seeded wrinkles");
  auto* extract = app.add_subcommand("extract", "estimate misalignment samples from B-scan images");
  auto* infer = app.add_subcommand("infer", "MAP fits, prior, and pCN posterior sampling");
  auto* prop = app.add_subcommand("propagate", "strength distribution of the posterior samples");
  auto* compare = app.add_subcommand("compare", "posterior sampling against direct prior sampling");
  for (auto* s : {synth, extract, infer, prop, compare}) add_common(s);
  extract->add_option("--images", images, "images to process (default: <out>/synth/scan_*)")
      ->check(CLI::ExistingFile);
  infer->add_option("--prior", prior_file, "prior.json from an earlier run instead of building one")
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(dc::ExitCode::validation);
  }

  try {
    auto cfg = dc::load_config(config_path);
    if (seed) {
      cfg.seed = *seed;
      cfg.seed_set = true;
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();
    const dc::pipeline::Context ctx(cfg);

    dc::ExitCode code = dc::ExitCode::success;
    if (*synth) {
      code = dc::pipeline::cmd_synth(ctx);
    } else if (*extract) {
      std::vector<std::filesystem::path> paths(images.begin(), images.end());
      code = dc::pipeline::cmd_extract(ctx, paths);
    } else if (*infer) {
      std::optional<std::filesystem::path> p;
      if (!prior_file.empty()) p = prior_file;
      code = dc::pipeline::cmd_infer(ctx, p);
      if (code == dc::ExitCode::convergence)
        std::cerr << "warning: chains did not pass the convergence check; see infer/diagnostics.json\n";
    } else if (*prop) {
      code = dc::pipeline::cmd_propagate(ctx);
    } else if (*compare) {
      code = dc::pipeline::cmd_compare(ctx);
    }
    return static_cast<int>(code);
  } catch (const dc::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(dc::ExitCode::numerical);
  }
}

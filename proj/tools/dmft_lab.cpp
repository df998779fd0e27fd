#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dmftlab/errors.hpp"
#include "dmftlab/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"dmft-lab: Langevin / DMFT / Marcenko-Pastur / equilibrium laboratory"};
  app.set_version_flag("--version", dmftlab::git_describe());

  std::string pipeline, config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  app.add_option("pipeline", pipeline, "simulate | dmft | dmft-linear | oracle | equilibrium | compare | response")
      ->required()
      ->check(CLI::IsMember({"simulate", "dmft", "dmft-linear", "oracle", "equilibrium", "compare", "response"}));
  app.add_option("--config", config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out, "output directory (overrides DMFT_LAB_OUT and the config)");
  app.add_option("--seed", seed, "master seed (overrides the config)");
  app.add_option("--threads", threads, "worker cap")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  try {
    nlohmann::json doc;
    {
      std::ifstream in(config);
      doc = nlohmann::json::parse(in);
    }
    // command-line overrides are folded into the document so the hash covers them
    if (seed) doc["seed"] = *seed;
    if (threads) doc["threads"] = *threads;
    doc["pipeline"] = pipeline;
    const auto cfg = dmftlab::parse_config(doc);
    const auto dir = dmftlab::resolve_output_dir(out, cfg);
    const auto res = dmftlab::run(cfg, dmftlab::parse_pipeline(pipeline), dir);
    std::cout << res.summary << " -> " << dir.string() << '\n';
    return res.exit_code;
  } catch (const nlohmann::json::parse_error& e) {
    std::cerr << "error: config is not valid JSON: " << e.what() << '\n';
    return 3;
  } catch (const dmftlab::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

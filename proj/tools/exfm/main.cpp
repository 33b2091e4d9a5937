#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "exfm/cli.hpp"
#include "exfm/config.hpp"
#include "exfm/error.hpp"

namespace {

struct Globals {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

exfm::config::ExperimentConfig resolve(const Globals& g) {
  auto cfg = g.config_path ? exfm::config::load_config(*g.config_path)
                           : exfm::config::ExperimentConfig{};
  if (g.seed) cfg.seeds = {*g.seed, *g.seed, *g.seed};
  if (g.out) cfg.out_dir = *g.out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"External distillation simulator: teacher, students, augmentation service"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_path, "experiment config file");
  app.add_option("--seed", g.seed, "overrides seeds.data, seeds.init and seeds.das");
  app.add_option("--out", g.out, "output directory (default: output.dir)");

  auto* run = app.add_subcommand("run", "one pipeline run");
  std::optional<std::string> stream_path;
  run->add_option("--stream", stream_path, "replay a dumped stream instead of generating one")
      ->check(CLI::ExistingFile);

  auto* staleness = app.add_subcommand("staleness", "student NE against teacher snapshot delay");
  std::optional<std::size_t> max_delay, seeds;
  staleness->add_option("--max-delay", max_delay, "largest delay in days (>= 1)");
  staleness->add_option("--seeds", seeds, "paired seeds");

  auto* sweep = app.add_subcommand("sweep", "NE gain over the w / alpha / beta grid");
  sweep->add_option("--seeds", seeds, "paired seeds");

  auto* theorem = app.add_subcommand("theorem", "run a linear-model theorem harness");
  std::string which;
  std::optional<std::size_t> trials;
  theorem->add_option("which", which, "ah or sa")->required();
  theorem->add_option("--trials", trials, "Monte Carlo trials for sa");
  bool head_refresh = false;
  theorem->add_flag("--head-refresh", head_refresh, "also report ah at head_steps 5, 20, 100");

  auto* das_verify = app.add_subcommand("das-verify", "check the service protocol invariants");
  std::size_t count = 1000;
  bool mutate = false;
  das_verify->add_option("--count", count, "random schedules");
  das_verify->add_flag("--mutate", mutate, "run the protocol with the lease-skip bug");

  auto* gen_stream = app.add_subcommand("gen-stream", "dump the synthetic stream");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exfm::cli::kExitPass : exfm::cli::kExitUsage;
  }

  try {
    auto cfg = resolve(g);
    if (max_delay) cfg.max_delay = *max_delay;
    if (seeds) cfg.num_seeds = *seeds;
    cfg.validate();
    const std::filesystem::path out = cfg.out_dir;
    if (*run) return exfm::cli::cmd_run(cfg, out, std::cout, stream_path);
    if (*staleness) return exfm::cli::cmd_staleness(cfg, out, std::cout);
    if (*sweep) return exfm::cli::cmd_sweep(cfg, out, std::cout);
    if (*theorem) {
      return exfm::cli::cmd_theorem(which, cfg.seeds.data, out, std::cout, trials, head_refresh);
    }
    if (*das_verify) return exfm::cli::cmd_das_verify(count, cfg.seeds.das, mutate, out, std::cout);
    if (*gen_stream) return exfm::cli::cmd_gen_stream(cfg, out, std::cout);
  } catch (const exfm::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == exfm::ErrorCode::kConfigError ? exfm::cli::kExitUsage
                                                     : exfm::cli::kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exfm::cli::kExitFailure;
  }
  return exfm::cli::kExitUsage;
}

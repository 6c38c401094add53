// divrl: train, tandem, eval, report, sweep.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "divrl/aggregation.hpp"
#include "divrl/error.hpp"
#include "divrl/evalstats.hpp"
#include "divrl/runner/checkpoint.hpp"
#include "divrl/runner/config.hpp"
#include "divrl/runner/report.hpp"
#include "divrl/runner/trainer.hpp"

using namespace divrl;

namespace {

std::vector<std::uint64_t> seeds_for(const run::RunConfig& c, const std::vector<std::uint64_t>& cli) {
  return cli.empty() ? c.seeds : cli;
}

void print_done(const run::Trainer& t, const run::fs::path& dir) {
  const auto agg = t.log().series("eval_agg");
  const auto indiv = t.log().series("eval_indiv");
  std::printf("%s seed %llu: step %lld%s, eval_agg %.4f, eval_indiv %.4f -> %s\n", t.config().name.c_str(),
              static_cast<unsigned long long>(t.seed()), static_cast<long long>(t.step()),
              t.diverged() ? " (diverged)" : "", agg.empty() ? 0.0 : agg.back(), indiv.empty() ? 0.0 : indiv.back(),
              dir.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble exploration experiments on toy environments"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, resume_path, mode = "agg";
  std::vector<std::uint64_t> seeds;
  std::uint64_t eval_seed = 0;
  std::int64_t stop_at = -1;
  double passive_pct = 50.0;
  std::size_t episodes = 10;
  std::vector<std::string> dirs, grid;
  std::string summary_path;

  auto* train = app.add_subcommand("train", "Train one config for each seed");
  train->add_option("--config", config_path, "JSON run config")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seeds, "Seed(s); defaults to the config's seed list");
  train->add_option("--resume", resume_path, "Continue from a checkpoint")->check(CLI::ExistingFile);
  train->add_option("--stop-at", stop_at, "Stop at this step and write a checkpoint");

  auto* tandem = app.add_subcommand("tandem", "Run an active/passive pair sharing buffer and batches");
  tandem->add_option("--config", config_path, "JSON run config")->required()->check(CLI::ExistingFile);
  tandem->add_option("--passive-pct", passive_pct, "Passive acting share p in [0, 100]")
      ->required()
      ->check(CLI::Range(0.0, 100.0));
  tandem->add_option("--seed", seeds, "Seed(s); defaults to the config's seed list");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--mode", mode, "agg or indiv")->check(CLI::IsMember({"agg", "indiv"}));
  eval->add_option("--episodes", episodes, "Episodes")->check(CLI::PositiveNumber);
  eval->add_option("--seed", eval_seed, "Evaluation seed");

  auto* report = app.add_subcommand("report", "Summarize run directories");
  report->add_option("dirs", dirs, "Run directories")->required();
  report->add_option("--out", summary_path, "Summary CSV path (default summary.csv in the first dir)");

  auto* sweep = app.add_subcommand("sweep", "Train every point of a config grid");
  sweep->add_option("--config", config_path, "JSON run config")->required()->check(CLI::ExistingFile);
  sweep->add_option("--grid", grid, "key=v1,v2,... (repeatable)")->required();
  sweep->add_option("--seed", seeds, "Seed(s); defaults to the config's seed list");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const run::RunConfig c = run::parse_config(config_path);
      const auto list = seeds_for(c, seeds);
      if (!resume_path.empty() && list.size() != 1) throw ConfigError("--resume needs exactly one --seed");
      for (std::uint64_t s : list) {
        const run::Trainer t = run::train_seed(c, s, resume_path, stop_at);
        print_done(t, run::run_directory(c, s));
      }
    } else if (*tandem) {
      const run::RunConfig c = run::tandem_config(run::parse_config(config_path), passive_pct);
      for (std::uint64_t s : seeds_for(c, seeds)) {
        const run::Trainer t = run::train_seed(c, s);
        print_done(t, run::run_directory(c, s));
        const auto& roles = *t.roles_log();
        std::printf("  active %.4f, passive %.4f\n", roles.series("active").back(), roles.series("passive").back());
      }
    } else if (*eval) {
      const run::Trainer t = run::checkpoint_load(checkpoint_path);
      Rng rng = make_stream(eval_seed, std::string("cli/eval/") + mode);
      const agg::EvalResult r = t.evaluate(agg::eval_mode_from_string(mode), episodes, rng);
      std::printf("step %lld mode %s episodes %zu mean_return %.17g\n", static_cast<long long>(t.step()), mode.c_str(),
                  episodes, r.mean());
    } else if (*report) {
      const auto rows = run::summarize(run::load_runs(dirs));
      const std::string path = summary_path.empty() ? (run::fs::path(dirs[0]) / "summary.csv").string() : summary_path;
      std::ofstream(path, std::ios::binary) << run::summary_csv(rows);
      std::cout << run::summary_table(rows) << "summary written to " << path << "\n";
    } else if (*sweep) {
      const run::RunConfig base = run::parse_config(config_path);
      std::vector<run::GridAxis> axes;
      for (const auto& g : grid) axes.push_back(run::parse_grid_axis(g));
      for (const auto& c : run::expand_grid(base, axes)) {
        for (std::uint64_t s : seeds_for(c, seeds)) {
          const run::Trainer t = run::train_seed(c, s);
          print_done(t, run::run_directory(c, s));
        }
      }
    }
  } catch (const divrl::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

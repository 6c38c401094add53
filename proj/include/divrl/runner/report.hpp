#pragma once

// Run directories, the summary report, and config sweeps.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "divrl/error.hpp"
#include "divrl/evalstats.hpp"
#include "divrl/rng.hpp"
#include "divrl/runner/checkpoint.hpp"
#include "divrl/runner/config.hpp"
#include "divrl/runner/runlog.hpp"
#include "divrl/runner/trainer.hpp"

namespace divrl::run {

namespace fs = std::filesystem;

/// Task label used in reports, e.g. "deep_sea(10)".
inline std::string task_label(const env::EnvConfig& e) {
  if (e.name == "deep_sea") return "deep_sea(" + std::to_string(e.size) + ")";
  if (e.name == "chain") return "chain(" + std::to_string(e.length) + ")";
  if (e.name == "sparse_grid") return "sparse_grid(" + std::to_string(e.width) + "," + std::to_string(e.height) + ")";
  return e.name;
}

inline fs::path run_directory(const RunConfig& c, std::uint64_t seed) {
  return fs::path(c.output_dir) / c.name / ("seed_" + std::to_string(seed));
}

/// Writes log.csv, run.json and (for tandem pairs) roles.csv.
inline void write_run(const fs::path& dir, const Trainer& t) {
  fs::create_directories(dir);
  t.log().write((dir / "log.csv").string());
  if (t.roles_log()) t.roles_log()->write((dir / "roles.csv").string());
  nlohmann::json meta = {{"config", to_json(t.config())}, {"seed", t.seed()}, {"task", task_label(t.config().env)}};
  std::ofstream f(dir / "run.json");
  f << meta.dump(2) << "\n";
}

/// Trains one seed to completion, optionally stopping early at `stop_at` to
/// leave a checkpoint, or resuming from `resume`.
inline Trainer train_seed(const RunConfig& config, std::uint64_t seed, const std::string& resume = "",
                          std::int64_t stop_at = -1) {
  Trainer t = resume.empty() ? Trainer(config, seed) : checkpoint_load(resume, &config);
  if (!resume.empty() && t.seed() != seed)
    throw ConfigError("checkpoint seed " + std::to_string(t.seed()) + " differs from --seed " + std::to_string(seed));
  const fs::path dir = run_directory(config, seed);
  if (stop_at >= 0) {
    t.run(stop_at);
    fs::create_directories(dir);
    checkpoint_save((dir / ("checkpoint_" + std::to_string(t.step()) + ".bin")).string(), t);
  } else {
    t.run();
  }
  write_run(dir, t);
  return t;
}

// ---------------------------------------------------------------------------
// Report

struct SummaryRow {
  std::string task;
  std::string method;
  std::string mode;  // agg | indiv
  double final = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double delta = 0.0;  // agg final - indiv final
};

struct LoadedRun {
  std::string task;
  std::string method;
  std::uint64_t seed = 0;
  std::size_t last_k = 10;
  RunLog log;
};

/// Every directory at or below `root` holding a log.csv and run.json.
inline std::vector<LoadedRun> load_runs(const std::vector<std::string>& roots) {
  std::vector<fs::path> dirs;
  for (const auto& r : roots) {
    if (!fs::exists(r)) throw Error("no such run directory '" + r + "'");
    if (fs::exists(fs::path(r) / "log.csv")) dirs.emplace_back(r);
    if (fs::is_directory(r)) {
      for (const auto& e : fs::recursive_directory_iterator(r))
        if (e.is_regular_file() && e.path().filename() == "log.csv" && e.path().parent_path() != fs::path(r))
          dirs.push_back(e.path().parent_path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  dirs.erase(std::unique(dirs.begin(), dirs.end()), dirs.end());
  std::vector<LoadedRun> runs;
  std::vector<std::string> bad;
  for (const auto& d : dirs) {
    LoadedRun run;
    std::ifstream meta_in(d / "run.json");
    if (!meta_in) throw Error((d / "run.json").string() + ": missing");
    const auto meta = nlohmann::json::parse(meta_in);
    run.task = meta.at("task").get<std::string>();
    run.method = meta.at("config").at("name").get<std::string>();
    run.seed = meta.at("seed").get<std::uint64_t>();
    run.last_k = meta.at("config").value("final_last_k", std::size_t{10});
    try {
      run.log = RunLog::read((d / "log.csv").string());
    } catch (const SchemaError& e) {
      bad.push_back(e.what());
      continue;
    }
    runs.push_back(std::move(run));
  }
  if (!bad.empty()) {
    std::string msg = "schema mismatch in:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw SchemaError(msg);
  }
  return runs;
}

/// Final score per (task, method, mode) with a 95% bootstrap CI over seeds.
inline std::vector<SummaryRow> summarize(const std::vector<LoadedRun>& runs, std::size_t resamples = 2000,
                                         std::uint64_t ci_seed = 0) {
  stats::ScoreTable agg_table, indiv_table;
  std::map<std::pair<std::string, std::string>, std::size_t> last_k;
  for (const auto& r : runs) {
    agg_table.add(r.task, r.method, r.seed, r.log.series("eval_agg"));
    indiv_table.add(r.task, r.method, r.seed, r.log.series("eval_indiv"));
    last_k[{r.task, r.method}] = r.last_k;
  }
  std::vector<SummaryRow> out;
  for (const auto& [key, k] : last_k) {
    const auto& [task, method] = key;
    SummaryRow rows[2];
    const stats::ScoreTable* tables[2] = {&agg_table, &indiv_table};
    const char* modes[2] = {"agg", "indiv"};
    for (int m = 0; m < 2; ++m) {
      const auto per_seed = stats::per_seed_final(*tables[m], task, method, k);
      Rng rng = make_stream(ci_seed, "report/ci/" + task + "/" + method + "/" + modes[m]);
      const auto [lo, hi] = stats::bootstrap_ci(per_seed, resamples, 0.95, rng);
      rows[m] = SummaryRow{task, method, modes[m], stats::mean(per_seed), lo, hi, 0.0};
    }
    const double delta = rows[0].final - rows[1].final;
    for (auto& row : rows) {
      row.delta = delta;
      out.push_back(row);
    }
  }
  return out;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string s = "task,method,mode,final,lo,hi,delta\n";
  for (const auto& r : rows) {
    s += r.task + "," + r.method + "," + r.mode + "," + format_value(r.final) + "," + format_value(r.lo) + "," +
         format_value(r.hi) + "," + format_value(r.delta) + "\n";
  }
  return s;
}

inline std::string summary_table(const std::vector<SummaryRow>& rows) {
  std::string s;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-18s %-24s %-6s %12s %12s %12s %12s\n", "task", "method", "mode", "final", "lo",
                "hi", "delta");
  s += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-18s %-24s %-6s %12.4f %12.4f %12.4f %12.4f\n", r.task.c_str(), r.method.c_str(),
                  r.mode.c_str(), r.final, r.lo, r.hi, r.delta);
    s += buf;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Sweeps

struct GridAxis {
  std::string key;  // dotted path, e.g. "env.size"
  std::vector<nlohmann::json> values;
};

/// Parses "key=v1,v2,..."; each value is read as JSON, falling back to a string.
inline GridAxis parse_grid_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  DIVRL_REQUIRE(eq != std::string::npos && eq > 0 && eq + 1 < spec.size(), ConfigError,
                "grid axis '" + spec + "' must look like key=v1,v2");
  GridAxis axis{spec.substr(0, eq), {}};
  std::string rest = spec.substr(eq + 1);
  std::size_t start = 0;
  while (start <= rest.size()) {
    const auto comma = rest.find(',', start);
    const std::string v = rest.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    DIVRL_REQUIRE(!v.empty(), ConfigError, "grid axis '" + spec + "' has an empty value");
    try {
      axis.values.push_back(nlohmann::json::parse(v));
    } catch (const nlohmann::json::parse_error&) {
      axis.values.emplace_back(v);
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return axis;
}

/// One config per point of the cartesian product, named base__key=value...
inline std::vector<RunConfig> expand_grid(const RunConfig& base, const std::vector<GridAxis>& axes) {
  std::vector<std::pair<nlohmann::json, std::string>> points{{to_json(base), base.name}};
  for (const auto& axis : axes) {
    std::vector<std::pair<nlohmann::json, std::string>> next;
    for (const auto& [j, name] : points) {
      for (const auto& v : axis.values) {
        nlohmann::json copy = j;
        const nlohmann::json::json_pointer ptr("/" + [&] {
          std::string p = axis.key;
          std::replace(p.begin(), p.end(), '.', '/');
          return p;
        }());
        DIVRL_REQUIRE(copy.contains(ptr), ConfigError, "grid key '" + axis.key + "' is not a config field");
        copy[ptr] = v;
        const std::string label = v.is_string() ? v.get<std::string>() : v.dump();
        next.emplace_back(copy, name + "__" + axis.key + "=" + label);
      }
    }
    points = std::move(next);
  }
  std::vector<RunConfig> out;
  for (auto& [j, name] : points) {
    j["name"] = name;
    out.push_back(config_from_json(j));
  }
  return out;
}

}  // namespace divrl::run

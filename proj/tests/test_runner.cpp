#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace divrl;
using namespace divrl::run;
using nlohmann::json;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("divrl_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

RunLog constant_log(std::uint64_t seed, double agg, double indiv, int points) {
  RunLog log(seed);
  for (int k = 0; k < points; ++k) {
    log.append(k * 10, seed, "eval_agg", agg);
    log.append(k * 10, seed, "eval_indiv", indiv);
  }
  return log;
}

void write_fake_run(const fs::path& dir, const std::string& method, std::uint64_t seed, const RunLog& log) {
  fs::create_directories(dir);
  log.write((dir / "log.csv").string());
  json cfg = {{"name", method}, {"final_last_k", 2}};
  write_text(dir / "run.json", json{{"config", cfg}, {"seed", seed}, {"task", "chain(5)"}}.dump());
}

int run_cli(const std::string& args, const fs::path& cwd) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" + DIVRL_CLI + "' " + args + " > cli_out.txt 2>&1";
  return std::system(cmd.c_str());
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST(Config, MinimalFileFillsDefaultsAndRoundTrips) {
  const RunConfig c = parse_config_text(R"({"env": {"name": "chain"}})");
  EXPECT_EQ(c.algorithm, Algorithm::boot_dqn);
  EXPECT_EQ(c.ensemble_size, 1u);
  EXPECT_EQ(c.batch_size, 32u);
  const RunConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, RejectsUnknownKeysWithPath) {
  EXPECT_NE(message_of([] { parse_config_text(R"({"env": {"name": "chain"}, "learning_rat": 0.1})"); })
                .find("learning_rat: unknown key"),
            std::string::npos);
  EXPECT_NE(message_of([] { parse_config_text(R"({"env": {"name": "chain", "sise": 3}})"); }).find("env.sise"),
            std::string::npos);
  EXPECT_THROW(parse_config_text(R"({"env": {"name": "chain"}, "hidden": "wide"})"), ConfigError);
  EXPECT_THROW(parse_config_text("{not json"), ConfigError);
}

TEST(Config, CrossFieldRules) {
  auto bad = [](json j) { EXPECT_THROW(support::config(j), ConfigError) << j.dump(); };
  json base = support::small_chain();
  json j = base;
  j["ensemble_size"] = 0;
  bad(j);
  j = support::small_chain("double_dqn", 1);
  j["head_mode"] = "cerl";
  bad(j);
  j = support::small_chain("double_dqn", 1);
  j["ensemble_size"] = 2;
  bad(j);
  j = base;
  j["shared_layers"] = 2;  // hidden has depth 1
  bad(j);
  j = base;
  j["tandem_passive_pct"] = 20;  // tandem needs N = 2
  bad(j);
  j = base;
  j["algorithm"] = "sac";
  j["ensemble_size"] = 1;
  j.erase("mask_keep_prob");
  bad(j);  // continuous algorithm on a discrete task
  j = support::small_point_mass("ensemble_sac", 2);
  j["head_mode"] = "multi_horizon";
  bad(j);
  j = base;
  j["head_mode"] = "multi_horizon";
  j["mh_max_horizon"] = 5;
  bad(j);
  j = base;
  j["mask_keep_prob"] = 0.0;
  bad(j);
  j = base;
  j["head_mode"] = "diagonal";
  bad(j);
}

TEST(Config, RepoConfigsParse) {
  for (const auto& e : fs::directory_iterator(fs::path(DIVRL_SOURCE_DIR) / "configs")) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(parse_config(e.path().string())) << e.path();
  }
}

// ---------------------------------------------------------------------------
// RunLog

TEST(RunLog, CsvRoundTrip) {
  RunLog log(7);
  log.append(0, 7, "eval_agg", 0.1);
  log.append(10, 7, "eval_agg", 1.0 / 3.0);
  log.append(10, 7, "train_return", -2.5e-17);
  const std::string csv = log.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,seed,series,value");
  EXPECT_EQ(csv.find('\r'), std::string::npos);
  const RunLog back = RunLog::from_csv(csv);
  EXPECT_EQ(back.to_csv(), csv);
  EXPECT_EQ(back.series("eval_agg"), (std::vector<double>{0.1, 1.0 / 3.0}));
}

TEST(RunLog, StepMonotonePerSeries) {
  RunLog log(0);
  log.append(10, 0, "eval_agg", 1.0);
  log.append(5, 0, "loss", 1.0);
  EXPECT_THROW(log.append(5, 0, "eval_agg", 1.0), ContractViolation);
}

TEST(RunLog, SchemaErrors) {
  EXPECT_THROW(RunLog::from_csv("a,b,c,d\n"), SchemaError);
  EXPECT_THROW(RunLog::from_csv("step,seed,series,value\n0,0,eval_agg,1\n"), SchemaError);
  EXPECT_THROW(RunLog::from_csv("step,seed,series,value\n0,0,schema_version,2\n"), SchemaError);
  EXPECT_THROW(RunLog::from_csv("step,seed,series,value\n0,0,schema_version,1\n1,0,x\n"), SchemaError);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Trainer, ZeroStepsLogsOnlyInitialEvaluation) {
  json j = support::small_chain();
  j["total_steps"] = 0;
  Trainer t(support::config(j), 0);
  t.run();
  EXPECT_EQ(t.log().steps("eval_agg"), std::vector<std::int64_t>{0});
  EXPECT_EQ(t.log().steps("eval_indiv"), std::vector<std::int64_t>{0});
  EXPECT_EQ(t.buffer().size(), 0u);
}

TEST(Trainer, DeterministicLogs) {
  const RunConfig c = support::config(support::small_chain());
  EXPECT_EQ(support::run_csv(c, 4), support::run_csv(c, 4));
  EXPECT_NE(support::run_csv(c, 4), support::run_csv(c, 5));
}

TEST(Trainer, EvalScheduleAndSeries) {
  const RunConfig c = support::config(support::small_chain());
  Trainer t(c, 1);
  t.run();
  EXPECT_EQ(t.log().steps("eval_agg"), (std::vector<std::int64_t>{0, 300, 600, 900, 1200}));
  EXPECT_EQ(t.log().steps("eval_indiv"), t.log().steps("eval_agg"));
  EXPECT_FALSE(t.log().series("vote_entropy").empty());
  EXPECT_FALSE(t.log().series("train_return").empty());
}

TEST(Trainer, EvaluationIsPure) {
  const RunConfig c = support::config(support::small_chain());
  Trainer t(c, 2);
  t.run(500);
  const std::uint64_t before = t.state_hash();
  Rng rng = make_stream(0, "probe");
  t.evaluate(agg::EvalMode::aggregated, 3, rng);
  t.evaluate(agg::EvalMode::individual, 3, rng);
  EXPECT_EQ(t.state_hash(), before);
}

TEST(Trainer, EvalEpisodesDoNotPerturbTraining) {
  json a = support::small_chain();
  json b = a;
  b["eval_episodes"] = 5;
  Trainer ta(support::config(a), 3), tb(support::config(b), 3);
  ta.run();
  tb.run();
  EXPECT_EQ(ta.state_hash(), tb.state_hash());
  EXPECT_EQ(ta.log().series("train_return"), tb.log().series("train_return"));
}

TEST(Trainer, DivergenceAbortsWithRow) {
  json j = support::small_chain("double_dqn", 1);
  j["learning_rate"] = 1e300;
  j["learning_starts"] = 20;
  std::vector<std::string> warnings;
  auto saved = warning_sink();
  warning_sink() = [&](const std::string& m) { warnings.push_back(m); };
  Trainer t(support::config(j), 0);
  t.run();
  warning_sink() = saved;
  ASSERT_TRUE(t.diverged());
  EXPECT_EQ(t.log().series("diverged"), std::vector<double>{1.0});
  EXPECT_LT(t.step(), 1200);
  EXPECT_FALSE(warnings.empty());
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripAndResume) {
  const RunConfig c = support::config(support::small_chain());
  Trainer full(c, 6);
  full.run();
  Trainer part(c, 6);
  part.run(517);
  const std::string bytes = checkpoint_bytes(part);
  Trainer loaded = checkpoint_restore(bytes, &c);
  EXPECT_EQ(checkpoint_bytes(loaded), bytes);
  loaded.run();
  EXPECT_EQ(loaded.log().to_csv(), full.log().to_csv());
  EXPECT_EQ(loaded.state_hash(), full.state_hash());
}

TEST(Checkpoint, Header) {
  const RunConfig c = support::config(support::small_chain());
  Trainer t(c, 0);
  const std::string bytes = checkpoint_bytes(t);
  EXPECT_EQ(bytes.substr(0, 8), "DIVRLCKP");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), kCheckpointVersion);  // little-endian u32
  EXPECT_EQ(bytes[9], 0);
  const Digest h = config_hash(c);
  EXPECT_EQ(bytes.substr(12, 32), std::string(reinterpret_cast<const char*>(h.data()), 32));
}

TEST(Checkpoint, RejectsCorruptionVersionAndConfig) {
  const RunConfig c = support::config(support::small_chain());
  Trainer t(c, 0);
  t.run(300);
  const std::string bytes = checkpoint_bytes(t);

  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(checkpoint_restore(flipped), ChecksumError);
  EXPECT_THROW(checkpoint_restore(bytes.substr(0, bytes.size() - 1)), ChecksumError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(checkpoint_restore(magic), ChecksumError);
  std::string version = bytes;
  version[8] = static_cast<char>(kCheckpointVersion + 1);
  EXPECT_THROW(checkpoint_restore(version), VersionError);

  json other = support::small_chain();
  other["batch_size"] = 8;
  const RunConfig oc = support::config(other);
  EXPECT_THROW(checkpoint_restore(bytes, &oc), ConfigError);
}

// ---------------------------------------------------------------------------
// Report

TEST(Report, ConstantSeriesGivesDegenerateInterval) {
  const fs::path root = scratch("report_const");
  write_fake_run(root / "a" / "seed_0", "boot", 0, constant_log(0, 0.75, 0.25, 4));
  const auto rows = summarize(load_runs({root.string()}));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].mode, "agg");
  EXPECT_EQ(rows[0].final, 0.75);
  EXPECT_EQ(rows[0].lo, 0.75);
  EXPECT_EQ(rows[0].hi, 0.75);
  EXPECT_EQ(rows[1].final, 0.25);
  EXPECT_EQ(rows[0].delta, 0.5);
  EXPECT_EQ(rows[1].delta, 0.5);
}

TEST(Report, TwoMethodsStableOrderAndCsv) {
  const fs::path root = scratch("report_two");
  for (std::uint64_t s : {0u, 1u}) {
    write_fake_run(root / "zeta" / ("seed_" + std::to_string(s)), "zeta", s, constant_log(s, 1.0 + s, 0.5, 3));
    write_fake_run(root / "alpha" / ("seed_" + std::to_string(s)), "alpha", s, constant_log(s, 2.0, 1.0 + s, 3));
  }
  const auto rows = summarize(load_runs({root.string()}));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].method, "alpha");
  EXPECT_EQ(rows[2].method, "zeta");
  EXPECT_EQ(rows[2].final, 1.5);
  EXPECT_EQ(rows[2].delta, rows[2].final - rows[3].final);
  EXPECT_EQ(rows[0].delta, rows[0].final - rows[1].final);
  const std::string csv = summary_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,method,mode,final,lo,hi,delta");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(summarize(load_runs({root.string()})).size(), rows.size());
}

TEST(Report, SchemaMismatchListsFiles) {
  const fs::path root = scratch("report_schema");
  write_fake_run(root / "ok" / "seed_0", "m", 0, constant_log(0, 1, 1, 2));
  write_fake_run(root / "bad" / "seed_0", "m", 1, constant_log(1, 1, 1, 2));
  write_text(root / "bad" / "seed_0" / "log.csv", "step,seed,series,value\n0,1,schema_version,9\n");
  const std::string msg = message_of([&] { load_runs({root.string()}); });
  EXPECT_NE(msg.find("schema"), std::string::npos);
  EXPECT_NE(msg.find("bad"), std::string::npos);
  EXPECT_EQ(msg.find("ok/"), std::string::npos);
}

TEST(Sweep, GridExpansion) {
  const RunConfig base = support::config(support::small_chain());
  const auto axes = std::vector<GridAxis>{parse_grid_axis("ensemble_size=2,3"), parse_grid_axis("env.length=4,6,8")};
  const auto configs = expand_grid(base, axes);
  ASSERT_EQ(configs.size(), 6u);
  EXPECT_EQ(configs[0].ensemble_size, 2u);
  EXPECT_EQ(configs[0].env.length, 4);
  EXPECT_EQ(configs[5].ensemble_size, 3u);
  EXPECT_EQ(configs[5].env.length, 8);
  EXPECT_EQ(configs[1].name, "chain_small__ensemble_size=2__env.length=6");
  EXPECT_EQ(parse_grid_axis("head_mode=cerl").values[0], json("cerl"));
  EXPECT_THROW(parse_grid_axis("nokey"), ConfigError);
  EXPECT_THROW(expand_grid(base, {parse_grid_axis("missing=1")}), ConfigError);
}

// ---------------------------------------------------------------------------
// CLI

TEST(Cli, TrainReportEvalResume) {
  const fs::path dir = scratch("cli");
  json j = support::small_chain();
  j["total_steps"] = 600;
  j["seeds"] = {0, 1};
  j["output_dir"] = (dir / "runs").string();
  write_text(dir / "cfg.json", j.dump());

  ASSERT_EQ(run_cli("train --config cfg.json", dir), 0);
  const fs::path run0 = dir / "runs" / "chain_small" / "seed_0";
  ASSERT_TRUE(fs::exists(run0 / "log.csv"));
  ASSERT_TRUE(fs::exists(dir / "runs" / "chain_small" / "seed_1" / "log.csv"));
  const std::string full = read_file((run0 / "log.csv").string());
  EXPECT_EQ(full, support::run_csv(support::config(j), 0));

  ASSERT_EQ(run_cli("report runs --out summary.csv", dir), 0);
  const std::string summary = read_file((dir / "summary.csv").string());
  EXPECT_EQ(summary.substr(0, summary.find('\n')), "task,method,mode,final,lo,hi,delta");

  // Stop at 250 with a checkpoint, then resume: same log as the full run.
  ASSERT_EQ(run_cli("train --config cfg.json --seed 0 --stop-at 250", dir), 0);
  const fs::path ckpt = run0 / "checkpoint_250.bin";
  ASSERT_TRUE(fs::exists(ckpt));
  ASSERT_EQ(run_cli("train --config cfg.json --seed 0 --resume " + ckpt.string(), dir), 0);
  EXPECT_EQ(read_file((run0 / "log.csv").string()), full);

  ASSERT_EQ(run_cli("eval --checkpoint " + ckpt.string() + " --mode indiv --episodes 2", dir), 0);
  EXPECT_NE(read_file((dir / "cli_out.txt").string()).find("mode indiv episodes 2"), std::string::npos);
}

TEST(Cli, TandemAndErrors) {
  const fs::path dir = scratch("cli_tandem");
  json j = support::small_chain("double_dqn", 1);
  j["total_steps"] = 300;
  j["seeds"] = {0};
  j["output_dir"] = (dir / "runs").string();
  write_text(dir / "cfg.json", j.dump());
  ASSERT_EQ(run_cli("tandem --config cfg.json --passive-pct 20", dir), 0);
  EXPECT_TRUE(fs::exists(dir / "runs" / "chain_small" / "seed_0" / "roles.csv"));

  json bad = j;
  bad["unknown_field"] = 1;
  write_text(dir / "bad.json", bad.dump());
  EXPECT_NE(run_cli("train --config bad.json", dir), 0);
  EXPECT_NE(read_file((dir / "cli_out.txt").string()).find("unknown_field: unknown key"), std::string::npos);
  EXPECT_NE(run_cli("bogus", dir), 0);
}

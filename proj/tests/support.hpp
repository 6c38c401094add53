#pragma once

#include <chrono>
#include <string>

#include <nlohmann/json.hpp>

#include "divrl/runner/checkpoint.hpp"
#include "divrl/runner/config.hpp"
#include "divrl/runner/report.hpp"
#include "divrl/runner/trainer.hpp"

#ifndef DIVRL_SOURCE_DIR
#define DIVRL_SOURCE_DIR "."
#endif

namespace support {

using nlohmann::json;

inline divrl::run::RunConfig config(const json& j) { return divrl::run::config_from_json(j); }

/// Config shipped in the repo's configs/ directory.
inline divrl::run::RunConfig repo_config(const std::string& file) {
  return divrl::run::parse_config(std::string(DIVRL_SOURCE_DIR) + "/configs/" + file);
}

inline std::string run_csv(const divrl::run::RunConfig& c, std::uint64_t seed) {
  divrl::run::Trainer t(c, seed);
  t.run();
  return t.log().to_csv();
}

/// Small chain(5) setup shared by the fast runner tests.
inline json small_chain(const std::string& algorithm = "boot_dqn", std::size_t members = 3) {
  return json{{"name", "chain_small"},   {"env", {{"name", "chain"}, {"length", 5}}},
              {"algorithm", algorithm},  {"ensemble_size", members},
              {"hidden", {16}},          {"total_steps", 1200},
              {"eval_period", 300},      {"eval_episodes", 2},
              {"learning_starts", 100},  {"target_update_period", 100},
              {"batch_size", 16},        {"train_period", 2},
              {"final_last_k", 2},       {"mask_keep_prob", members > 1 ? 0.5 : 1.0}};
}

inline json small_point_mass(const std::string& algorithm = "sac", std::size_t members = 1) {
  return json{{"name", "pm_small"},       {"env", {{"name", "point_mass_1d"}}},
              {"algorithm", algorithm},   {"ensemble_size", members},
              {"hidden", {16}},           {"policy_hidden", {16}},
              {"total_steps", 600},       {"eval_period", 200},
              {"eval_episodes", 1},       {"learning_starts", 200},
              {"batch_size", 16},         {"train_period", 2},
              {"final_last_k", 2}};
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace support

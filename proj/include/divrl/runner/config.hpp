#pragma once

// RunConfig: the declarative experiment description, read from JSON.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "divrl/dqn_ensemble.hpp"
#include "divrl/environments.hpp"
#include "divrl/error.hpp"
#include "divrl/head_grid.hpp"
#include "divrl/sac_ensemble.hpp"

namespace divrl::run {

using nlohmann::json;

enum class Algorithm : std::uint8_t { double_dqn, boot_dqn, sac, ensemble_sac };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::double_dqn: return "double_dqn";
    case Algorithm::boot_dqn: return "boot_dqn";
    case Algorithm::sac: return "sac";
    case Algorithm::ensemble_sac: return "ensemble_sac";
  }
  return "?";
}

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "double_dqn") return Algorithm::double_dqn;
  if (s == "boot_dqn") return Algorithm::boot_dqn;
  if (s == "sac") return Algorithm::sac;
  if (s == "ensemble_sac") return Algorithm::ensemble_sac;
  throw ConfigError("algorithm: unknown value '" + s + "'");
}

inline bool is_discrete(Algorithm a) { return a == Algorithm::double_dqn || a == Algorithm::boot_dqn; }

struct RunConfig {
  std::string name = "run";
  env::EnvConfig env;
  Algorithm algorithm = Algorithm::boot_dqn;
  std::size_t ensemble_size = 1;
  std::size_t shared_layers = 0;
  ensemble::HeadMode head_mode = ensemble::HeadMode::plain;
  std::size_t mh_heads = 10;
  double mh_max_horizon = 100.0;
  dqn::SwitchMode switch_mode = dqn::SwitchMode::per_episode;
  std::optional<double> tandem_passive_pct;  // set: run as an active/passive pair

  std::size_t buffer_capacity = 50000;
  double mask_keep_prob = 1.0;
  double self_sample_prob = 0.0;

  std::int64_t total_steps = 10000;
  std::int64_t eval_period = 1000;
  std::size_t eval_episodes = 10;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t final_last_k = 10;

  std::vector<std::size_t> hidden{64, 64};
  std::vector<std::size_t> policy_hidden{64, 64};
  nn::Activation activation = nn::Activation::relu;
  nn::AdamConfig adam;

  std::size_t batch_size = 32;
  std::int64_t train_period = 1;
  std::int64_t learning_starts = 500;
  std::int64_t target_update_period = 200;  // hard sync (discrete)
  double tau = 0.005;                       // soft update (continuous)

  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_decay_fraction = 0.1;
  double eval_epsilon = 0.0;

  bool huber_aux = false;
  double huber_threshold = 10.0;

  double alpha = 0.2;
  bool auto_alpha = false;
  double log_std_min = -20.0;
  double log_std_max = 2.0;
  bool aux_critic_pairs = true;

  std::string output_dir = "runs";

  /// Throws ConfigError on any violated cross-field rule.
  void validate() const;

  dqn::DqnConfig dqn_config() const {
    dqn::DqnConfig c;
    c.members = ensemble_size;
    c.shared_layers = shared_layers;
    c.hidden = hidden;
    c.activation = activation;
    c.head_mode = head_mode;
    c.mh_heads = mh_heads;
    c.mh_max_horizon = mh_max_horizon;
    c.gamma = env.gamma;
    c.huber_aux = huber_aux;
    c.huber_threshold = huber_threshold;
    c.adam = adam;
    return c;
  }

  sac::SacConfig sac_config() const {
    sac::SacConfig c;
    c.members = ensemble_size;
    c.shared_layers = shared_layers;
    c.hidden = hidden;
    c.policy_hidden = policy_hidden;
    c.head_mode = head_mode;
    c.gamma = env.gamma;
    c.alpha = alpha;
    c.auto_alpha = auto_alpha;
    c.log_std_min = log_std_min;
    c.log_std_max = log_std_max;
    c.huber_threshold = huber_threshold;
    c.aux_critic_pairs = aux_critic_pairs;
    c.adam = adam;
    return c;
  }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

/// Reads fields from one JSON object and rejects keys that were never read.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <typename T>
  void get_optional(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <typename T, typename Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string s;
    const bool present = j_.contains(key);
    get(key, s);
    if (!present) return;
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where(k) + ": unknown key");
    }
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline nn::Activation activation_from_string(const std::string& s) {
  if (s == "relu") return nn::Activation::relu;
  if (s == "tanh") return nn::Activation::tanh;
  if (s == "identity") return nn::Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json e = {{"name", c.env.name},       {"size", c.env.size},
            {"length", c.env.length},   {"width", c.env.width},
            {"height", c.env.height},   {"horizon", c.env.horizon},
            {"gamma", c.env.gamma},     {"randomize_actions", c.env.randomize_actions},
            {"mapping_seed", c.env.mapping_seed}};
  json j = {{"name", c.name},
            {"env", e},
            {"algorithm", to_string(c.algorithm)},
            {"ensemble_size", c.ensemble_size},
            {"shared_layers", c.shared_layers},
            {"head_mode", ensemble::to_string(c.head_mode)},
            {"mh_heads", c.mh_heads},
            {"mh_max_horizon", c.mh_max_horizon},
            {"switch_mode", dqn::to_string(c.switch_mode)},
            {"tandem_passive_pct", c.tandem_passive_pct ? json(*c.tandem_passive_pct) : json(nullptr)},
            {"buffer_capacity", c.buffer_capacity},
            {"mask_keep_prob", c.mask_keep_prob},
            {"self_sample_prob", c.self_sample_prob},
            {"total_steps", c.total_steps},
            {"eval_period", c.eval_period},
            {"eval_episodes", c.eval_episodes},
            {"seeds", c.seeds},
            {"final_last_k", c.final_last_k},
            {"hidden", c.hidden},
            {"policy_hidden", c.policy_hidden},
            {"activation", nn::to_string(c.activation)},
            {"learning_rate", c.adam.learning_rate},
            {"adam_beta1", c.adam.beta1},
            {"adam_beta2", c.adam.beta2},
            {"adam_epsilon", c.adam.epsilon},
            {"batch_size", c.batch_size},
            {"train_period", c.train_period},
            {"learning_starts", c.learning_starts},
            {"target_update_period", c.target_update_period},
            {"tau", c.tau},
            {"epsilon_start", c.epsilon_start},
            {"epsilon_end", c.epsilon_end},
            {"epsilon_decay_fraction", c.epsilon_decay_fraction},
            {"eval_epsilon", c.eval_epsilon},
            {"huber_aux", c.huber_aux},
            {"huber_threshold", c.huber_threshold},
            {"alpha", c.alpha},
            {"auto_alpha", c.auto_alpha},
            {"log_std_min", c.log_std_min},
            {"log_std_max", c.log_std_max},
            {"aux_critic_pairs", c.aux_critic_pairs},
            {"output_dir", c.output_dir}};
  return j;
}

/// Fills defaults, rejects unknown keys, validates.
inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  detail::ObjectReader r(j, "");
  r.get("name", c.name);
  if (const json* e = r.child("env")) {
    detail::ObjectReader er(*e, "env");
    er.get("name", c.env.name);
    er.get("size", c.env.size);
    er.get("length", c.env.length);
    er.get("width", c.env.width);
    er.get("height", c.env.height);
    er.get("horizon", c.env.horizon);
    er.get("gamma", c.env.gamma);
    er.get("randomize_actions", c.env.randomize_actions);
    er.get("mapping_seed", c.env.mapping_seed);
    er.finish();
  }
  r.get_enum("algorithm", c.algorithm, algorithm_from_string);
  r.get("ensemble_size", c.ensemble_size);
  r.get("shared_layers", c.shared_layers);
  r.get_enum("head_mode", c.head_mode, ensemble::head_mode_from_string);
  r.get("mh_heads", c.mh_heads);
  r.get("mh_max_horizon", c.mh_max_horizon);
  r.get_enum("switch_mode", c.switch_mode, dqn::switch_mode_from_string);
  r.get_optional("tandem_passive_pct", c.tandem_passive_pct);
  r.get("buffer_capacity", c.buffer_capacity);
  r.get("mask_keep_prob", c.mask_keep_prob);
  r.get("self_sample_prob", c.self_sample_prob);
  r.get("total_steps", c.total_steps);
  r.get("eval_period", c.eval_period);
  r.get("eval_episodes", c.eval_episodes);
  r.get("seeds", c.seeds);
  r.get("final_last_k", c.final_last_k);
  r.get("hidden", c.hidden);
  r.get("policy_hidden", c.policy_hidden);
  r.get_enum("activation", c.activation, detail::activation_from_string);
  r.get("learning_rate", c.adam.learning_rate);
  r.get("adam_beta1", c.adam.beta1);
  r.get("adam_beta2", c.adam.beta2);
  r.get("adam_epsilon", c.adam.epsilon);
  r.get("batch_size", c.batch_size);
  r.get("train_period", c.train_period);
  r.get("learning_starts", c.learning_starts);
  r.get("target_update_period", c.target_update_period);
  r.get("tau", c.tau);
  r.get("epsilon_start", c.epsilon_start);
  r.get("epsilon_end", c.epsilon_end);
  r.get("epsilon_decay_fraction", c.epsilon_decay_fraction);
  r.get("eval_epsilon", c.eval_epsilon);
  r.get("huber_aux", c.huber_aux);
  r.get("huber_threshold", c.huber_threshold);
  r.get("alpha", c.alpha);
  r.get("auto_alpha", c.auto_alpha);
  r.get("log_std_min", c.log_std_min);
  r.get("log_std_max", c.log_std_max);
  r.get("aux_critic_pairs", c.aux_critic_pairs);
  r.get("output_dir", c.output_dir);
  r.finish();
  c.validate();
  return c;
}

inline RunConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(!name.empty(), "name: must not be empty");
  need(ensemble_size >= 1, "ensemble_size: must be >= 1");
  need(shared_layers <= hidden.size(),
       "shared_layers: L = " + std::to_string(shared_layers) + " exceeds encoder depth " + std::to_string(hidden.size()));
  const bool single = algorithm == Algorithm::double_dqn || algorithm == Algorithm::sac;
  need(!single || ensemble_size == 1, "ensemble_size: single-agent algorithms require ensemble_size = 1");
  need(!single || head_mode == ensemble::HeadMode::plain,
       "head_mode: single-agent algorithms have no auxiliary head grid");
  need(!single || !tandem_passive_pct, "tandem_passive_pct: needs an ensemble algorithm");
  if (!is_discrete(algorithm)) {
    need(head_mode == ensemble::HeadMode::plain || head_mode == ensemble::HeadMode::cerl,
         "head_mode: continuous algorithms support plain or cerl");
  }
  if (head_mode == ensemble::HeadMode::multi_horizon) dqn::mh_gammas(mh_heads, mh_max_horizon);
  if (tandem_passive_pct) {
    need(ensemble_size == 2, "tandem_passive_pct: a tandem pair needs ensemble_size = 2");
    need(*tandem_passive_pct >= 0.0 && *tandem_passive_pct <= 100.0, "tandem_passive_pct: must lie in [0, 100]");
  }
  need(buffer_capacity >= 1, "buffer_capacity: must be >= 1");
  need(mask_keep_prob > 0.0 && mask_keep_prob <= 1.0, "mask_keep_prob: must lie in (0, 1]");
  need(self_sample_prob >= 0.0 && self_sample_prob <= 1.0, "self_sample_prob: must lie in [0, 1]");
  need(total_steps >= 0, "total_steps: must be >= 0");
  need(eval_period >= 1, "eval_period: must be >= 1");
  need(eval_episodes >= 1, "eval_episodes: must be >= 1");
  need(!seeds.empty(), "seeds: must list at least one seed");
  need(final_last_k >= 1, "final_last_k: must be >= 1");
  need(batch_size >= 1, "batch_size: must be >= 1");
  need(train_period >= 1, "train_period: must be >= 1");
  need(learning_starts >= 0, "learning_starts: must be >= 0");
  need(target_update_period >= 1, "target_update_period: must be >= 1");
  need(tau > 0.0 && tau <= 1.0, "tau: must lie in (0, 1]");
  for (double e : {epsilon_start, epsilon_end, eval_epsilon}) need(e >= 0.0 && e <= 1.0, "epsilon: must lie in [0, 1]");
  need(epsilon_decay_fraction >= 0.0 && epsilon_decay_fraction <= 1.0, "epsilon_decay_fraction: must lie in [0, 1]");
  need(huber_threshold > 0.0, "huber_threshold: must be > 0");
  need(alpha > 0.0, "alpha: must be > 0");
  need(log_std_min < log_std_max, "log_std_min: must be below log_std_max");
  need(adam.learning_rate > 0.0, "learning_rate: must be > 0");
  for (std::size_t w : hidden) need(w >= 1, "hidden: widths must be >= 1");
  for (std::size_t w : policy_hidden) need(w >= 1, "policy_hidden: widths must be >= 1");
  env::Environment e = env::make_env(env);
  need(e.spec().action_space.is_discrete() == is_discrete(algorithm),
       std::string("algorithm: ") + to_string(algorithm) + " does not match the action space of " + env.name);
}

}  // namespace divrl::run

#pragma once

// The act / train / evaluate loop for one (config, seed).
//
// Named streams derived from the seed:
//   init      network initialisation
//   act       epsilon draws, exploratory actions, policy noise while acting
//   schedule  acting-member draws
//   env       episode start seeds
//   mask      bootstrap masks
//   replay    batch sampling
//   train     SAC target / actor noise
//   eval/agg, eval/indiv, eval/active, eval/passive  (indexed by step)
// Evaluation streams are rebuilt at every eval point, so evaluation settings
// never shift the training trajectory.

#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "divrl/aggregation.hpp"
#include "divrl/dqn_ensemble.hpp"
#include "divrl/environments.hpp"
#include "divrl/error.hpp"
#include "divrl/log.hpp"
#include "divrl/replay.hpp"
#include "divrl/rng.hpp"
#include "divrl/runner/config.hpp"
#include "divrl/runner/runlog.hpp"
#include "divrl/sac_ensemble.hpp"

namespace divrl::run {

/// Epsilon-greedy wrapper around the greedy discrete policy; epsilon = 0
/// consumes no randomness beyond tie-breaks.
struct EpsilonDqnPolicy {
  agg::DqnPolicy inner;
  double epsilon = 0.0;
  std::optional<std::size_t> only_member;  // restricts the ensemble to one member

  std::size_t members() const { return only_member ? 1 : inner.members(); }
  env::Action member_action(std::size_t i, std::span<const double> obs, Rng& rng) const {
    if (explore(rng)) return random_action(rng);
    return inner.member_action(only_member ? *only_member : i, obs, rng);
  }
  env::Action aggregate(std::span<const double> obs, Rng& rng) const {
    if (only_member) return member_action(0, obs, rng);
    if (explore(rng)) return random_action(rng);
    return inner.aggregate(obs, rng);
  }

 private:
  bool explore(Rng& rng) const { return epsilon > 0.0 && uniform01(rng) < epsilon; }
  env::Action random_action(Rng& rng) const {
    return env::Action::index(static_cast<int>(uniform_index(rng, inner.ens.action_count())));
  }
};

struct SingleSacPolicy {
  agg::SacPolicy inner;
  std::size_t member = 0;

  std::size_t members() const { return 1; }
  env::Action member_action(std::size_t, std::span<const double> obs, Rng& rng) const {
    return inner.member_action(member, obs, rng);
  }
  env::Action aggregate(std::span<const double> obs, Rng& rng) const { return member_action(0, obs, rng); }
};

/// Active / passive eval series of a tandem pair.
inline constexpr const char* kRoleNames[2] = {"active", "passive"};

class Trainer {
 public:
  Trainer(RunConfig config, std::uint64_t seed)
      : config_(std::move(config)),
        seed_(seed),
        env_(env::make_env(config_.env)),
        eval_env_(env::make_env(config_.env)),
        buffer_(config_.buffer_capacity, config_.ensemble_size),
        log_(seed),
        act_rng_(make_stream(seed, "act")),
        schedule_rng_(make_stream(seed, "schedule")),
        env_rng_(make_stream(seed, "env")),
        mask_rng_(make_stream(seed, "mask")),
        replay_rng_(make_stream(seed, "replay")),
        train_rng_(make_stream(seed, "train")) {
    config_.validate();
    const std::uint64_t init_seed = derive_seed(seed, "init");
    const env::EnvSpec& spec = env_.spec();
    if (is_discrete(config_.algorithm)) {
      agent_.emplace<dqn::DqnEnsemble>(config_.dqn_config(), spec.observation_dim, spec.action_space.n, init_seed);
    } else {
      agent_.emplace<sac::SacEnsemble>(config_.sac_config(), spec, init_seed);
    }
    schedule_ = dqn::make_schedule(config_.switch_mode, config_.ensemble_size);
    if (config_.tandem_passive_pct) {
      const double p = *config_.tandem_passive_pct / 100.0;
      schedule_.weights = {1.0 - p, p};
      roles_log_.emplace(seed);
    }
    obs_ = env_.reset(env_rng_());
    evaluate_and_log();
  }

  const RunConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  std::int64_t step() const { return step_; }
  bool finished() const { return diverged_ || step_ >= config_.total_steps; }
  bool diverged() const { return diverged_; }
  const RunLog& log() const { return log_; }
  const std::optional<RunLog>& roles_log() const { return roles_log_; }
  const replay::ReplayBuffer& buffer() const { return buffer_; }
  const dqn::MemberSchedule& schedule() const { return schedule_; }
  std::uint64_t batch_digest() const { return batch_digest_; }
  bool is_discrete_agent() const { return std::holds_alternative<dqn::DqnEnsemble>(agent_); }
  dqn::DqnEnsemble& dqn() { return std::get<dqn::DqnEnsemble>(agent_); }
  const dqn::DqnEnsemble& dqn() const { return std::get<dqn::DqnEnsemble>(agent_); }
  sac::SacEnsemble& sac() { return std::get<sac::SacEnsemble>(agent_); }
  const sac::SacEnsemble& sac() const { return std::get<sac::SacEnsemble>(agent_); }

  /// Hash over parameters, optimizer moments, and buffer contents.
  std::uint64_t state_hash() const {
    std::uint64_t h = 0;
    auto mix_optim = [&h](const nn::OptimState& s) {
      h = nn::hash_params(s.second_moment, nn::hash_params(s.first_moment, h));
      h = splitmix64(h ^ static_cast<std::uint64_t>(s.step));
    };
    auto mix_grid_optim = [&](const ensemble::GridOptim& o) {
      mix_optim(o.trunk);
      for (const auto& e : o.encoders) mix_optim(e);
      for (const auto& row : o.heads)
        for (const auto& s : row) mix_optim(s);
    };
    if (is_discrete_agent()) {
      h = dqn().hash();
      mix_grid_optim(dqn().optimizer());
    } else {
      h = sac().hash();
      for (const auto& o : sac().critic_optimizers()) mix_grid_optim(o);
      for (const auto& o : sac().policy_optimizers()) mix_optim(o);
    }
    h = splitmix64(h ^ buffer_.total_pushed() ^ (buffer_.cursor() << 32));
    for (std::size_t i = 0; i < buffer_.size(); ++i) {
      const auto& t = buffer_.at(i);
      h = splitmix64(h ^ std::bit_cast<std::uint64_t>(t.reward) ^ static_cast<std::uint64_t>(t.generator_id));
    }
    return h;
  }

  /// Runs until `until_step` (capped at total_steps) or divergence.
  void run(std::int64_t until_step) {
    const std::int64_t stop = std::min(until_step, config_.total_steps);
    while (!diverged_ && step_ < stop) advance();
  }
  void run() { run(config_.total_steps); }

  /// Evaluation of the current networks in one mode; no state changes.
  agg::EvalResult evaluate(agg::EvalMode mode, std::size_t episodes, Rng& rng) const {
    env::Environment e = env::make_env(config_.env);
    return evaluate_in(e, mode, episodes, rng, nullptr);
  }

  template <typename Archive>
  void serialize(Archive& ar);

 private:
  void advance() {
    const std::size_t n = config_.ensemble_size;
    schedule_ = dqn::schedule_advance(schedule_, episode_start_, schedule_rng_);
    env::Action action;
    if (is_discrete_agent()) {
      const double eps = dqn::epsilon_at(step_, config_.total_steps, config_.epsilon_start, config_.epsilon_end,
                                         config_.epsilon_decay_fraction);
      action = env::Action::index(dqn::act_train(dqn(), obs_, schedule_, eps, act_rng_));
    } else if (step_ < config_.learning_starts) {
      const env::ActionSpace& as = env_.spec().action_space;
      std::vector<double> a(as.lo.size());
      for (std::size_t d = 0; d < a.size(); ++d) a[d] = uniform(act_rng_, as.lo[d], as.hi[d]);
      action = env::Action::vector(std::move(a));
    } else {
      action = env::Action::vector(sac().sample_action(schedule_.current, obs_, act_rng_, false).action);
    }

    env::StepResult r = env_.step(action);
    replay::Transition t;
    t.obs = obs_;
    t.action = action;
    t.reward = r.reward;
    t.next_obs = r.observation;
    t.terminal = r.terminal;
    t.truncated = r.truncated;
    t.generator_id = static_cast<std::uint32_t>(schedule_.current);
    t.bootstrap_mask = replay::draw_bootstrap_mask(mask_rng_, n, config_.mask_keep_prob);
    buffer_.push(std::move(t));
    episode_return_ += r.reward;
    ++step_;

    if (env_.episode_over()) {
      log_.append(step_, seed_, "train_return", episode_return_);
      episode_return_ = 0.0;
      obs_ = env_.reset(env_rng_());
      episode_start_ = true;
    } else {
      obs_ = std::move(r.observation);
      episode_start_ = false;
    }

    if (step_ >= config_.learning_starts && step_ % config_.train_period == 0) {
      try {
        train_once();
      } catch (const NumericError& e) {
        log_.append(step_, seed_, "diverged", 1.0);
        diverged_ = true;
        warning_sink()("seed " + std::to_string(seed_) + " diverged at step " + std::to_string(step_) + ": " + e.what());
        return;
      }
    }
    if (is_discrete_agent() && step_ % config_.target_update_period == 0) dqn().sync_targets();
    if (step_ % config_.eval_period == 0) evaluate_and_log();
  }

  void train_once() {
    const std::size_t n = config_.ensemble_size;
    std::vector<replay::Batch> batches;
    if (config_.self_sample_prob > 0.0) {
      for (std::size_t i = 0; i < n; ++i)
        batches.push_back(buffer_.sample_self_biased(i, config_.self_sample_prob, config_.batch_size, replay_rng_));
    } else {
      batches.push_back(buffer_.sample_uniform(config_.batch_size, replay_rng_));
    }
    for (const auto& b : batches)
      for (std::size_t s : b.slots) batch_digest_ = splitmix64(batch_digest_ ^ s);
    double loss = 0.0;
    if (is_discrete_agent()) {
      loss = dqn().train_step(batches).total;
    } else {
      loss = sac().train_step(batches, train_rng_).critic_loss;
      sac().soft_update_targets(config_.tau);
    }
    loss_sum_ += loss;
    loss_count_ += 1;
  }

  agg::EvalResult evaluate_in(env::Environment& e, agg::EvalMode mode, std::size_t episodes, Rng& rng,
                              std::vector<std::vector<std::size_t>>* votes,
                              std::optional<std::size_t> only = std::nullopt) const {
    if (is_discrete_agent()) {
      EpsilonDqnPolicy p{agg::DqnPolicy{dqn(), votes}, config_.eval_epsilon, only};
      return agg::evaluate(p, e, mode, episodes, rng);
    }
    const env::ActionSpace& as = e.spec().action_space;
    agg::SacPolicy p{sac(), as.lo, as.hi};
    if (only) return agg::evaluate(SingleSacPolicy{p, *only}, e, mode, episodes, rng);
    return agg::evaluate(p, e, mode, episodes, rng);
  }

  void evaluate_and_log() {
    const auto step_index = static_cast<std::uint64_t>(step_);
    std::vector<std::vector<std::size_t>> votes;
    Rng agg_rng = make_stream(seed_, "eval/agg", step_index);
    const agg::EvalResult a = evaluate_in(eval_env_, agg::EvalMode::aggregated, config_.eval_episodes, agg_rng,
                                          is_discrete_agent() ? &votes : nullptr);
    Rng indiv_rng = make_stream(seed_, "eval/indiv", step_index);
    const agg::EvalResult b = evaluate_in(eval_env_, agg::EvalMode::individual, config_.eval_episodes, indiv_rng, nullptr);
    log_.append(step_, seed_, "eval_agg", a.mean());
    log_.append(step_, seed_, "eval_indiv", b.mean());
    if (is_discrete_agent() && !votes.empty()) log_.append(step_, seed_, "vote_entropy", agg::vote_entropy(votes));
    if (loss_count_ > 0) {
      log_.append(step_, seed_, "loss", loss_sum_ / static_cast<double>(loss_count_));
      loss_sum_ = 0.0;
      loss_count_ = 0;
    }
    if (roles_log_) {
      for (std::size_t role = 0; role < 2; ++role) {
        Rng rng = make_stream(seed_, std::string("eval/") + kRoleNames[role], step_index);
        const agg::EvalResult r =
            evaluate_in(eval_env_, agg::EvalMode::individual, config_.eval_episodes, rng, nullptr, role);
        roles_log_->append(step_, seed_, kRoleNames[role], r.mean());
      }
    }
  }

  RunConfig config_;
  std::uint64_t seed_;
  env::Environment env_;
  env::Environment eval_env_;
  std::variant<std::monostate, dqn::DqnEnsemble, sac::SacEnsemble> agent_;
  replay::ReplayBuffer buffer_;
  RunLog log_;
  std::optional<RunLog> roles_log_;
  Rng act_rng_, schedule_rng_, env_rng_, mask_rng_, replay_rng_, train_rng_;
  dqn::MemberSchedule schedule_;
  std::vector<double> obs_;
  std::int64_t step_ = 0;
  double episode_return_ = 0.0;
  bool episode_start_ = true;
  bool diverged_ = false;
  double loss_sum_ = 0.0;
  std::int64_t loss_count_ = 0;
  std::uint64_t batch_digest_ = 0;
};

// ---------------------------------------------------------------------------
// State visitation for checkpoints. `ar` provides io() overloads for
// scalars, strings and double vectors, and section(name, fn).

template <typename Archive>
void visit(Archive& ar, nn::ParamSet& p) {
  for (auto& l : p.layers) {
    ar.io(l.weight);
    ar.io(l.bias);
  }
}

template <typename Archive>
void visit(Archive& ar, nn::OptimState& s) {
  visit(ar, s.first_moment);
  visit(ar, s.second_moment);
  ar.io(s.step);
}

template <typename Archive>
void visit(Archive& ar, ensemble::GridParams& g) {
  g.for_each([&ar](nn::ParamSet& p) { visit(ar, p); });
}

template <typename Archive>
void visit(Archive& ar, ensemble::GridOptim& o) {
  visit(ar, o.trunk);
  for (auto& e : o.encoders) visit(ar, e);
  for (auto& row : o.heads)
    for (auto& h : row) visit(ar, h);
}

template <typename Archive>
void visit(Archive& ar, Rng& rng) {
  std::string s = rng_state(rng);
  ar.io(s);
  if (Archive::loading) rng_restore(rng, s);
}

template <typename Archive>
void Trainer::serialize(Archive& ar) {
  ar.section("progress", [&] {
    ar.io(step_);
    ar.io(episode_return_);
    ar.io(episode_start_);
    ar.io(diverged_);
    ar.io(loss_sum_);
    ar.io(loss_count_);
    ar.io(batch_digest_);
    ar.io(obs_);
    std::uint64_t current = schedule_.current;
    ar.io(current);
    schedule_.current = static_cast<std::size_t>(current);
  });
  ar.section("rng", [&] {
    for (Rng* r : {&act_rng_, &schedule_rng_, &env_rng_, &mask_rng_, &replay_rng_, &train_rng_}) visit(ar, *r);
  });
  ar.section("env", [&] {
    std::vector<double> s = env_.save_state();
    ar.io(s);
    if (Archive::loading) env_.restore_state(s);
  });
  ar.section("agent", [&] {
    if (is_discrete_agent()) {
      auto& d = dqn();
      visit(ar, d.online());
      visit(ar, d.target());
      visit(ar, d.optimizer());
    } else {
      auto& s = sac();
      for (std::size_t k = 0; k < 2; ++k) {
        visit(ar, s.critic(k));
        visit(ar, s.critic_target(k));
        visit(ar, s.critic_optimizer(k));
      }
      for (std::size_t i = 0; i < s.members(); ++i) {
        visit(ar, s.policy(i));
        visit(ar, s.policy_optimizer(i));
      }
      ar.io(s.log_alpha());
      for (auto& a : s.alpha_optimizer()) {
        ar.io(a.m);
        ar.io(a.v);
        ar.io(a.step);
      }
    }
  });
  ar.section("buffer", [&] {
    std::vector<replay::Transition> storage = buffer_.raw_storage();
    std::uint64_t count = storage.size();
    ar.io(count);
    storage.resize(static_cast<std::size_t>(count));
    for (auto& t : storage) {
      ar.io(t.obs);
      std::int64_t discrete = t.action.discrete;
      ar.io(discrete);
      t.action.discrete = static_cast<int>(discrete);
      ar.io(t.action.continuous);
      ar.io(t.reward);
      ar.io(t.next_obs);
      ar.io(t.terminal);
      ar.io(t.truncated);
      std::uint64_t gen = t.generator_id;
      ar.io(gen);
      t.generator_id = static_cast<std::uint32_t>(gen);
      std::string mask(t.bootstrap_mask.begin(), t.bootstrap_mask.end());
      ar.io(mask);
      t.bootstrap_mask.assign(mask.begin(), mask.end());
    }
    std::uint64_t cursor = buffer_.cursor();
    std::uint64_t pushed = buffer_.total_pushed();
    ar.io(cursor);
    ar.io(pushed);
    std::vector<std::vector<std::size_t>> slots = buffer_.member_slots();
    for (auto& list : slots) {
      std::vector<double> as_double(list.begin(), list.end());
      ar.io(as_double);
      list.assign(as_double.size(), 0);
      for (std::size_t k = 0; k < list.size(); ++k) list[k] = static_cast<std::size_t>(as_double[k]);
    }
    if (Archive::loading) buffer_.restore(std::move(storage), static_cast<std::size_t>(cursor), pushed, std::move(slots));
  });
  ar.section("log", [&] {
    std::string csv = log_.to_csv();
    ar.io(csv);
    if (Archive::loading) log_ = RunLog::from_csv(csv, "checkpoint");
    std::string roles = roles_log_ ? roles_log_->to_csv() : std::string();
    ar.io(roles);
    if (Archive::loading && !roles.empty()) roles_log_ = RunLog::from_csv(roles, "checkpoint");
  });
}

/// Config for a p%-tandem pair built from a base config: the same
/// hyperparameters as a two-member ensemble.
inline RunConfig tandem_config(RunConfig base, double passive_pct) {
  DIVRL_REQUIRE(passive_pct >= 0.0 && passive_pct <= 100.0, ConfigError, "passive_pct must lie in [0, 100]");
  if (base.algorithm == Algorithm::double_dqn) base.algorithm = Algorithm::boot_dqn;
  if (base.algorithm == Algorithm::sac) base.algorithm = Algorithm::ensemble_sac;
  base.ensemble_size = 2;
  base.tandem_passive_pct = passive_pct;
  base.validate();
  return base;
}

/// Returns 0 (active) or 1 (passive); passive with probability p / 100.
inline std::size_t pick_actor(double passive_pct, Rng& rng) {
  DIVRL_REQUIRE(passive_pct >= 0.0 && passive_pct <= 100.0, ConfigError, "passive_pct must lie in [0, 100]");
  const double p = passive_pct / 100.0;
  return categorical(rng, std::vector<double>{1.0 - p, p});
}

struct TandemResult {
  RunLog log;    // identical in form to a two-member ensemble log
  RunLog roles;  // active / passive eval series
};

inline TandemResult run_tandem(const RunConfig& base, double passive_pct, std::uint64_t seed) {
  Trainer t(tandem_config(base, passive_pct), seed);
  t.run();
  return {t.log(), *t.roles_log()};
}

}  // namespace divrl::run

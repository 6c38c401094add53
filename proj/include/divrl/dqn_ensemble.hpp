#pragma once

// Discrete-action ensemble: Bootstrapped DQN with Double DQN updates, CERL
// auxiliary heads (and the self-target variant), multi-horizon auxiliary
// heads, bottom-layer sharing, and the acting-member schedule.
//
// A single-agent Double DQN is this ensemble with N = 1; there is no
// separate code path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "divrl/autodiff.hpp"
#include "divrl/error.hpp"
#include "divrl/head_grid.hpp"
#include "divrl/replay.hpp"
#include "divrl/rng.hpp"

namespace divrl::dqn {

using ensemble::HeadMode;
using replay::Batch;
using replay::Transition;

/// gamma_i = 1 - 1 / (i * H_max / K), i = 1..K. The last entry is the
/// longest horizon and drives acting.
inline std::vector<double> mh_gammas(std::size_t count, double max_horizon) {
  DIVRL_REQUIRE(count >= 1, ConfigError, "multi-horizon head count K must be >= 1");
  DIVRL_REQUIRE(max_horizon >= static_cast<double>(count), ConfigError, "multi-horizon H_max must be >= K");
  const double unit = max_horizon / static_cast<double>(count);
  DIVRL_REQUIRE(unit > 1.0, ConfigError, "H_max / K must exceed 1 so that gamma_1 > 0");
  std::vector<double> g(count);
  for (std::size_t i = 1; i <= count; ++i) g[i - 1] = 1.0 - 1.0 / (static_cast<double>(i) * unit);
  return g;
}

struct DqnConfig {
  std::size_t members = 1;
  std::size_t shared_layers = 0;
  std::vector<std::size_t> hidden{64, 64};
  nn::Activation activation = nn::Activation::relu;
  HeadMode head_mode = HeadMode::plain;
  std::size_t mh_heads = 10;
  double mh_max_horizon = 100.0;
  double gamma = 0.99;
  bool huber_aux = false;  // Huber instead of squared error on auxiliary heads
  double huber_threshold = 10.0;
  nn::AdamConfig adam;
};

/// Mean loss per (member, head slot) of one update.
struct TrainReport {
  std::vector<std::vector<double>> head_loss;
  double total = 0.0;
};

inline std::size_t argmax_lowest(std::span<const double> q) {
  std::size_t best = 0;
  for (std::size_t a = 1; a < q.size(); ++a)
    if (q[a] > q[best]) best = a;
  return best;
}

class DqnEnsemble {
 public:
  DqnEnsemble(const DqnConfig& config, std::size_t obs_dim, std::size_t n_actions, std::uint64_t seed)
      : config_(config) {
    DIVRL_REQUIRE(n_actions >= 2, ConfigError, "discrete ensembles need at least two actions");
    layout_.members = config.members;
    layout_.shared_layers = config.shared_layers;
    layout_.hidden = config.hidden;
    layout_.input_dim = obs_dim;
    layout_.output_dim = n_actions;
    layout_.activation = config.activation;
    layout_.mode = config.head_mode;
    switch (config.head_mode) {
      case HeadMode::plain: layout_.heads_per_member = 1; break;
      case HeadMode::cerl:
      case HeadMode::cerl_self_target: layout_.heads_per_member = config.members; break;
      case HeadMode::multi_horizon: layout_.heads_per_member = config.mh_heads; break;
    }
    layout_.validate();
    if (config.head_mode == HeadMode::multi_horizon) {
      slot_gamma_ = mh_gammas(config.mh_heads, config.mh_max_horizon);
    } else {
      slot_gamma_.assign(layout_.heads_per_member, config.gamma);
    }
    online_ = ensemble::init_grid(layout_, seed, "q");
    target_ = online_;
    optim_ = ensemble::make_grid_optim(online_, config.adam);
  }

  const DqnConfig& config() const { return config_; }
  const ensemble::GridLayout& layout() const { return layout_; }
  std::size_t members() const { return layout_.members; }
  std::size_t action_count() const { return layout_.output_dim; }
  HeadMode head_mode() const { return layout_.mode; }
  const std::vector<double>& slot_gammas() const { return slot_gamma_; }

  ensemble::GridParams& online() { return online_; }
  const ensemble::GridParams& online() const { return online_; }
  ensemble::GridParams& target() { return target_; }
  const ensemble::GridParams& target() const { return target_; }
  ensemble::GridOptim& optimizer() { return optim_; }
  const ensemble::GridOptim& optimizer() const { return optim_; }

  std::uint64_t hash() const { return target_.hash(online_.hash()); }

  /// Online values of head `slot` of `member`.
  std::vector<double> q_values(std::size_t member, std::size_t slot, std::span<const double> obs) const {
    return ensemble::evaluate_head(online_, member, slot, obs);
  }
  std::vector<double> main_q(std::size_t member, std::span<const double> obs) const {
    return q_values(member, layout_.main_slot(member), obs);
  }

  /// argmax over the main head, ties to the lowest action index.
  int greedy_action(std::size_t member, std::span<const double> obs) const {
    DIVRL_REQUIRE(member < members(), ContractViolation, "member index out of range");
    const auto q = main_q(member, obs);
    return static_cast<int>(argmax_lowest(q));
  }

  /// y = r on termination, else r + gamma * Qbar_j^j(s', argmax_a Q_j^j(s', a)).
  double double_dqn_target(std::size_t member, const Transition& t) const {
    DIVRL_REQUIRE(member < members(), ContractViolation, "member index out of range");
    if (t.terminal) return t.reward;
    const std::size_t slot = layout_.main_slot(member);
    const auto online_q = ensemble::evaluate_head(online_, member, slot, t.next_obs);
    const std::size_t a = argmax_lowest(online_q);
    const auto target_q = ensemble::evaluate_head(target_, member, slot, t.next_obs);
    return t.reward + slot_gamma_[slot] * target_q[a];
  }

  /// target[i][j] = double_dqn_target(j): every row holds the same column values.
  std::vector<std::vector<double>> cerl_targets(const Transition& t) const {
    DIVRL_REQUIRE(layout_.mode == HeadMode::cerl, ContractViolation, "cerl_targets requires head_mode = cerl");
    std::vector<double> column(members());
    for (std::size_t j = 0; j < members(); ++j) column[j] = double_dqn_target(j, t);
    return std::vector<std::vector<double>>(members(), column);
  }

  /// target[i][j] = r + gamma * Qbar_i^j(s', a'_j), a'_j greedy for member j's
  /// online main head.
  std::vector<std::vector<double>> cerl_self_targets(const Transition& t) const {
    DIVRL_REQUIRE(layout_.mode == HeadMode::cerl_self_target, ContractViolation,
                  "cerl_self_targets requires head_mode = cerl_self_target");
    const std::size_t n = members();
    std::vector<std::vector<double>> out(n, std::vector<double>(n, t.reward));
    if (t.terminal) return out;
    std::vector<std::size_t> next_action(n);
    for (std::size_t j = 0; j < n; ++j) next_action[j] = argmax_lowest(main_q(j, t.next_obs));
    ensemble::MemberPass pass;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& f = ensemble::member_features(target_, i, t.next_obs, pass);
      for (std::size_t j = 0; j < n; ++j) {
        const auto& q = ensemble::head_output(target_, i, j, f, pass);
        out[i][j] = t.reward + slot_gamma_[j] * q[next_action[j]];
      }
    }
    return out;
  }

  /// Regression targets for every head slot of `member` on transition `t`.
  std::vector<double> head_targets(std::size_t member, const Transition& t) const {
    const std::size_t heads = layout_.heads_per_member;
    switch (layout_.mode) {
      case HeadMode::plain: return {double_dqn_target(member, t)};
      case HeadMode::cerl: {
        std::vector<double> y(heads);
        for (std::size_t j = 0; j < heads; ++j) y[j] = double_dqn_target(j, t);
        return y;
      }
      case HeadMode::cerl_self_target: {
        std::vector<double> y(heads, t.reward);
        if (t.terminal) return y;
        ensemble::MemberPass pass;
        const auto& f = ensemble::member_features(target_, member, t.next_obs, pass);
        for (std::size_t j = 0; j < heads; ++j) {
          const std::size_t a = argmax_lowest(main_q(j, t.next_obs));
          y[j] = t.reward + slot_gamma_[j] * ensemble::head_output(target_, member, j, f, pass)[a];
        }
        return y;
      }
      case HeadMode::multi_horizon: {
        std::vector<double> y(heads, t.reward);
        if (t.terminal) return y;
        ensemble::MemberPass on, tg;
        const auto& fo = ensemble::member_features(online_, member, t.next_obs, on);
        const auto& ft = ensemble::member_features(target_, member, t.next_obs, tg);
        for (std::size_t k = 0; k < heads; ++k) {
          const std::size_t a = argmax_lowest(ensemble::head_output(online_, member, k, fo, on));
          y[k] = t.reward + slot_gamma_[k] * ensemble::head_output(target_, member, k, ft, tg)[a];
        }
        return y;
      }
    }
    return {};
  }

  /// One gradient step. `batches` holds either one batch shared by every
  /// member or one batch per member. Targets are constants computed from the
  /// pre-update parameters; target networks are not modified.
  TrainReport train_step(std::span<const Batch> batches) {
    const std::size_t n = members();
    const std::size_t heads = layout_.heads_per_member;
    DIVRL_REQUIRE(batches.size() == 1 || batches.size() == n, ContractViolation,
                  "train_step expects one shared batch or one batch per member");
    for (const auto& b : batches) DIVRL_REQUIRE(!b.empty(), ContractViolation, "train_step: empty batch");

    if (!grad_) grad_.emplace(online_);
    grad_->reset();
    TrainReport report;
    report.head_loss.assign(n, std::vector<double>(heads, 0.0));

    // CERL column targets do not depend on the row, so with a shared batch
    // each transition's N targets are computed once.
    const bool shared_columns = batches.size() == 1 && layout_.mode == HeadMode::cerl;
    std::vector<std::vector<double>> column_cache;
    if (shared_columns) column_cache.resize(batches[0].size());

    ensemble::MemberPass pass;
    std::vector<std::vector<double>> head_grads(heads);
    for (std::size_t i = 0; i < n; ++i) {
      const Batch& batch = batches.size() == 1 ? batches[0] : batches[i];
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const Transition& t = batch[b];
        DIVRL_REQUIRE(t.bootstrap_mask.size() == n, ContractViolation, "bootstrap mask length must equal N");
        if (!t.bootstrap_mask[i]) continue;
        DIVRL_REQUIRE(t.action.discrete >= 0 && static_cast<std::size_t>(t.action.discrete) < action_count(),
                      ContractViolation, "transition action outside the action space");
        std::vector<double> targets;
        if (shared_columns) {
          if (column_cache[b].empty()) column_cache[b] = head_targets(i, t);
          targets = column_cache[b];
        } else {
          targets = head_targets(i, t);
        }
        const auto& features = ensemble::member_features(online_, i, t.obs, pass);
        const auto a = static_cast<std::size_t>(t.action.discrete);
        for (std::size_t h = 0; h < heads; ++h) {
          const auto& q = ensemble::head_output(online_, i, h, features, pass);
          const nn::LossGrad lg = head_loss(i, h, q[a], targets[h]);
          report.head_loss[i][h] += lg.loss * inv_b;
          head_grads[h].assign(action_count(), 0.0);
          head_grads[h][a] = lg.grad * inv_b;
        }
        ensemble::member_backward(online_, i, pass, head_grads, *grad_);
      }
    }
    for (const auto& row : report.head_loss)
      for (double l : row) report.total += l;
    DIVRL_REQUIRE(std::isfinite(report.total), NumericError, "train_step: non-finite loss");
    ensemble::apply_gradient(layout_, online_, *grad_, optim_);
    return report;
  }

  void sync_targets() { target_ = online_; }

  /// Loss used by head (member, slot): squared error, or Huber on CERL
  /// auxiliary heads when configured.
  nn::LossGrad head_loss(std::size_t member, std::size_t slot, double prediction, double target) const {
    const bool aux = (layout_.mode == HeadMode::cerl || layout_.mode == HeadMode::cerl_self_target) &&
                     slot != layout_.main_slot(member);
    if (aux && config_.huber_aux) return nn::huber(prediction, target, config_.huber_threshold);
    return nn::squared_error(prediction, target);
  }

 private:
  DqnConfig config_;
  ensemble::GridLayout layout_;
  std::vector<double> slot_gamma_;
  ensemble::GridParams online_;
  ensemble::GridParams target_;
  ensemble::GridOptim optim_;
  std::optional<ensemble::GridGradient> grad_;  // scratch, not part of the state
};

// ---------------------------------------------------------------------------
// Acting

enum class SwitchMode : std::uint8_t { per_episode, per_step };

inline SwitchMode switch_mode_from_string(const std::string& s) {
  if (s == "per_episode") return SwitchMode::per_episode;
  if (s == "per_step") return SwitchMode::per_step;
  throw ConfigError("unknown switch_mode '" + s + "'");
}

inline const char* to_string(SwitchMode m) { return m == SwitchMode::per_episode ? "per_episode" : "per_step"; }

/// Which member acts. `weights` is the acting distribution (uniform for
/// Bootstrapped DQN, {1 - p, p} for the tandem pair).
struct MemberSchedule {
  SwitchMode mode = SwitchMode::per_episode;
  std::size_t current = 0;
  std::vector<double> weights{1.0};

  bool operator==(const MemberSchedule&) const = default;
};

inline MemberSchedule make_schedule(SwitchMode mode, std::size_t members) {
  DIVRL_REQUIRE(members >= 1, ConfigError, "schedule needs at least one member");
  return MemberSchedule{mode, 0, std::vector<double>(members, 1.0 / static_cast<double>(members))};
}

/// per_episode resamples only at episode boundaries; per_step every call.
inline MemberSchedule schedule_advance(MemberSchedule s, bool episode_boundary, Rng& rng) {
  if (s.mode == SwitchMode::per_step || episode_boundary) s.current = categorical(rng, s.weights);
  return s;
}

/// Epsilon-greedy on the scheduled member's main head. Always consumes one
/// uniform draw, plus one more when exploring.
inline int act_train(const DqnEnsemble& ens, std::span<const double> obs, const MemberSchedule& schedule,
                     double epsilon, Rng& rng) {
  DIVRL_REQUIRE(schedule.current < ens.members(), ContractViolation, "scheduled member out of range");
  if (uniform01(rng) < epsilon) return static_cast<int>(uniform_index(rng, ens.action_count()));
  return ens.greedy_action(schedule.current, obs);
}

inline int greedy_policy(const DqnEnsemble& ens, std::size_t member, std::span<const double> obs) {
  return ens.greedy_action(member, obs);
}

/// Linear decay from `start` to `end` over the first `fraction` of
/// `total_steps`, then constant.
inline double epsilon_at(std::int64_t step, std::int64_t total_steps, double start, double end, double fraction) {
  const double decay_steps = std::max(1.0, fraction * static_cast<double>(total_steps));
  const double progress = std::min(1.0, static_cast<double>(step) / decay_steps);
  return start + (end - start) * progress;
}

}  // namespace divrl::dqn

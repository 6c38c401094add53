#pragma once

// Continuous-action ensemble: SAC members with tanh-Gaussian policies and
// clipped double-Q critics, optionally with CERL auxiliary critic heads.
// Single-agent SAC is this ensemble with N = 1.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "divrl/autodiff.hpp"
#include "divrl/environments.hpp"
#include "divrl/error.hpp"
#include "divrl/head_grid.hpp"
#include "divrl/replay.hpp"
#include "divrl/rng.hpp"

namespace divrl::sac {

using ensemble::HeadMode;
using replay::Batch;
using replay::Transition;

struct SacConfig {
  std::size_t members = 1;
  std::size_t shared_layers = 0;
  std::vector<std::size_t> hidden{64, 64};         // critic encoder
  std::vector<std::size_t> policy_hidden{64, 64};  // actor
  HeadMode head_mode = HeadMode::plain;            // plain or cerl
  double gamma = 0.99;
  double alpha = 0.2;
  bool auto_alpha = false;
  double target_entropy = 0.0;  // 0 selects -(action dim)
  double log_std_min = -20.0;
  double log_std_max = 2.0;
  double huber_threshold = 10.0;  // CERL auxiliary critic loss
  bool aux_critic_pairs = true;   // aux heads trained in both critics
  nn::AdamConfig adam;
};

/// One reparameterised draw from a member's squashed Gaussian policy.
struct TanhGaussianSample {
  std::vector<double> pre_squash;  // u = mu + sigma * eps
  std::vector<double> action;      // center + scale * tanh(u)
  double log_prob = 0.0;
  std::vector<double> noise;  // eps (zero when deterministic)
  std::vector<double> mean;
  std::vector<double> log_std;
  std::vector<double> raw_log_std;
};

struct ActorLoss {
  double loss = 0.0;
  nn::ParamSet gradient;       // d loss / d policy params
  double mean_log_prob = 0.0;  // over the batch, for the temperature update
};

struct TrainReport {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double alpha = 0.0;
};

inline constexpr double kSquashEps = 1e-6;

class SacEnsemble {
 public:
  SacEnsemble(const SacConfig& config, const env::EnvSpec& spec, std::uint64_t seed) : config_(config) {
    DIVRL_REQUIRE(!spec.action_space.is_discrete(), ConfigError, "SAC needs a continuous action space");
    DIVRL_REQUIRE(config.head_mode == HeadMode::plain || config.head_mode == HeadMode::cerl, ConfigError,
                  "SAC supports head_mode plain or cerl");
    DIVRL_REQUIRE(config.log_std_min < config.log_std_max, ConfigError, "log_std_min must be below log_std_max");
    obs_dim_ = spec.observation_dim;
    act_dim_ = spec.action_space.lo.size();
    for (std::size_t d = 0; d < act_dim_; ++d) {
      const double lo = spec.action_space.lo[d], hi = spec.action_space.hi[d];
      DIVRL_REQUIRE(lo < hi, ConfigError, "box bounds must satisfy lo < hi");
      center_.push_back(0.5 * (hi + lo));
      scale_.push_back(0.5 * (hi - lo));
    }
    layout_.members = config.members;
    layout_.heads_per_member = config.head_mode == HeadMode::cerl ? config.members : 1;
    layout_.shared_layers = config.shared_layers;
    layout_.hidden = config.hidden;
    layout_.input_dim = obs_dim_ + act_dim_;
    layout_.output_dim = 1;
    layout_.mode = config.head_mode;
    layout_.validate();
    for (std::size_t k = 0; k < 2; ++k) {
      critic_[k] = ensemble::init_grid(layout_, seed, "critic" + std::to_string(k));
      critic_target_[k] = critic_[k];
      critic_optim_[k] = ensemble::make_grid_optim(critic_[k], config.adam);
    }
    for (std::size_t i = 0; i < config.members; ++i) {
      Rng rng = make_stream(seed, "policy/" + std::to_string(i));
      policy_.push_back(nn::make_mlp(obs_dim_, config.policy_hidden, 2 * act_dim_, nn::Activation::relu,
                                     nn::Activation::identity, rng));
      policy_optim_.push_back(nn::make_optim_state(policy_.back(), config.adam));
    }
    log_alpha_.assign(config.members, std::log(config.alpha));
    alpha_optim_.assign(config.members, nn::ScalarAdam{0.0, 0.0, 0, config.adam});
    target_entropy_ = config.target_entropy != 0.0 ? config.target_entropy : -static_cast<double>(act_dim_);
  }

  const SacConfig& config() const { return config_; }
  const ensemble::GridLayout& layout() const { return layout_; }
  std::size_t members() const { return layout_.members; }
  std::size_t action_dim() const { return act_dim_; }
  std::size_t obs_dim() const { return obs_dim_; }
  double alpha(std::size_t member) const { return std::exp(log_alpha_.at(member)); }
  double target_entropy() const { return target_entropy_; }

  ensemble::GridParams& critic(std::size_t k) { return critic_.at(k); }
  const ensemble::GridParams& critic(std::size_t k) const { return critic_.at(k); }
  ensemble::GridParams& critic_target(std::size_t k) { return critic_target_.at(k); }
  const ensemble::GridParams& critic_target(std::size_t k) const { return critic_target_.at(k); }
  ensemble::GridOptim& critic_optimizer(std::size_t k) { return critic_optim_.at(k); }
  nn::ParamSet& policy(std::size_t i) { return policy_.at(i); }
  const nn::ParamSet& policy(std::size_t i) const { return policy_.at(i); }
  nn::OptimState& policy_optimizer(std::size_t i) { return policy_optim_.at(i); }
  std::vector<double>& log_alpha() { return log_alpha_; }
  const std::vector<double>& log_alpha() const { return log_alpha_; }
  std::vector<nn::ScalarAdam>& alpha_optimizer() { return alpha_optim_; }
  const std::vector<nn::ScalarAdam>& alpha_optimizer() const { return alpha_optim_; }
  const std::vector<nn::OptimState>& policy_optimizers() const { return policy_optim_; }
  const std::array<ensemble::GridOptim, 2>& critic_optimizers() const { return critic_optim_; }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t k = 0; k < 2; ++k) h = critic_target_[k].hash(critic_[k].hash(h));
    for (const auto& p : policy_) h = nn::hash_params(p, h);
    for (double a : log_alpha_) h = splitmix64(h ^ std::bit_cast<std::uint64_t>(a));
    return h;
  }

  // -------------------------------------------------------------------------
  // Policy

  /// Log-std mapped smoothly into [log_std_min, log_std_max].
  double squash_log_std(double raw) const {
    return config_.log_std_min + 0.5 * (config_.log_std_max - config_.log_std_min) * (std::tanh(raw) + 1.0);
  }

  /// Draws a ~ pi_member(.|obs). Deterministic mode returns center + scale * tanh(mu).
  TanhGaussianSample sample_action(std::size_t member, std::span<const double> obs, Rng& rng,
                                   bool deterministic) const {
    nn::Tape tape;
    return sample_with_tape(member, obs, rng, deterministic, tape);
  }

  /// log pi(a|obs) for a given in-bounds action, with the same +1e-6 correction.
  double log_prob_of(std::size_t member, std::span<const double> obs, std::span<const double> action) const {
    nn::Tape tape;
    nn::forward_into(policy_.at(member), obs, tape);
    double lp = 0.0;
    for (std::size_t d = 0; d < act_dim_; ++d) {
      const double y = std::clamp((action[d] - center_[d]) / scale_[d], -1.0 + 1e-15, 1.0 - 1e-15);
      const double u = std::atanh(y);
      const double ls = squash_log_std(tape.output[act_dim_ + d]);
      const double eps = (u - tape.output[d]) / std::exp(ls);
      lp += gaussian_term(eps, ls) - std::log(1.0 - y * y + kSquashEps) - std::log(scale_[d]);
    }
    return lp;
  }

  // -------------------------------------------------------------------------
  // Critics

  double q_value(const ensemble::GridParams& grid, std::size_t member, std::size_t slot,
                 std::span<const double> obs, std::span<const double> action) const {
    const auto in = concat(obs, action);
    return ensemble::evaluate_head(grid, member, slot, in)[0];
  }

  /// y = r on termination, else r + gamma (min_k Qbar_j,k(s', a') - alpha_j log pi_j(a'|s')), a' ~ pi_j.
  double critic_target_value(std::size_t member, const Transition& t, Rng& rng) const {
    DIVRL_REQUIRE(member < members(), ContractViolation, "member index out of range");
    if (t.terminal) return t.reward;
    const TanhGaussianSample next = sample_action(member, t.next_obs, rng, false);
    const std::size_t slot = layout_.main_slot(member);
    const double q1 = q_value(critic_target_[0], member, slot, t.next_obs, next.action);
    const double q2 = q_value(critic_target_[1], member, slot, t.next_obs, next.action);
    return t.reward + config_.gamma * (std::min(q1, q2) - alpha(member) * next.log_prob);
  }

  /// Loss applied to cell (member, slot): squared error on main heads, Huber
  /// on CERL auxiliary heads.
  nn::LossGrad cell_loss(std::size_t member, std::size_t slot, double prediction, double target) const {
    if (slot != layout_.main_slot(member)) return nn::huber(prediction, target, config_.huber_threshold);
    return nn::squared_error(prediction, target);
  }

  /// Per-critic N x N loss matrices for one transition under CERL. Column j
  /// shares one target (one action sample per column).
  std::array<std::vector<std::vector<double>>, 2> cerl_critic_losses(const Transition& t, Rng& rng) const {
    DIVRL_REQUIRE(layout_.mode == HeadMode::cerl, ContractViolation, "cerl_critic_losses requires head_mode = cerl");
    const std::size_t n = members();
    std::vector<double> column(n);
    for (std::size_t j = 0; j < n; ++j) column[j] = critic_target_value(j, t, rng);
    std::array<std::vector<std::vector<double>>, 2> out;
    const auto in = concat(t.obs, t.action.continuous);
    for (std::size_t k = 0; k < 2; ++k) {
      out[k].assign(n, std::vector<double>(n, 0.0));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          out[k][i][j] = cell_loss(i, j, ensemble::evaluate_head(critic_[k], i, j, in)[0], column[j]).loss;
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // Actor

  /// mean over the batch of alpha log pi(a|s) - min_k Q_i,k^i(s, a), a
  /// reparameterised. Only the main-head critics enter; their parameters get
  /// no gradient. `rng` supplies the noise, so equal generator states give
  /// common random numbers.
  ActorLoss actor_loss(std::size_t member, std::span<const std::vector<double>> observations, Rng& rng) const {
    DIVRL_REQUIRE(!observations.empty(), ContractViolation, "actor_loss: empty batch");
    ActorLoss out;
    out.gradient = nn::zeros_like(policy_.at(member));
    const double inv_b = 1.0 / static_cast<double>(observations.size());
    const double a_coef = alpha(member);
    const std::size_t slot = layout_.main_slot(member);
    nn::Tape tape;
    ensemble::MemberPass pass[2];
    std::vector<double> dout(2 * act_dim_);
    for (const auto& obs : observations) {
      const TanhGaussianSample s = sample_with_tape(member, obs, rng, false, tape);
      const auto in = concat(obs, s.action);
      double q[2];
      for (std::size_t k = 0; k < 2; ++k) {
        const auto& f = ensemble::member_features(critic_[k], member, in, pass[k]);
        q[k] = ensemble::head_output(critic_[k], member, slot, f, pass[k])[0];
      }
      const std::size_t kmin = q[1] < q[0] ? 1 : 0;
      const double one = 1.0;
      const auto dq_din = ensemble::member_input_gradient(critic_[kmin], member, slot, pass[kmin], {&one, 1});
      out.loss += (a_coef * s.log_prob - q[kmin]) * inv_b;
      out.mean_log_prob += s.log_prob * inv_b;
      for (std::size_t d = 0; d < act_dim_; ++d) {
        const double t = std::tanh(s.pre_squash[d]);
        const double sigma = std::exp(s.log_std[d]);
        const double k = 2.0 * t * (1.0 - t * t) / (1.0 - t * t + kSquashEps);
        const double da_du = scale_[d] * (1.0 - t * t);
        const double dq_da = dq_din[obs_dim_ + d];
        const double d_mean = a_coef * k - dq_da * da_du;
        const double d_logstd = a_coef * (-1.0 + k * sigma * s.noise[d]) - dq_da * da_du * sigma * s.noise[d];
        const double th = std::tanh(s.raw_log_std[d]);
        const double dlogstd_draw = 0.5 * (config_.log_std_max - config_.log_std_min) * (1.0 - th * th);
        dout[d] = d_mean * inv_b;
        dout[act_dim_ + d] = d_logstd * dlogstd_draw * inv_b;
      }
      nn::accumulate_backward(policy_[member], tape, dout, out.gradient, nullptr);
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // Update

  /// Critic step for every member and head cell, then actor and (optionally)
  /// temperature steps. Target critics are left alone; call soft_update_targets.
  TrainReport train_step(std::span<const Batch> batches, Rng& rng) {
    const std::size_t n = members();
    const std::size_t heads = layout_.heads_per_member;
    DIVRL_REQUIRE(batches.size() == 1 || batches.size() == n, ContractViolation,
                  "train_step expects one shared batch or one batch per member");
    for (const auto& b : batches) DIVRL_REQUIRE(!b.empty(), ContractViolation, "train_step: empty batch");
    TrainReport report;

    // Column targets: target j for a transition is shared by every row.
    auto column_targets = [&](const Transition& t) {
      std::vector<double> y(n);
      for (std::size_t j = 0; j < n; ++j) y[j] = critic_target_value(j, t, rng);
      return y;
    };
    std::vector<std::vector<std::vector<double>>> targets(batches.size());
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      for (std::size_t b = 0; b < batches[bi].size(); ++b) {
        const Transition& t = batches[bi][b];
        if (heads == 1) {
          // Plain heads only need their own member's target.
          std::vector<double> y(n, 0.0);
          for (std::size_t j = 0; j < n; ++j) {
            if (batches.size() == n && j != bi) continue;
            y[j] = critic_target_value(j, t, rng);
          }
          targets[bi].push_back(std::move(y));
        } else {
          targets[bi].push_back(column_targets(t));
        }
      }
    }

    for (std::size_t k = 0; k < 2; ++k) {
      if (!grad_[k]) grad_[k].emplace(critic_[k]);
      grad_[k]->reset();
    }
    ensemble::MemberPass pass;
    std::vector<std::vector<double>> head_grads(heads);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t bi = batches.size() == 1 ? 0 : i;
      const Batch& batch = batches[bi];
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const Transition& t = batch[b];
        DIVRL_REQUIRE(t.bootstrap_mask.size() == n, ContractViolation, "bootstrap mask length must equal N");
        if (!t.bootstrap_mask[i]) continue;
        const auto in = concat(t.obs, t.action.continuous);
        for (std::size_t k = 0; k < 2; ++k) {
          const auto& f = ensemble::member_features(critic_[k], i, in, pass);
          for (std::size_t h = 0; h < heads; ++h) {
            const bool main = h == layout_.main_slot(i);
            if (k == 1 && !main && !config_.aux_critic_pairs) {
              head_grads[h].clear();
              continue;
            }
            const double y = heads == 1 ? targets[bi][b][i] : targets[bi][b][h];
            const double q = ensemble::head_output(critic_[k], i, h, f, pass)[0];
            const nn::LossGrad lg = cell_loss(i, h, q, y);
            report.critic_loss += lg.loss * inv_b;
            head_grads[h].assign(1, lg.grad * inv_b);
          }
          ensemble::member_backward(critic_[k], i, pass, head_grads, *grad_[k]);
        }
      }
    }
    DIVRL_REQUIRE(std::isfinite(report.critic_loss), NumericError, "train_step: non-finite critic loss");
    for (std::size_t k = 0; k < 2; ++k) ensemble::apply_gradient(layout_, critic_[k], *grad_[k], critic_optim_[k]);

    std::vector<std::vector<double>> observations;
    for (std::size_t i = 0; i < n; ++i) {
      const Batch& batch = batches.size() == 1 ? batches[0] : batches[i];
      observations.clear();
      for (std::size_t b = 0; b < batch.size(); ++b)
        if (batch[b].bootstrap_mask[i]) observations.push_back(batch[b].obs);
      if (observations.empty()) continue;
      ActorLoss al = actor_loss(i, observations, rng);
      DIVRL_REQUIRE(std::isfinite(al.loss), NumericError, "train_step: non-finite actor loss");
      report.actor_loss += al.loss;
      nn::adam_step(policy_[i], al.gradient, policy_optim_[i]);
      if (config_.auto_alpha) {
        // d/d log_alpha of -log_alpha * (log pi + target_entropy)
        alpha_optim_[i].apply(log_alpha_[i], -(al.mean_log_prob + target_entropy_));
      }
    }
    for (std::size_t i = 0; i < n; ++i) report.alpha += alpha(i) / static_cast<double>(n);
    return report;
  }

  /// target <- tau * online + (1 - tau) * target for both critics.
  void soft_update_targets(double tau) {
    for (std::size_t k = 0; k < 2; ++k) ensemble::polyak(critic_target_[k], critic_[k], tau);
  }

 private:
  static double gaussian_term(double eps, double log_std) {
    return -0.5 * eps * eps - log_std - 0.5 * std::log(2.0 * std::numbers::pi);
  }

  std::vector<double> concat(std::span<const double> a, std::span<const double> b) const {
    std::vector<double> v;
    v.reserve(a.size() + b.size());
    v.insert(v.end(), a.begin(), a.end());
    v.insert(v.end(), b.begin(), b.end());
    return v;
  }

  TanhGaussianSample sample_with_tape(std::size_t member, std::span<const double> obs, Rng& rng,
                                      bool deterministic, nn::Tape& tape) const {
    DIVRL_REQUIRE(member < members(), ContractViolation, "member index out of range");
    DIVRL_REQUIRE(obs.size() == obs_dim_, ConfigError, "observation dimension mismatch");
    nn::forward_into(policy_[member], obs, tape);
    TanhGaussianSample s;
    s.mean.assign(tape.output.begin(), tape.output.begin() + static_cast<std::ptrdiff_t>(act_dim_));
    s.raw_log_std.assign(tape.output.begin() + static_cast<std::ptrdiff_t>(act_dim_), tape.output.end());
    s.log_std.resize(act_dim_);
    s.noise.assign(act_dim_, 0.0);
    s.pre_squash.resize(act_dim_);
    s.action.resize(act_dim_);
    for (std::size_t d = 0; d < act_dim_; ++d) {
      s.log_std[d] = squash_log_std(s.raw_log_std[d]);
      if (!deterministic) s.noise[d] = normal(rng);
      s.pre_squash[d] = s.mean[d] + std::exp(s.log_std[d]) * s.noise[d];
      const double t = std::tanh(s.pre_squash[d]);
      s.action[d] = std::clamp(center_[d] + scale_[d] * t, center_[d] - scale_[d], center_[d] + scale_[d]);
      s.log_prob += gaussian_term(s.noise[d], s.log_std[d]) - std::log(1.0 - t * t + kSquashEps) - std::log(scale_[d]);
    }
    return s;
  }

  SacConfig config_;
  ensemble::GridLayout layout_;
  std::size_t obs_dim_ = 0;
  std::size_t act_dim_ = 0;
  std::vector<double> center_;
  std::vector<double> scale_;
  std::array<ensemble::GridParams, 2> critic_;
  std::array<ensemble::GridParams, 2> critic_target_;
  std::array<ensemble::GridOptim, 2> critic_optim_;
  std::vector<nn::ParamSet> policy_;
  std::vector<nn::OptimState> policy_optim_;
  std::vector<double> log_alpha_;
  std::vector<nn::ScalarAdam> alpha_optim_;
  double target_entropy_ = -1.0;
  std::array<std::optional<ensemble::GridGradient>, 2> grad_;  // scratch
};

/// Free-function form used by the runner and tests.
inline TanhGaussianSample sample_action(const SacEnsemble& ens, std::size_t member, std::span<const double> obs,
                                        Rng& rng, bool deterministic) {
  return ens.sample_action(member, obs, rng, deterministic);
}

}  // namespace divrl::sac

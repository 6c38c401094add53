#pragma once

// Test-time policy aggregation (majority vote, action averaging), the vote
// entropy diversity metric, and the evaluation protocols built on them.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <vector>

#include "divrl/dqn_ensemble.hpp"
#include "divrl/environments.hpp"
#include "divrl/error.hpp"
#include "divrl/rng.hpp"
#include "divrl/sac_ensemble.hpp"

namespace divrl::agg {

enum class EvalMode : std::uint8_t { aggregated, individual };

inline const char* to_string(EvalMode m) { return m == EvalMode::aggregated ? "agg" : "indiv"; }

inline EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "agg" || s == "aggregated") return EvalMode::aggregated;
  if (s == "indiv" || s == "individual") return EvalMode::individual;
  throw ConfigError("unknown evaluation mode '" + s + "'");
}

/// Vote counts per action.
inline std::vector<std::size_t> vote_histogram(std::span<const int> actions, std::size_t n_actions) {
  std::vector<std::size_t> h(n_actions, 0);
  for (int a : actions) {
    DIVRL_REQUIRE(a >= 0 && static_cast<std::size_t>(a) < n_actions, ContractViolation, "vote outside the action space");
    ++h[static_cast<std::size_t>(a)];
  }
  return h;
}

/// Most-voted action; ties are broken uniformly at random. A strict majority
/// consumes no randomness.
inline int majority_vote(std::span<const int> actions, Rng& rng) {
  DIVRL_REQUIRE(!actions.empty(), ContractViolation, "majority_vote: no votes");
  const int top = *std::max_element(actions.begin(), actions.end());
  DIVRL_REQUIRE(*std::min_element(actions.begin(), actions.end()) >= 0, ContractViolation, "negative action vote");
  const auto h = vote_histogram(actions, static_cast<std::size_t>(top) + 1);
  const std::size_t best = *std::max_element(h.begin(), h.end());
  std::vector<int> tied;
  for (std::size_t a = 0; a < h.size(); ++a)
    if (h[a] == best) tied.push_back(static_cast<int>(a));
  if (tied.size() == 1) return tied[0];
  return tied[uniform_index(rng, tied.size())];
}

/// Per-dimension mean, clamped to [lo, hi] when bounds are given.
inline std::vector<double> average_action(std::span<const std::vector<double>> actions,
                                          std::span<const double> lo = {}, std::span<const double> hi = {}) {
  DIVRL_REQUIRE(!actions.empty(), ContractViolation, "average_action: no actions");
  const std::size_t d = actions[0].size();
  std::vector<double> mean(d, 0.0);
  for (const auto& a : actions) {
    DIVRL_REQUIRE(a.size() == d, ContractViolation, "average_action: dimension mismatch");
    for (std::size_t k = 0; k < d; ++k) mean[k] += a[k];
  }
  for (std::size_t k = 0; k < d; ++k) {
    mean[k] /= static_cast<double>(actions.size());
    if (!lo.empty()) mean[k] = std::clamp(mean[k], lo[k], hi[k]);
  }
  return mean;
}

/// Mean over states of the Shannon entropy (nats) of the normalized votes.
inline double vote_entropy(std::span<const std::vector<std::size_t>> histograms) {
  DIVRL_REQUIRE(!histograms.empty(), ContractViolation, "vote_entropy: no states");
  double total = 0.0;
  for (const auto& h : histograms) {
    std::size_t n = 0;
    for (std::size_t c : h) n += c;
    DIVRL_REQUIRE(n > 0, ContractViolation, "vote_entropy: empty histogram");
    double e = 0.0;
    for (std::size_t c : h) {
      if (c == 0) continue;
      const double p = static_cast<double>(c) / static_cast<double>(n);
      e -= p * std::log(p);
    }
    total += e;
  }
  return total / static_cast<double>(histograms.size());
}

// ---------------------------------------------------------------------------
// Evaluation

/// What evaluate() needs from an ensemble.
template <typename P>
concept EnsemblePolicy = requires(const P& p, std::size_t i, std::span<const double> obs, Rng& rng) {
  { p.members() } -> std::convertible_to<std::size_t>;
  { p.member_action(i, obs, rng) } -> std::same_as<env::Action>;
  { p.aggregate(obs, rng) } -> std::same_as<env::Action>;
};

/// Greedy main heads, combined by majority vote.
struct DqnPolicy {
  const dqn::DqnEnsemble& ens;
  std::vector<std::vector<std::size_t>>* votes = nullptr;  // filled in aggregated mode

  std::size_t members() const { return ens.members(); }
  env::Action member_action(std::size_t i, std::span<const double> obs, Rng&) const {
    return env::Action::index(ens.greedy_action(i, obs));
  }
  env::Action aggregate(std::span<const double> obs, Rng& rng) const {
    std::vector<int> a(ens.members());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = ens.greedy_action(i, obs);
    if (votes) votes->push_back(vote_histogram(a, ens.action_count()));
    return env::Action::index(majority_vote(a, rng));
  }
};

/// One stochastic policy sample per member, averaged.
struct SacPolicy {
  const sac::SacEnsemble& ens;
  std::span<const double> lo;
  std::span<const double> hi;

  std::size_t members() const { return ens.members(); }
  env::Action member_action(std::size_t i, std::span<const double> obs, Rng& rng) const {
    return env::Action::vector(ens.sample_action(i, obs, rng, false).action);
  }
  env::Action aggregate(std::span<const double> obs, Rng& rng) const {
    std::vector<std::vector<double>> a;
    a.reserve(ens.members());
    for (std::size_t i = 0; i < ens.members(); ++i) a.push_back(ens.sample_action(i, obs, rng, false).action);
    return env::Action::vector(average_action(a, lo, hi));
  }
};

struct EvalResult {
  std::vector<double> returns;  // undiscounted, one per episode

  double mean() const {
    double s = 0.0;
    for (double r : returns) s += r;
    return returns.empty() ? 0.0 : s / static_cast<double>(returns.size());
  }
};

/// Runs `episodes` episodes without learning. Aggregated mode combines every
/// member at every step; individual mode draws one member per episode.
/// Episode start seeds and member draws come from `rng`.
template <EnsemblePolicy P>
EvalResult evaluate(const P& policy, env::Environment& env, EvalMode mode, std::size_t episodes, Rng& rng) {
  DIVRL_REQUIRE(episodes >= 1, ConfigError, "evaluation needs at least one episode");
  EvalResult out;
  out.returns.reserve(episodes);
  for (std::size_t e = 0; e < episodes; ++e) {
    const std::uint64_t reset_seed = rng();
    std::size_t member = 0;
    if (mode == EvalMode::individual && policy.members() > 1) member = uniform_index(rng, policy.members());
    std::vector<double> obs = env.reset(reset_seed);
    double ret = 0.0;
    while (!env.episode_over()) {
      const env::Action a =
          mode == EvalMode::aggregated ? policy.aggregate(obs, rng) : policy.member_action(member, obs, rng);
      env::StepResult r = env.step(a);
      ret += r.reward;
      obs = std::move(r.observation);
    }
    out.returns.push_back(ret);
  }
  return out;
}

}  // namespace divrl::agg

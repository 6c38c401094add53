#pragma once

// Score normalization and the aggregate statistics used in reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "divrl/environments.hpp"
#include "divrl/error.hpp"
#include "divrl/rng.hpp"

namespace divrl::stats {

/// (raw - random) / (upper - random).
inline double normalized_score(double raw, double random_ref, double upper_ref) {
  if (upper_ref == random_ref) throw DegenerateReferenceError("normalized_score: reference equals random score");
  return (raw - random_ref) / (upper_ref - random_ref);
}

inline double mean(std::span<const double> v) {
  DIVRL_REQUIRE(!v.empty(), ContractViolation, "mean of an empty list");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Mean after dropping floor(n/4) values from each end of the sorted list.
inline double iqm(std::span<const double> values) {
  DIVRL_REQUIRE(!values.empty(), ContractViolation, "iqm of an empty list");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const std::size_t cut = v.size() / 4;
  return mean(std::span<const double>(v).subspan(cut, v.size() - 2 * cut));
}

enum class Statistic : std::uint8_t { mean, iqm };

inline double apply_statistic(Statistic s, std::span<const double> v) { return s == Statistic::mean ? mean(v) : iqm(v); }

/// Linear-interpolated quantile of sorted data, q in [0, 1].
inline double quantile_sorted(std::span<const double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

/// Percentile bootstrap interval of `statistic` at confidence `level`.
inline std::pair<double, double> bootstrap_ci(std::span<const double> values, std::size_t resamples, double level,
                                              Rng& rng, Statistic statistic = Statistic::mean) {
  DIVRL_REQUIRE(!values.empty(), ContractViolation, "bootstrap_ci of an empty list");
  DIVRL_REQUIRE(level > 0.0 && level < 1.0, ConfigError, "confidence level must lie in (0, 1)");
  DIVRL_REQUIRE(resamples >= 100, ConfigError, "bootstrap needs at least 100 resamples");
  std::vector<double> stats(resamples);
  std::vector<double> sample(values.size());
  for (std::size_t r = 0; r < resamples; ++r) {
    for (auto& s : sample) s = values[uniform_index(rng, values.size())];
    stats[r] = apply_statistic(statistic, sample);
  }
  std::sort(stats.begin(), stats.end());
  const double tail = 0.5 * (1.0 - level);
  return {quantile_sorted(stats, tail), quantile_sorted(stats, 1.0 - tail)};
}

/// Trailing moving average; the first points average the available prefix.
inline std::vector<double> smooth(std::span<const double> series, std::size_t window) {
  DIVRL_REQUIRE(window >= 1, ConfigError, "smoothing window must be >= 1");
  std::vector<double> out(series.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < series.size(); ++i) {
    acc += series[i];
    if (i >= window) acc -= series[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

/// task -> method -> seed -> eval series (in step order).
struct ScoreTable {
  struct Reference {
    double random_score = 0.0;
    double reference_score = 1.0;
  };
  std::map<std::string, std::map<std::string, std::map<std::uint64_t, std::vector<double>>>> scores;
  std::map<std::string, Reference> references;

  void add(const std::string& task, const std::string& method, std::uint64_t seed, std::vector<double> series) {
    scores[task][method][seed] = std::move(series);
  }
};

/// Mean of the last `last_k` points of one series.
inline double tail_mean(std::span<const double> series, std::size_t last_k) {
  DIVRL_REQUIRE(last_k >= 1, ConfigError, "last_k must be >= 1");
  DIVRL_REQUIRE(series.size() >= last_k, ContractViolation,
                "series has " + std::to_string(series.size()) + " points, fewer than last_k = " + std::to_string(last_k));
  return mean(series.subspan(series.size() - last_k));
}

/// Per-seed tail means, in seed order.
inline std::vector<double> per_seed_final(const ScoreTable& table, const std::string& task, const std::string& method,
                                          std::size_t last_k) {
  const auto t = table.scores.find(task);
  DIVRL_REQUIRE(t != table.scores.end(), ContractViolation, "unknown task '" + task + "'");
  const auto m = t->second.find(method);
  DIVRL_REQUIRE(m != t->second.end(), ContractViolation, "unknown method '" + method + "'");
  std::vector<double> out;
  for (const auto& [seed, series] : m->second) out.push_back(tail_mean(series, last_k));
  return out;
}

/// Mean over the last K eval points, then mean over seeds.
inline double final_score(const ScoreTable& table, const std::string& task, const std::string& method,
                          std::size_t last_k) {
  return mean(per_seed_final(table, task, method, last_k));
}

// ---------------------------------------------------------------------------
// Normalization references for the toy tasks

/// Best undiscounted return from the start state within the horizon
/// (backward induction over the remaining steps).
template <env::TabularTask T>
double optimal_return(const T& task, int horizon) {
  const int ns = task.num_states();
  const int na = static_cast<int>(task.spec().action_space.n);
  std::vector<double> v(static_cast<std::size_t>(ns), 0.0), next(v.size());
  for (int steps = 1; steps <= horizon; ++steps) {
    for (int s = 0; s < ns; ++s) {
      double best = -1e300;
      for (int a = 0; a < na; ++a) {
        const env::TabularStep st = task.transition(s, a);
        best = std::max(best, st.reward + (st.terminal ? 0.0 : v[static_cast<std::size_t>(st.next_state)]));
      }
      next[static_cast<std::size_t>(s)] = best;
    }
    v.swap(next);
  }
  return v[static_cast<std::size_t>(task.start_state())];
}

/// Optimal undiscounted return of the task; for point_mass_1d the mean over
/// `samples` start positions drawn from seeds 0..samples-1.
inline double optimal_return(const env::Environment& e, int samples = 16) {
  return std::visit(
      [&](const auto& task) -> double {
        using T = std::decay_t<decltype(task)>;
        if constexpr (std::is_same_v<T, env::PointMass1D>) {
          double s = 0.0;
          for (int i = 0; i < samples; ++i)
            s += env::point_mass_optimal_return(env::PointMass1D::start_position(static_cast<std::uint64_t>(i)));
          return s / samples;
        } else {
          return optimal_return(task, task.spec().horizon);
        }
      },
      e.task());
}

/// Monte Carlo return of the uniform random policy.
inline double random_policy_return(env::Environment e, std::size_t episodes, std::uint64_t seed) {
  Rng rng = make_stream(seed, "reference/random");
  const env::ActionSpace& as = e.spec().action_space;
  double total = 0.0;
  for (std::size_t k = 0; k < episodes; ++k) {
    e.reset(rng());
    while (!e.episode_over()) {
      env::Action a;
      if (as.is_discrete()) {
        a = env::Action::index(static_cast<int>(uniform_index(rng, as.n)));
      } else {
        std::vector<double> v(as.lo.size());
        for (std::size_t d = 0; d < v.size(); ++d) v[d] = uniform(rng, as.lo[d], as.hi[d]);
        a = env::Action::vector(std::move(v));
      }
      total += e.step(a).reward;
    }
  }
  return total / static_cast<double>(episodes);
}

}  // namespace divrl::stats

#pragma once

// Toy environments with exact oracles. Discrete tasks (deep_sea, chain,
// sparse_grid) expose their deterministic transition model so tests can run
// value iteration against them; point_mass_1d is a continuous control task
// with a convex trajectory-optimisation oracle.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "divrl/error.hpp"
#include "divrl/rng.hpp"

namespace divrl::env {

struct ActionSpace {
  enum class Kind : std::uint8_t { discrete, box };
  Kind kind = Kind::discrete;
  std::size_t n = 0;       // discrete action count
  std::vector<double> lo;  // box bounds, one entry per dimension
  std::vector<double> hi;

  bool is_discrete() const { return kind == Kind::discrete; }
  std::size_t dim() const { return is_discrete() ? 1 : lo.size(); }

  static ActionSpace discrete(std::size_t n) { return {Kind::discrete, n, {}, {}}; }
  static ActionSpace box(std::vector<double> lo, std::vector<double> hi) {
    return {Kind::box, 0, std::move(lo), std::move(hi)};
  }
};

struct EnvSpec {
  std::string name;
  std::size_t observation_dim = 0;
  ActionSpace action_space;
  int horizon = 1;
  double gamma = 0.99;
  double reward_min = 0.0;  // documented per-step reward bounds
  double reward_max = 0.0;
};

/// Either a discrete index or a continuous vector, depending on the space.
struct Action {
  int discrete = -1;
  std::vector<double> continuous;

  static Action index(int a) { return Action{a, {}}; }
  static Action vector(std::vector<double> v) { return Action{-1, std::move(v)}; }

  bool operator==(const Action&) const = default;
};

struct StepResult {
  std::vector<double> observation;
  double reward = 0.0;
  bool terminal = false;
  bool truncated = false;
};

/// Parameters accepted by make_env. Unused fields are ignored per task.
struct EnvConfig {
  std::string name = "chain";
  int size = 10;        // deep_sea
  int length = 5;       // chain
  int width = 5;        // sparse_grid
  int height = 5;       // sparse_grid
  int horizon = 0;      // 0 selects the task default
  double gamma = 0.99;
  bool randomize_actions = false;  // deep_sea per-cell action flip
  std::uint64_t mapping_seed = 0;  // seeds the deep_sea action flip
};

/// One deterministic transition of a finite task.
struct TabularStep {
  int next_state = -1;  // -1 after termination
  double reward = 0.0;
  bool terminal = false;
};

namespace detail {

inline void require_size(const char* what, int v) {
  DIVRL_REQUIRE(v >= 2 && v <= 64, ConfigError,
                std::string(what) + " must lie in [2, 64], got " + std::to_string(v));
}

inline std::vector<double> one_hot(std::size_t n, std::size_t k) {
  std::vector<double> v(n, 0.0);
  v[k] = 1.0;
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// size x size grid; the agent starts top-left and descends one row per step.
/// Action "right" moves one column right at a cost of 0.01/size; "left" moves
/// one column left for free. Taking "right" in the last column pays 1.0.
/// The episode terminates after `size` steps.
class DeepSea {
 public:
  DeepSea(int size, double gamma, bool randomize, std::uint64_t mapping_seed) : size_(size) {
    detail::require_size("deep_sea size", size);
    const double cost = 0.01 / size;
    spec_ = EnvSpec{"deep_sea", static_cast<std::size_t>(size * size), ActionSpace::discrete(2), size, gamma,
                    -cost, 1.0 - cost};
    right_action_.assign(static_cast<std::size_t>(size * size), 1);
    if (randomize) {
      Rng rng = make_stream(mapping_seed, "deep_sea/mapping");
      for (auto& a : right_action_) a = bernoulli(rng, 0.5) ? 1 : 0;
    }
  }

  const EnvSpec& spec() const { return spec_; }
  int num_states() const { return size_ * size_; }
  int start_state() const { return 0; }
  std::vector<double> observe(int state) const {
    return detail::one_hot(spec_.observation_dim, static_cast<std::size_t>(state));
  }
  /// Action index that moves right in `state`.
  int right_action(int state) const { return right_action_[static_cast<std::size_t>(state)]; }

  TabularStep transition(int state, int action) const {
    const int row = state / size_;
    int col = state % size_;
    const bool right = action == right_action(state);
    double reward = 0.0;
    if (right) {
      if (col == size_ - 1) reward += 1.0;
      col = std::min(col + 1, size_ - 1);
      reward -= 0.01 / size_;
    } else {
      col = std::max(col - 1, 0);
    }
    const int next_row = row + 1;
    if (next_row == size_) return {-1, reward, true};
    return {next_row * size_ + col, reward, false};
  }

  /// Observation reported with a terminal step: the last row, final column.
  std::vector<double> terminal_observation(int state, int action) const {
    const int col = state % size_;
    const bool right = action == right_action(state);
    const int c = right ? std::min(col + 1, size_ - 1) : std::max(col - 1, 0);
    return observe((size_ - 1) * size_ + c);
  }

  /// States reachable from the start: column <= row.
  bool reachable(int state) const { return state % size_ <= state / size_; }

 private:
  int size_;
  EnvSpec spec_;
  std::vector<int> right_action_;
};

/// Deterministic left/right chain of `length` states; taking "right" at the
/// right end pays 1 and terminates.
class Chain {
 public:
  Chain(int length, int horizon, double gamma) : length_(length) {
    detail::require_size("chain length", length);
    spec_ = EnvSpec{"chain", static_cast<std::size_t>(length), ActionSpace::discrete(2),
                    horizon > 0 ? horizon : 2 * length, gamma, 0.0, 1.0};
  }

  const EnvSpec& spec() const { return spec_; }
  int num_states() const { return length_; }
  int start_state() const { return 0; }
  std::vector<double> observe(int state) const {
    return detail::one_hot(spec_.observation_dim, static_cast<std::size_t>(state));
  }

  TabularStep transition(int state, int action) const {
    if (action == 1) {
      if (state == length_ - 1) return {-1, 1.0, true};
      return {state + 1, 0.0, false};
    }
    return {std::max(state - 1, 0), 0.0, false};
  }
  std::vector<double> terminal_observation(int state, int) const { return observe(state); }
  bool reachable(int) const { return true; }

 private:
  int length_;
  EnvSpec spec_;
};

/// width x height grid; start at (0,0), reward 1 and termination on reaching
/// (width-1, height-1). Actions: 0 up, 1 down, 2 left, 3 right.
class SparseGrid {
 public:
  SparseGrid(int width, int height, int horizon, double gamma) : width_(width), height_(height) {
    detail::require_size("sparse_grid width", width);
    detail::require_size("sparse_grid height", height);
    spec_ = EnvSpec{"sparse_grid", static_cast<std::size_t>(width * height), ActionSpace::discrete(4),
                    horizon > 0 ? horizon : 2 * (width + height), gamma, 0.0, 1.0};
  }

  const EnvSpec& spec() const { return spec_; }
  int num_states() const { return width_ * height_; }
  int start_state() const { return 0; }
  std::vector<double> observe(int state) const {
    return detail::one_hot(spec_.observation_dim, static_cast<std::size_t>(state));
  }

  TabularStep transition(int state, int action) const {
    int x = state % width_;
    int y = state / width_;
    switch (action) {
      case 0: y = std::min(y + 1, height_ - 1); break;
      case 1: y = std::max(y - 1, 0); break;
      case 2: x = std::max(x - 1, 0); break;
      default: x = std::min(x + 1, width_ - 1); break;
    }
    const int next = y * width_ + x;
    if (x == width_ - 1 && y == height_ - 1) return {-1, 1.0, true};
    return {next, 0.0, false};
  }
  std::vector<double> terminal_observation(int, int) const { return observe(num_states() - 1); }
  bool reachable(int) const { return true; }

 private:
  int width_;
  int height_;
  EnvSpec spec_;
};

/// 1-D point mass: state (x, v), force a in [-1, 1], dt = 0.1. Reward
/// -(x - goal)^2 after the move, goal = 1, horizon 100. Start x ~ U[-0.1, 0.1].
class PointMass1D {
 public:
  static constexpr double kDt = 0.1;
  static constexpr double kGoal = 1.0;
  static constexpr int kHorizon = 100;

  explicit PointMass1D(double gamma) {
    // |v| <= 0.1 t and |x| <= 0.1 + 0.01 * t(t+1)/2 bound the cost over 100 steps.
    const double max_dist = 0.1 + 0.01 * kHorizon * (kHorizon + 1) / 2.0 + kGoal;
    spec_ = EnvSpec{"point_mass_1d", 2, ActionSpace::box({-1.0}, {1.0}), kHorizon, gamma,
                    -max_dist * max_dist, 0.0};
  }

  const EnvSpec& spec() const { return spec_; }

  static double start_position(std::uint64_t seed) {
    Rng rng = make_stream(seed, "point_mass/start");
    return uniform(rng, -0.1, 0.1);
  }

  /// Pure dynamics: returns the next (x, v) and the reward.
  static std::pair<std::array<double, 2>, double> dynamics(double x, double v, double a) {
    const double nv = v + a * kDt;
    const double nx = x + nv * kDt;
    return {{nx, nv}, -(nx - kGoal) * (nx - kGoal)};
  }

 private:
  EnvSpec spec_;
};

// ---------------------------------------------------------------------------

template <typename T>
concept TabularTask = requires(const T& t, int s, int a) {
  { t.num_states() } -> std::convertible_to<int>;
  { t.transition(s, a) } -> std::same_as<TabularStep>;
  { t.observe(s) } -> std::same_as<std::vector<double>>;
};

/// Single-owner environment instance with the uniform reset/step interface.
class Environment {
 public:
  using Task = std::variant<DeepSea, Chain, SparseGrid, PointMass1D>;

  explicit Environment(Task task) : task_(std::move(task)) {}

  const EnvSpec& spec() const {
    return std::visit([](const auto& t) -> const EnvSpec& { return t.spec(); }, task_);
  }
  const Task& task() const { return task_; }
  bool is_tabular() const { return !std::holds_alternative<PointMass1D>(task_); }
  bool episode_over() const { return done_; }
  int elapsed() const { return t_; }

  /// Deterministic start state for `seed`.
  std::vector<double> reset(std::uint64_t seed) {
    t_ = 0;
    done_ = false;
    return std::visit(
        [&](const auto& task) -> std::vector<double> {
          using T = std::decay_t<decltype(task)>;
          if constexpr (std::is_same_v<T, PointMass1D>) {
            x_ = PointMass1D::start_position(seed);
            v_ = 0.0;
            return {x_, v_};
          } else {
            state_ = task.start_state();
            return task.observe(state_);
          }
        },
        task_);
  }

  StepResult step(const Action& action) {
    DIVRL_REQUIRE(!done_, ContractViolation, "step called after the episode finished");
    validate_action(action);
    StepResult r = std::visit(
        [&](const auto& task) -> StepResult {
          using T = std::decay_t<decltype(task)>;
          if constexpr (std::is_same_v<T, PointMass1D>) {
            auto [next, reward] = PointMass1D::dynamics(x_, v_, action.continuous[0]);
            x_ = next[0];
            v_ = next[1];
            return {{x_, v_}, reward, false, false};
          } else {
            const TabularStep s = task.transition(state_, action.discrete);
            StepResult out;
            out.reward = s.reward;
            out.terminal = s.terminal;
            out.observation = s.terminal ? task.terminal_observation(state_, action.discrete) : task.observe(s.next_state);
            state_ = s.next_state;
            return out;
          }
        },
        task_);
    t_ += 1;
    if (!r.terminal && t_ >= spec().horizon) r.truncated = true;
    done_ = r.terminal || r.truncated;
    return r;
  }

  void validate_action(const Action& action) const {
    const ActionSpace& as = spec().action_space;
    if (as.is_discrete()) {
      DIVRL_REQUIRE(action.discrete >= 0 && static_cast<std::size_t>(action.discrete) < as.n, ContractViolation,
                    "action " + std::to_string(action.discrete) + " outside the discrete action space");
    } else {
      DIVRL_REQUIRE(action.continuous.size() == as.lo.size(), ContractViolation, "action has the wrong dimension");
      for (std::size_t d = 0; d < as.lo.size(); ++d) {
        const double a = action.continuous[d];
        DIVRL_REQUIRE(std::isfinite(a) && a >= as.lo[d] && a <= as.hi[d], ContractViolation,
                      "action component outside the box bounds");
      }
    }
  }

  /// Complete dynamic state, for checkpoints.
  std::vector<double> save_state() const {
    return {static_cast<double>(t_), done_ ? 1.0 : 0.0, static_cast<double>(state_), x_, v_};
  }
  void restore_state(std::span<const double> s) {
    DIVRL_REQUIRE(s.size() == 5, ChecksumError, "environment state has the wrong length");
    t_ = static_cast<int>(s[0]);
    done_ = s[1] != 0.0;
    state_ = static_cast<int>(s[2]);
    x_ = s[3];
    v_ = s[4];
  }

 private:
  Task task_;
  int t_ = 0;
  bool done_ = true;
  int state_ = 0;
  double x_ = 0.0;
  double v_ = 0.0;
};

inline Environment make_env(const EnvConfig& c) {
  if (c.name == "deep_sea") return Environment(DeepSea(c.size, c.gamma, c.randomize_actions, c.mapping_seed));
  if (c.name == "chain") return Environment(Chain(c.length, c.horizon, c.gamma));
  if (c.name == "sparse_grid") return Environment(SparseGrid(c.width, c.height, c.horizon, c.gamma));
  if (c.name == "point_mass_1d") return Environment(PointMass1D(c.gamma));
  throw ConfigError("unknown environment '" + c.name + "'");
}

// ---------------------------------------------------------------------------
// Oracles

struct OracleQ {
  std::vector<std::vector<double>> q;  // [state][action]
  std::vector<std::vector<double>> observations;
  std::vector<bool> reachable;
  double residual = 0.0;
  int iterations = 0;
};

template <TabularTask T>
OracleQ value_iteration(const T& task, double gamma, double tolerance = 1e-10, int max_iterations = 1000000) {
  const int ns = task.num_states();
  const int na = static_cast<int>(task.spec().action_space.n);
  OracleQ out;
  out.q.assign(static_cast<std::size_t>(ns), std::vector<double>(static_cast<std::size_t>(na), 0.0));
  std::vector<double> v(static_cast<std::size_t>(ns), 0.0);
  for (int it = 0; it < max_iterations; ++it) {
    double residual = 0.0;
    for (int s = 0; s < ns; ++s) {
      for (int a = 0; a < na; ++a) {
        const TabularStep st = task.transition(s, a);
        const double target = st.reward + (st.terminal ? 0.0 : gamma * v[static_cast<std::size_t>(st.next_state)]);
        residual = std::max(residual, std::abs(target - out.q[s][a]));
        out.q[s][a] = target;
      }
    }
    for (int s = 0; s < ns; ++s) v[s] = *std::max_element(out.q[s].begin(), out.q[s].end());
    out.iterations = it + 1;
    out.residual = residual;
    if (residual < tolerance) break;
  }
  DIVRL_REQUIRE(out.residual < tolerance, NumericError, "value iteration did not converge");
  for (int s = 0; s < ns; ++s) {
    out.observations.push_back(task.observe(s));
    if constexpr (requires { task.reachable(s); }) {
      out.reachable.push_back(task.reachable(s));
    } else {
      out.reachable.push_back(true);
    }
  }
  return out;
}

/// Exact optimal action values of a finite task, ignoring the time limit
/// (truncation bootstraps, so the learner's fixed point is the stationary Q*).
inline OracleQ oracle_q(const Environment& env) {
  return std::visit(
      [&](const auto& task) -> OracleQ {
        using T = std::decay_t<decltype(task)>;
        if constexpr (std::is_same_v<T, PointMass1D>) {
          throw UnsupportedError("oracle_q: continuous environments have no tabular oracle");
        } else {
          return value_iteration(task, env.spec().gamma);
        }
      },
      env.task());
}

/// Max over (state, action) of |Q(s,a) - (r + gamma max_a' Q(s',a'))|.
template <TabularTask T>
double bellman_residual(const T& task, double gamma, const std::vector<std::vector<double>>& q) {
  double worst = 0.0;
  for (int s = 0; s < task.num_states(); ++s) {
    for (std::size_t a = 0; a < q[s].size(); ++a) {
      const TabularStep st = task.transition(s, static_cast<int>(a));
      const double next = st.terminal ? 0.0 : *std::max_element(q[st.next_state].begin(), q[st.next_state].end());
      worst = std::max(worst, std::abs(q[s][a] - (st.reward + gamma * next)));
    }
  }
  return worst;
}

/// Best undiscounted return of point_mass_1d from x0 (v0 = 0). The return is
/// a concave quadratic of the action sequence over a box, so accelerated
/// projected gradient ascent converges to the global optimum.
inline double point_mass_optimal_return(double x0, int iterations = 20000) {
  constexpr int H = PointMass1D::kHorizon;
  constexpr double dt = PointMass1D::kDt;
  auto rollout = [&](const std::vector<double>& a, std::vector<double>& xs) {
    double x = x0, v = 0.0, ret = 0.0;
    for (int t = 0; t < H; ++t) {
      v += a[t] * dt;
      x += v * dt;
      xs[t] = x;
      ret -= (x - PointMass1D::kGoal) * (x - PointMass1D::kGoal);
    }
    return ret;
  };
  // x_t = x0 + dt^2 * sum_{k<=t} (t - k + 1) a_k, so d x_t / d a_k = dt^2 (t - k + 1).
  // Lipschitz constant of the gradient: 2 dt^4 * ||M||^2 with M_{tk} = t-k+1, bounded by the Frobenius norm.
  double frob = 0.0;
  for (int t = 0; t < H; ++t)
    for (int k = 0; k <= t; ++k) frob += static_cast<double>((t - k + 1) * (t - k + 1));
  const double lipschitz = 2.0 * dt * dt * dt * dt * frob;
  const double step = 1.0 / lipschitz;

  std::vector<double> a(H, 0.0), y(H, 0.0), prev(H, 0.0), xs(H), grad(H);
  double momentum = 1.0;
  for (int it = 0; it < iterations; ++it) {
    rollout(y, xs);
    // d/d a_k of sum_t -(x_t - g)^2 = sum_{t>=k} -2 (x_t - g) dt^2 (t - k + 1)
    double s1 = 0.0, s2 = 0.0;  // suffix sums of e_t and (t+1) e_t
    for (int k = H - 1; k >= 0; --k) {
      const double e = -2.0 * (xs[k] - PointMass1D::kGoal);
      s1 += e;
      s2 += e * (k + 1);
      grad[k] = dt * dt * (s2 - k * s1);
    }
    prev = a;
    for (int k = 0; k < H; ++k) a[k] = std::clamp(y[k] + step * grad[k], -1.0, 1.0);
    const double next_momentum = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
    for (int k = 0; k < H; ++k) y[k] = a[k] + ((momentum - 1.0) / next_momentum) * (a[k] - prev[k]);
    momentum = next_momentum;
  }
  return rollout(a, xs);
}

}  // namespace divrl::env

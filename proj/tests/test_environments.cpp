#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "divrl/environments.hpp"
#include "divrl/error.hpp"

using namespace divrl;
using namespace divrl::env;

namespace {

EnvConfig deep_sea(int size) {
  EnvConfig c;
  c.name = "deep_sea";
  c.size = size;
  return c;
}

EnvConfig chain(int length) {
  EnvConfig c;
  c.name = "chain";
  c.length = length;
  return c;
}

double rollout_constant(Environment e, int action) {
  e.reset(0);
  double total = 0.0;
  while (!e.episode_over()) total += e.step(Action::index(action)).reward;
  return total;
}

/// Q* of a task that always terminates within `depth` steps, by exhaustive
/// recursion over action sequences.
template <typename T>
double brute_force_q(const T& task, int state, int action, double gamma, int depth) {
  const TabularStep st = task.transition(state, action);
  if (st.terminal || depth == 1) return st.reward;
  double best = -1e300;
  for (int a = 0; a < static_cast<int>(task.spec().action_space.n); ++a)
    best = std::max(best, brute_force_q(task, st.next_state, a, gamma, depth - 1));
  return st.reward + gamma * best;
}

}  // namespace

TEST(DeepSea, AlwaysRightReturn) {
  EXPECT_NEAR(rollout_constant(make_env(deep_sea(4)), 1), 1.0 - 4 * (0.01 / 4), 1e-12);
}

TEST(DeepSea, AlwaysLeftReturnsZero) { EXPECT_EQ(rollout_constant(make_env(deep_sea(4)), 0), 0.0); }

TEST(DeepSea, ResetIsTopLeftOneHot) {
  Environment e = make_env(deep_sea(4));
  for (std::uint64_t seed : {0ULL, 17ULL, 123456789ULL}) {
    const auto obs = e.reset(seed);
    ASSERT_EQ(obs.size(), 16u);
    EXPECT_EQ(obs[0], 1.0);
    for (std::size_t i = 1; i < obs.size(); ++i) EXPECT_EQ(obs[i], 0.0);
  }
}

TEST(DeepSea, RightStepMovesDiagonallyWithCost) {
  Environment e = make_env(deep_sea(4));
  e.reset(0);
  const StepResult r = e.step(Action::index(1));
  EXPECT_DOUBLE_EQ(r.reward, -0.0025);
  EXPECT_EQ(r.observation[1 * 4 + 1], 1.0);
  EXPECT_FALSE(r.terminal);
}

TEST(DeepSea, EpisodeLengthEqualsSize) {
  Environment e = make_env(deep_sea(6));
  e.reset(0);
  int steps = 0;
  StepResult r;
  while (!e.episode_over()) {
    r = e.step(Action::index(steps % 2));
    ++steps;
  }
  EXPECT_EQ(steps, 6);
  EXPECT_TRUE(r.terminal);
  EXPECT_FALSE(r.truncated);
}

TEST(DeepSea, RandomizedMappingKeepsOptimalReturn) {
  EnvConfig c = deep_sea(5);
  c.randomize_actions = true;
  c.mapping_seed = 3;
  Environment e = make_env(c);
  const auto& task = std::get<DeepSea>(e.task());
  int flipped = 0;
  for (int s = 0; s < 25; ++s) flipped += task.right_action(s) == 0;
  EXPECT_GT(flipped, 0);
  e.reset(0);
  double total = 0.0;
  int state = 0;
  while (!e.episode_over()) {
    const int a = task.right_action(state);
    state = task.transition(state, a).next_state;
    total += e.step(Action::index(a)).reward;
  }
  EXPECT_NEAR(total, 0.99, 1e-12);
}

TEST(DeepSea, OracleStartRight) {
  // deep_sea(2): right twice pays -0.005 then 1 - 0.005.
  EnvConfig c = deep_sea(2);
  c.gamma = 0.9;
  const OracleQ q = oracle_q(make_env(c));
  EXPECT_NEAR(q.q[0][1], -0.005 + 0.9 * (1.0 - 0.005), 1e-12);
  EXPECT_LT(q.residual, 1e-10);
}

TEST(DeepSea, OracleMatchesBruteForce) {
  for (int size : {3, 4, 5}) {
    Environment e = make_env(deep_sea(size));
    const auto& task = std::get<DeepSea>(e.task());
    const OracleQ q = oracle_q(e);
    for (int s = 0; s < task.num_states(); ++s)
      for (int a = 0; a < 2; ++a)
        EXPECT_NEAR(q.q[s][a], brute_force_q(task, s, a, 0.99, size + 1), 1e-9) << "s=" << s << " a=" << a;
  }
}

TEST(Chain, RightEndTerminatesWithReward) {
  Environment e = make_env(chain(3));
  e.reset(0);
  e.step(Action::index(1));
  e.step(Action::index(1));
  const StepResult r = e.step(Action::index(1));
  EXPECT_TRUE(r.terminal);
  EXPECT_EQ(r.reward, 1.0);
}

TEST(Chain, OptimalUndiscountedReturnIsOne) {
  EXPECT_EQ(rollout_constant(make_env(chain(3)), 1), 1.0);
}

TEST(Chain, OracleTwoStatesGammaOne) {
  EnvConfig c = chain(2);
  c.gamma = 1.0;
  c.horizon = 2;
  const OracleQ q = oracle_q(make_env(c));
  EXPECT_DOUBLE_EQ(q.q[0][1], 1.0);
}

TEST(Chain, OracleMatchesClosedForm) {
  const int L = 6;
  const double g = 0.9;
  EnvConfig c = chain(L);
  c.gamma = g;
  const OracleQ q = oracle_q(make_env(c));
  auto v = [&](int s) { return std::pow(g, L - 1 - s); };
  for (int s = 0; s < L; ++s) {
    EXPECT_NEAR(q.q[s][1], s == L - 1 ? 1.0 : g * v(s + 1), 1e-9);
    EXPECT_NEAR(q.q[s][0], g * v(std::max(s - 1, 0)), 1e-9);
  }
}

TEST(Chain, TruncatedAtHorizon) {
  EnvConfig c = chain(5);
  c.horizon = 3;
  Environment e = make_env(c);
  e.reset(0);
  e.step(Action::index(0));
  e.step(Action::index(0));
  const StepResult r = e.step(Action::index(0));
  EXPECT_TRUE(r.truncated);
  EXPECT_FALSE(r.terminal);
  EXPECT_THROW(e.step(Action::index(0)), ContractViolation);
}

TEST(SparseGrid, ReachesGoal) {
  EnvConfig c;
  c.name = "sparse_grid";
  c.width = 3;
  c.height = 2;
  Environment e = make_env(c);
  e.reset(0);
  EXPECT_EQ(e.step(Action::index(3)).reward, 0.0);
  EXPECT_EQ(e.step(Action::index(3)).reward, 0.0);
  const StepResult r = e.step(Action::index(0));
  EXPECT_TRUE(r.terminal);
  EXPECT_EQ(r.reward, 1.0);
}

TEST(Oracle, BellmanResidualTiny) {
  EnvConfig g;
  g.name = "sparse_grid";
  g.width = 4;
  g.height = 3;
  for (const EnvConfig& c : {deep_sea(6), chain(7), g}) {
    Environment e = make_env(c);
    const OracleQ q = oracle_q(e);
    std::visit(
        [&](const auto& task) {
          if constexpr (TabularTask<std::decay_t<decltype(task)>>) {
            EXPECT_LT(bellman_residual(task, e.spec().gamma, q.q), 1e-9) << c.name;
          }
        },
        e.task());
  }
}

TEST(Oracle, ContinuousIsUnsupported) {
  EnvConfig c;
  c.name = "point_mass_1d";
  EXPECT_THROW(oracle_q(make_env(c)), UnsupportedError);
}

TEST(PointMass, StartIsSeededAndBounded) {
  EnvConfig c;
  c.name = "point_mass_1d";
  Environment a = make_env(c), b = make_env(c);
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto oa = a.reset(s);
    EXPECT_EQ(oa, b.reset(s));
    EXPECT_GE(oa[0], -0.1);
    EXPECT_LE(oa[0], 0.1);
    EXPECT_EQ(oa[1], 0.0);
  }
}

TEST(PointMass, DynamicsAndBounds) {
  EnvConfig c;
  c.name = "point_mass_1d";
  Environment e = make_env(c);
  const auto o = e.reset(4);
  const StepResult r = e.step(Action::vector({0.5}));
  const double v = 0.05, x = o[0] + v * 0.1;
  EXPECT_DOUBLE_EQ(r.observation[1], v);
  EXPECT_DOUBLE_EQ(r.observation[0], x);
  EXPECT_DOUBLE_EQ(r.reward, -(x - 1.0) * (x - 1.0));
  EXPECT_THROW(e.step(Action::vector({1.5})), ContractViolation);
  EXPECT_THROW(e.step(Action::vector({0.1, 0.1})), ContractViolation);
}

TEST(PointMass, OptimalReturnBeatsBangBang) {
  const double x0 = 0.05;
  const double best = point_mass_optimal_return(x0);
  EXPECT_LT(best, 0.0);
  // Accelerate for k steps, brake for k steps, then hold.
  double bang = -1e300;
  for (int k = 1; k < 50; ++k) {
    double x = x0, v = 0.0, ret = 0.0;
    for (int t = 0; t < 100; ++t) {
      const double a = t < k ? 1.0 : t < 2 * k ? -1.0 : 0.0;
      v += a * 0.1;
      x += v * 0.1;
      ret -= (x - 1.0) * (x - 1.0);
    }
    bang = std::max(bang, ret);
  }
  EXPECT_GE(best, bang - 1e-9);
  EXPECT_LT(best - bang, 0.5 * std::abs(bang));
}

TEST(Environment, DeterministicTrajectories) {
  for (const EnvConfig& c : {deep_sea(5), chain(4)}) {
    Environment a = make_env(c), b = make_env(c);
    Rng ra = make_stream(1, "actions"), rb = make_stream(1, "actions");
    a.reset(9);
    b.reset(9);
    for (int t = 0; t < 200; ++t) {
      if (a.episode_over()) {
        EXPECT_EQ(a.reset(t), b.reset(t));
      }
      const StepResult x = a.step(Action::index(static_cast<int>(uniform_index(ra, 2))));
      const StepResult y = b.step(Action::index(static_cast<int>(uniform_index(rb, 2))));
      EXPECT_EQ(x.observation, y.observation);
      EXPECT_EQ(x.reward, y.reward);
      EXPECT_EQ(x.terminal, y.terminal);
    }
  }
}

TEST(Environment, RewardBoundsUnderFuzzing) {
  EnvConfig pm;
  pm.name = "point_mass_1d";
  EnvConfig sg;
  sg.name = "sparse_grid";
  for (const EnvConfig& c : {deep_sea(8), chain(5), sg, pm}) {
    Environment e = make_env(c);
    const EnvSpec spec = e.spec();
    Rng rng = make_stream(2, "fuzz");
    e.reset(0);
    for (int t = 0; t < 10000; ++t) {
      if (e.episode_over()) e.reset(rng());
      Action a = spec.action_space.is_discrete()
                     ? Action::index(static_cast<int>(uniform_index(rng, spec.action_space.n)))
                     : Action::vector({uniform(rng, -1.0, 1.0)});
      const StepResult r = e.step(a);
      EXPECT_GE(r.reward, spec.reward_min - 1e-12) << c.name;
      EXPECT_LE(r.reward, spec.reward_max + 1e-12) << c.name;
      EXPECT_FALSE(r.terminal && r.truncated) << c.name;
      for (double v : r.observation) EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(Environment, SaveRestoreState) {
  Environment e = make_env(chain(5));
  e.reset(0);
  e.step(Action::index(1));
  const auto saved = e.save_state();
  const StepResult a = e.step(Action::index(1));
  e.restore_state(saved);
  const StepResult b = e.step(Action::index(1));
  EXPECT_EQ(a.observation, b.observation);
  EXPECT_EQ(e.elapsed(), 2);
}

TEST(MakeEnv, RejectsUnknownAndOutOfRange) {
  EnvConfig c;
  c.name = "pong";
  EXPECT_THROW(make_env(c), ConfigError);
  EXPECT_THROW(make_env(deep_sea(1)), ConfigError);
  EXPECT_THROW(make_env(deep_sea(65)), ConfigError);
  EXPECT_NO_THROW(make_env(deep_sea(64)));
}

TEST(MakeEnv, SpecsAreWellFormed) {
  EnvConfig pm;
  pm.name = "point_mass_1d";
  for (const EnvConfig& c : {deep_sea(4), chain(4), pm}) {
    const EnvSpec s = make_env(c).spec();
    EXPECT_GE(s.horizon, 1);
    if (s.action_space.is_discrete()) {
      EXPECT_GE(s.action_space.n, 2u);
    } else {
      for (std::size_t d = 0; d < s.action_space.lo.size(); ++d) EXPECT_LT(s.action_space.lo[d], s.action_space.hi[d]);
    }
  }
}

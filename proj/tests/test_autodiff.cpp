#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "divrl/autodiff.hpp"
#include "divrl/error.hpp"
#include "oracles.hpp"

using namespace divrl;
using namespace divrl::nn;

namespace {

Layer make_layer(std::size_t in, std::size_t out, std::vector<double> w, std::vector<double> b, Activation a) {
  Layer l;
  l.in = in;
  l.out = out;
  l.weight = std::move(w);
  l.bias = std::move(b);
  l.activation = a;
  return l;
}

ParamSet random_net(std::uint64_t seed, std::vector<std::size_t> widths, std::size_t in, std::size_t out,
                    Activation act = Activation::tanh) {
  Rng rng = make_stream(seed, "test/net");
  return make_mlp(in, widths, out, act, Activation::identity, rng);
}

}  // namespace

TEST(Forward, IdentityReluLayer) {
  ParamSet p;
  p.layers.push_back(make_layer(2, 2, {1, 0, 0, 1}, {0, 0}, Activation::relu));
  const std::vector<double> x{1.0, -1.0};
  EXPECT_EQ(forward(p, x).output, (std::vector<double>{1.0, 0.0}));
}

TEST(Forward, ZeroWeightsGiveBias) {
  ParamSet p;
  p.layers.push_back(make_layer(3, 1, {0, 0, 0}, {0.5}, Activation::identity));
  const std::vector<double> x{4.0, -7.0, 2.5};
  EXPECT_EQ(forward(p, x).output, (std::vector<double>{0.5}));
}

TEST(Forward, MatchesStraightLineOracleExactly) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const ParamSet p = random_net(s, {7, 5, 4}, 3, 2, s % 2 ? Activation::relu : Activation::tanh);
    Rng rng = make_stream(s, "test/input");
    std::vector<double> x(3);
    for (auto& v : x) v = normal(rng);
    EXPECT_EQ(forward(p, x).output, oracle::forward(p, x));
  }
}

TEST(Forward, DeterministicBitwise) {
  const ParamSet p = random_net(3, {8, 8}, 4, 3);
  const std::vector<double> x{0.1, -0.2, 0.3, 0.9};
  EXPECT_EQ(forward(p, x).output, forward(p, x).output);
}

TEST(Forward, TapeReplayReproducesOutputs) {
  const ParamSet p = random_net(4, {6, 5}, 3, 2, Activation::relu);
  const std::vector<double> x{0.3, -1.2, 0.8};
  const ForwardResult r = forward(p, x);
  ASSERT_EQ(r.tape.inputs.size(), p.layers.size());
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    ParamSet single;
    single.layers.push_back(p.layers[k]);
    const auto out = forward(single, r.tape.inputs[k]).output;
    const auto& next = k + 1 < p.layers.size() ? r.tape.inputs[k + 1] : r.output;
    EXPECT_EQ(out, next);
  }
}

TEST(Forward, DimensionMismatchIsConfigError) {
  const ParamSet p = random_net(0, {4}, 3, 1);
  const std::vector<double> x{1.0, 2.0};
  EXPECT_THROW(forward(p, x), ConfigError);
}

TEST(Forward, NonFiniteInputIsNumericError) {
  const ParamSet p = random_net(0, {4}, 2, 1);
  const std::vector<double> x{1.0, std::numeric_limits<double>::quiet_NaN()};
  EXPECT_THROW(forward(p, x), NumericError);
}

TEST(Forward, EmptyParamSetIsIdentity) {
  const ParamSet p;
  const std::vector<double> x{1.5, -2.0};
  EXPECT_EQ(forward(p, x).output, x);
}

TEST(Validate, RejectsBrokenChainAndNonFinite) {
  ParamSet p = random_net(0, {4}, 3, 2);
  EXPECT_NO_THROW(validate(p));
  ParamSet broken = p;
  broken.layers[1].in = 5;
  broken.layers[1].weight.resize(10);
  EXPECT_THROW(validate(broken), ConfigError);
  ParamSet nan = p;
  nan.layers[0].bias[0] = std::nan("");
  EXPECT_THROW(validate(nan), NumericError);
}

TEST(Backward, LinearChainRule) {
  ParamSet p;
  p.layers.push_back(make_layer(1, 1, {3.0}, {0.0}, Activation::identity));
  const std::vector<double> x{2.0};
  const auto r = forward(p, x);
  const std::vector<double> g{1.0};
  const auto b = backward(p, r.tape, g);
  EXPECT_DOUBLE_EQ(b.gradient.layers[0].weight[0], 2.0);
  EXPECT_DOUBLE_EQ(b.gradient.layers[0].bias[0], 1.0);
  EXPECT_DOUBLE_EQ(b.input_gradient[0], 3.0);
}

TEST(Backward, DeadReluBlocksUpstreamWeights) {
  ParamSet p;
  p.layers.push_back(make_layer(1, 1, {1.0}, {-5.0}, Activation::relu));
  p.layers.push_back(make_layer(1, 1, {2.0}, {0.0}, Activation::identity));
  const std::vector<double> x{1.0};
  const auto r = forward(p, x);
  const std::vector<double> g{1.0};
  const auto b = backward(p, r.tape, g);
  EXPECT_EQ(b.gradient.layers[0].weight[0], 0.0);
  EXPECT_EQ(b.gradient.layers[0].bias[0], 0.0);
}

TEST(Backward, MatchesFiniteDifferencesOnTwoLayerNets) {
  for (std::uint64_t s = 0; s < 25; ++s) {
    const ParamSet p = random_net(s, {5}, 3, 2, Activation::tanh);
    const std::vector<double> x{0.4, -0.7, 1.1};
    const std::vector<double> w{0.8, -1.3};
    auto loss = [&](const ParamSet& q) {
      const auto y = oracle::forward(q, x);
      return w[0] * y[0] + w[1] * y[1] * y[1];
    };
    const auto r = forward(p, x);
    const std::vector<double> g{w[0], 2.0 * w[1] * r.output[1]};
    const auto b = backward(p, r.tape, g);
    const auto fd = oracle::finite_difference(p, loss, 1e-4);
    EXPECT_LT(oracle::max_relative_error(oracle::flatten(b.gradient), fd, 1e-5), 1e-3) << "seed " << s;
  }
}

TEST(Backward, OutputGradientLengthMismatchIsNumericError) {
  const ParamSet p = random_net(1, {4}, 2, 2);
  const std::vector<double> x{0.1, 0.2};
  const auto r = forward(p, x);
  const std::vector<double> g{1.0};
  EXPECT_THROW(backward(p, r.tape, g), NumericError);
}

TEST(Backward, InputGradientAgreesWithFullBackward) {
  const ParamSet p = random_net(9, {6, 6}, 4, 3, Activation::relu);
  const std::vector<double> x{0.5, -0.1, 0.9, -1.4};
  const auto r = forward(p, x);
  const std::vector<double> g{0.3, -1.0, 2.0};
  const auto full = backward(p, r.tape, g).input_gradient;
  const auto only = input_gradient(p, r.tape, g);
  ASSERT_EQ(full.size(), only.size());
  for (std::size_t i = 0; i < full.size(); ++i) EXPECT_NEAR(full[i], only[i], 1e-14);
}

TEST(Huber, QuadraticBranch) {
  const LossGrad l = huber(1.0, 0.0, 10.0);
  EXPECT_DOUBLE_EQ(l.loss, 0.5);
  EXPECT_DOUBLE_EQ(l.grad, 1.0);
}

TEST(Huber, LinearBranch) {
  const LossGrad l = huber(20.0, 0.0, 10.0);
  EXPECT_DOUBLE_EQ(l.loss, 150.0);
  EXPECT_DOUBLE_EQ(l.grad, 10.0);
  const LossGrad n = huber(-20.0, 0.0, 10.0);
  EXPECT_DOUBLE_EQ(n.loss, 150.0);
  EXPECT_DOUBLE_EQ(n.grad, -10.0);
}

TEST(Huber, ZeroAtMinimum) {
  const LossGrad l = huber(3.0, 3.0, 10.0);
  EXPECT_EQ(l.loss, 0.0);
  EXPECT_EQ(l.grad, 0.0);
}

TEST(Huber, SmoothAtThreshold) {
  for (double thr : {0.5, 1.0, 10.0}) {
    const double eps = 1e-13;
    const LossGrad below = huber(thr - eps, 0.0, thr);
    const LossGrad above = huber(thr + eps, 0.0, thr);
    EXPECT_NEAR(below.loss, above.loss, 2.0 * thr * eps + 1e-12);
    EXPECT_NEAR(below.grad, above.grad, 1e-12);
    EXPECT_DOUBLE_EQ(huber(thr, 0.0, thr).loss, oracle::huber(thr, thr));
  }
}

TEST(Huber, NonPositiveThresholdRejected) {
  EXPECT_THROW(huber(1.0, 0.0, 0.0), ConfigError);
}

TEST(SquaredError, ValueAndGradient) {
  const LossGrad l = squared_error(3.0, 1.0);
  EXPECT_DOUBLE_EQ(l.loss, 4.0);
  EXPECT_DOUBLE_EQ(l.grad, 4.0);
}

TEST(ScaleEncoderGradients, DividesEncoderLayersOnly) {
  ParamSet g;
  g.layers.push_back(make_layer(1, 1, {1.0}, {1.0}, Activation::relu));
  g.layers.push_back(make_layer(1, 1, {0.7}, {0.7}, Activation::identity));
  const std::vector<std::size_t> enc{0};
  const ParamSet s = scale_encoder_gradients(g, enc, 10);
  EXPECT_DOUBLE_EQ(s.layers[0].weight[0], 0.1);
  EXPECT_DOUBLE_EQ(s.layers[0].bias[0], 0.1);
  EXPECT_EQ(s.layers[1].weight[0], 0.7);
  EXPECT_EQ(s.layers[1].bias[0], 0.7);
}

TEST(ScaleEncoderGradients, HeadCountOneIsIdentity) {
  const ParamSet g = random_net(2, {3}, 2, 2);
  const std::vector<std::size_t> enc{0, 1};
  EXPECT_EQ(scale_encoder_gradients(g, enc, 1), g);
}

TEST(ScaleEncoderGradients, LinearAndNotIdempotent) {
  const ParamSet a = random_net(2, {3}, 2, 2);
  const ParamSet b = random_net(3, {3}, 2, 2);
  const std::vector<std::size_t> enc{0};
  ParamSet sum = a;
  add_scaled(sum, b, 1.0);
  ParamSet lhs = scale_encoder_gradients(sum, enc, 4);
  ParamSet rhs = scale_encoder_gradients(a, enc, 4);
  add_scaled(rhs, scale_encoder_gradients(b, enc, 4), 1.0);
  EXPECT_LT(max_abs_diff(lhs, rhs), 1e-15);
  const ParamSet once = scale_encoder_gradients(a, enc, 4);
  EXPECT_NE(scale_encoder_gradients(once, enc, 4), once);
}

TEST(ScaleEncoderGradients, ZeroHeadCountRejected) {
  const ParamSet g = random_net(2, {3}, 2, 2);
  const std::vector<std::size_t> enc{0};
  EXPECT_THROW(scale_encoder_gradients(g, enc, 0), ConfigError);
}

TEST(Adam, ZeroGradientKeepsParamsAndDecaysMoments) {
  ParamSet p = random_net(5, {3}, 2, 1);
  OptimState s = make_optim_state(p);
  s.first_moment.layers[0].weight[0] = 1.0;
  s.second_moment.layers[0].weight[0] = 1.0;
  const ParamSet before = p;
  // A zero gradient with non-zero moments still moves parameters through the
  // first moment; with zero moments it must not move at all.
  OptimState fresh = make_optim_state(p);
  adam_step(p, zeros_like(p), fresh);
  EXPECT_EQ(p, before);
  adam_step(p, zeros_like(p), s);
  EXPECT_DOUBLE_EQ(s.first_moment.layers[0].weight[0], 0.9);
  EXPECT_DOUBLE_EQ(s.second_moment.layers[0].weight[0], 0.999);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
  ParamSet p = random_net(6, {}, 3, 2);
  const ParamSet before = p;
  ParamSet g = zeros_like(p);
  int i = 0;
  for_each_value(g, [&i](double& x) { x = (i % 2 ? 1.0 : -1.0) * (0.1 + 0.37 * i); ++i; });
  OptimState s = make_optim_state(p);
  adam_step(p, g, s);
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    for (std::size_t i = 0; i < p.layers[k].weight.size(); ++i) {
      const double gi = g.layers[k].weight[i];
      const double step = p.layers[k].weight[i] - before.layers[k].weight[i];
      // Closed form of the first step: -lr * g / (|g| + eps).
      EXPECT_NEAR(step, -1e-3 * gi / (std::abs(gi) + 1e-8), 1e-15);
    }
  }
}

TEST(Adam, ConstantGradientDescends) {
  ParamSet p;
  p.layers.push_back(make_layer(1, 1, {0.0}, {0.0}, Activation::identity));
  ParamSet g = p;
  g.layers[0].weight[0] = 2.0;
  g.layers[0].bias[0] = -3.0;
  OptimState s = make_optim_state(p);
  for (int i = 0; i < 100; ++i) adam_step(p, g, s);
  EXPECT_LT(p.layers[0].weight[0], 0.0);
  EXPECT_GT(p.layers[0].bias[0], 0.0);
  EXPECT_EQ(s.step, 100);
}

TEST(Adam, NonFiniteGradientRejectedWithoutSideEffects) {
  ParamSet p = random_net(7, {2}, 2, 1);
  OptimState s = make_optim_state(p);
  ParamSet g = zeros_like(p);
  g.layers[0].weight[1] = std::numeric_limits<double>::infinity();
  const ParamSet before = p;
  const OptimState state_before = s;
  EXPECT_THROW(adam_step(p, g, s), NumericError);
  EXPECT_EQ(p, before);
  EXPECT_EQ(s, state_before);
}

TEST(Adam, AccumulatorShapesMatchParams) {
  const ParamSet p = random_net(8, {4, 3}, 2, 2);
  const OptimState s = make_optim_state(p);
  EXPECT_TRUE(same_shape(p, s.first_moment));
  EXPECT_TRUE(same_shape(p, s.second_moment));
  auto [np, ns] = optimizer_step(p, zeros_like(p), s);
  EXPECT_TRUE(same_shape(np, ns.first_moment));
  EXPECT_GE(ns.step, s.step);
}

TEST(ScalarAdam, MovesAgainstGradient) {
  ScalarAdam a;
  double x = 1.0;
  a.apply(x, 0.5);
  EXPECT_NEAR(x, 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_THROW(a.apply(x, std::nan("")), NumericError);
}

TEST(Polyak, InterpolatesTowardsOnline) {
  ParamSet target = random_net(1, {2}, 2, 1);
  const ParamSet online = random_net(2, {2}, 2, 1);
  const ParamSet start = target;
  polyak_update(target, online, 0.25);
  EXPECT_NEAR(target.layers[0].weight[0], 0.25 * online.layers[0].weight[0] + 0.75 * start.layers[0].weight[0], 1e-15);
  polyak_update(target, online, 1.0);
  EXPECT_EQ(target, online);
}

TEST(Init, FanInBoundsAndDeterminism) {
  Rng a = make_stream(1, "x"), b = make_stream(1, "x");
  const Layer la = init_layer(16, 4, Activation::relu, a);
  const Layer lb = init_layer(16, 4, Activation::relu, b);
  EXPECT_EQ(la, lb);
  for (double w : la.weight) EXPECT_LE(std::abs(w), 0.25);
}

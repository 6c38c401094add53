#pragma once

// Dense reverse-mode differentiation for small multilayer perceptrons, the
// scalar losses the agents need, and an Adam optimizer.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "divrl/error.hpp"
#include "divrl/rng.hpp"

namespace divrl::nn {

enum class Activation : std::uint8_t { relu, tanh, identity };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

/// One affine layer followed by an elementwise activation.
/// `weight` is row-major with shape out x in.
struct Layer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;
  std::vector<double> bias;
  Activation activation = Activation::identity;

  double& w(std::size_t o, std::size_t i) { return weight[o * in + i]; }
  double w(std::size_t o, std::size_t i) const { return weight[o * in + i]; }

  bool operator==(const Layer&) const = default;
};

/// An ordered chain of layers. An empty ParamSet is the identity map, which
/// lets an ensemble have zero-depth encoders (a purely linear Q function).
struct ParamSet {
  std::vector<Layer> layers;

  bool empty() const { return layers.empty(); }
  std::size_t depth() const { return layers.size(); }
  std::size_t in_dim() const { return layers.empty() ? 0 : layers.front().in; }
  std::size_t out_dim() const { return layers.empty() ? 0 : layers.back().out; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  bool operator==(const ParamSet&) const = default;
};

/// Intermediate values of one forward pass, enough to run reverse accumulation.
struct Tape {
  std::vector<std::vector<double>> inputs;          // input of each layer
  std::vector<std::vector<double>> pre_activation;  // per layer
  std::vector<double> output;
};

struct ForwardResult {
  std::vector<double> output;
  Tape tape;
};

struct BackwardResult {
  ParamSet gradient;
  std::vector<double> input_gradient;
};

// ---------------------------------------------------------------------------
// Construction and elementwise helpers

inline void validate(const ParamSet& p) {
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    const Layer& l = p.layers[k];
    DIVRL_REQUIRE(l.in > 0 && l.out > 0, ConfigError, "layer " + std::to_string(k) + " has a zero dimension");
    DIVRL_REQUIRE(l.weight.size() == l.in * l.out && l.bias.size() == l.out, ConfigError,
                  "layer " + std::to_string(k) + " storage does not match its shape");
    if (k > 0) {
      DIVRL_REQUIRE(p.layers[k - 1].out == l.in, ConfigError,
                    "layer " + std::to_string(k) + " input does not chain with previous output");
    }
    for (double v : l.weight) DIVRL_REQUIRE(std::isfinite(v), NumericError, "non-finite weight");
    for (double v : l.bias) DIVRL_REQUIRE(std::isfinite(v), NumericError, "non-finite bias");
  }
}

/// Uniform fan-in initialisation, U(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
inline Layer init_layer(std::size_t in, std::size_t out, Activation act, Rng& rng) {
  DIVRL_REQUIRE(in > 0 && out > 0, ConfigError, "init_layer: zero dimension");
  Layer l;
  l.in = in;
  l.out = out;
  l.activation = act;
  l.weight.resize(in * out);
  l.bias.resize(out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& v : l.weight) v = uniform(rng, -bound, bound);
  for (auto& v : l.bias) v = uniform(rng, -bound, bound);
  return l;
}

/// Chain of `widths.size()` hidden layers with `act`; optional output layer
/// when `out > 0`.
inline ParamSet make_mlp(std::size_t in, std::span<const std::size_t> widths, std::size_t out,
                         Activation hidden_act, Activation out_act, Rng& rng) {
  ParamSet p;
  std::size_t prev = in;
  for (std::size_t w : widths) {
    p.layers.push_back(init_layer(prev, w, hidden_act, rng));
    prev = w;
  }
  if (out > 0) p.layers.push_back(init_layer(prev, out, out_act, rng));
  return p;
}

inline ParamSet zeros_like(const ParamSet& p) {
  ParamSet z = p;
  for (auto& l : z.layers) {
    std::fill(l.weight.begin(), l.weight.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  return z;
}

template <typename F>
void for_each_value(ParamSet& p, F&& f) {
  for (auto& l : p.layers) {
    for (auto& v : l.weight) f(v);
    for (auto& v : l.bias) f(v);
  }
}

template <typename F>
void for_each_value(const ParamSet& p, F&& f) {
  for (const auto& l : p.layers) {
    for (double v : l.weight) f(v);
    for (double v : l.bias) f(v);
  }
}

/// Elementwise zip over two same-shaped parameter sets.
template <typename F>
void zip_values(ParamSet& a, const ParamSet& b, F&& f) {
  DIVRL_REQUIRE(a.layers.size() == b.layers.size(), ContractViolation, "parameter shape mismatch");
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    auto& la = a.layers[k];
    const auto& lb = b.layers[k];
    DIVRL_REQUIRE(la.weight.size() == lb.weight.size() && la.bias.size() == lb.bias.size(),
                  ContractViolation, "parameter shape mismatch");
    for (std::size_t i = 0; i < la.weight.size(); ++i) f(la.weight[i], lb.weight[i]);
    for (std::size_t i = 0; i < la.bias.size(); ++i) f(la.bias[i], lb.bias[i]);
  }
}

inline void set_zero(ParamSet& p) {
  for_each_value(p, [](double& v) { v = 0.0; });
}

inline void add_scaled(ParamSet& acc, const ParamSet& g, double scale) {
  zip_values(acc, g, [scale](double& a, double b) { a += scale * b; });
}

inline void scale_in_place(ParamSet& p, double factor) {
  for_each_value(p, [factor](double& v) { v *= factor; });
}

inline bool all_finite(const ParamSet& p) {
  bool ok = true;
  for_each_value(p, [&ok](double v) { ok = ok && std::isfinite(v); });
  return ok;
}

inline bool same_shape(const ParamSet& a, const ParamSet& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    if (a.layers[k].in != b.layers[k].in || a.layers[k].out != b.layers[k].out) return false;
  }
  return true;
}

inline double max_abs_diff(const ParamSet& a, const ParamSet& b) {
  ParamSet tmp = a;
  double m = 0.0;
  zip_values(tmp, b, [&m](double& x, double y) { m = std::max(m, std::abs(x - y)); });
  return m;
}

/// FNV-1a over the raw bytes of every value; equal hashes mean bitwise-equal parameters.
inline std::uint64_t hash_params(const ParamSet& p, std::uint64_t h = 0xcbf29ce484222325ULL) {
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& l : p.layers) {
    mix(l.weight.data(), l.weight.size() * sizeof(double));
    mix(l.bias.data(), l.bias.size() * sizeof(double));
  }
  return h;
}

/// target <- tau * online + (1 - tau) * target
inline void polyak_update(ParamSet& target, const ParamSet& online, double tau) {
  zip_values(target, online, [tau](double& t, double o) { t = tau * o + (1.0 - tau) * t; });
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::tanh: return std::tanh(x);
    case Activation::identity: return x;
  }
  return x;
}

inline double activation_slope(Activation a, double pre, double post) {
  switch (a) {
    case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - post * post;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

}  // namespace detail

/// Forward pass reusing the buffers already held by `tape`.
inline void forward_into(const ParamSet& params, std::span<const double> input, Tape& tape) {
  if (!params.empty()) {
    DIVRL_REQUIRE(input.size() == params.in_dim(), ConfigError,
                  "forward: input has " + std::to_string(input.size()) + " entries, network expects " +
                      std::to_string(params.in_dim()));
  }
  for (double v : input) DIVRL_REQUIRE(std::isfinite(v), NumericError, "forward: non-finite input");

  const std::size_t depth = params.layers.size();
  tape.inputs.resize(depth);
  tape.pre_activation.resize(depth);
  tape.output.assign(input.begin(), input.end());
  for (std::size_t k = 0; k < depth; ++k) {
    const Layer& l = params.layers[k];
    DIVRL_REQUIRE(tape.output.size() == l.in, ConfigError, "forward: layer dimensions do not chain");
    std::swap(tape.inputs[k], tape.output);
    const std::vector<double>& x = tape.inputs[k];
    std::vector<double>& pre = tape.pre_activation[k];
    pre.resize(l.out);
    tape.output.resize(l.out);
    const double* wrow = l.weight.data();
    for (std::size_t o = 0; o < l.out; ++o, wrow += l.in) {
      double s = l.bias[o];
      for (std::size_t i = 0; i < l.in; ++i) s += wrow[i] * x[i];
      pre[o] = s;
      tape.output[o] = detail::activate(l.activation, s);
    }
  }
}

inline ForwardResult forward(const ParamSet& params, std::span<const double> input) {
  ForwardResult r;
  forward_into(params, input, r.tape);
  r.output = r.tape.output;
  return r;
}

/// Reverse pass. Adds d(loss)/d(params) into `grad` (which must be shaped
/// like `params`) and, when `input_grad` is non-null, writes d(loss)/d(input).
inline void accumulate_backward(const ParamSet& params, const Tape& tape, std::span<const double> output_gradient,
                                ParamSet& grad, std::vector<double>* input_grad) {
  DIVRL_REQUIRE(output_gradient.size() == tape.output.size(), NumericError,
                "backward: output gradient length does not match the taped output");
  DIVRL_REQUIRE(tape.inputs.size() == params.layers.size() && grad.layers.size() == params.layers.size(),
                NumericError, "backward: tape does not match the parameter set");
  std::vector<double> upstream(output_gradient.begin(), output_gradient.end());
  std::vector<double> delta;
  for (std::size_t k = params.layers.size(); k-- > 0;) {
    const Layer& l = params.layers[k];
    Layer& g = grad.layers[k];
    const std::vector<double>& x = tape.inputs[k];
    const std::vector<double>& pre = tape.pre_activation[k];
    const std::vector<double>& post = (k + 1 < params.layers.size()) ? tape.inputs[k + 1] : tape.output;
    delta.resize(l.out);
    for (std::size_t o = 0; o < l.out; ++o) {
      delta[o] = upstream[o] * detail::activation_slope(l.activation, pre[o], post[o]);
    }
    const bool need_input = k > 0 || input_grad != nullptr;
    if (need_input) upstream.assign(l.in, 0.0);
    const double* wrow = l.weight.data();
    double* grow = g.weight.data();
    for (std::size_t o = 0; o < l.out; ++o, wrow += l.in, grow += l.in) {
      const double d = delta[o];
      g.bias[o] += d;
      if (d == 0.0) continue;
      for (std::size_t i = 0; i < l.in; ++i) grow[i] += d * x[i];
      if (need_input) {
        for (std::size_t i = 0; i < l.in; ++i) upstream[i] += d * wrow[i];
      }
    }
  }
  if (input_grad != nullptr) *input_grad = std::move(upstream);
}

/// d(loss)/d(input) only; parameter gradients are not formed.
inline std::vector<double> input_gradient(const ParamSet& params, const Tape& tape,
                                          std::span<const double> output_gradient) {
  DIVRL_REQUIRE(output_gradient.size() == tape.output.size(), NumericError,
                "backward: output gradient length does not match the taped output");
  std::vector<double> upstream(output_gradient.begin(), output_gradient.end());
  std::vector<double> next;
  for (std::size_t k = params.layers.size(); k-- > 0;) {
    const Layer& l = params.layers[k];
    const std::vector<double>& pre = tape.pre_activation[k];
    const std::vector<double>& post = (k + 1 < params.layers.size()) ? tape.inputs[k + 1] : tape.output;
    next.assign(l.in, 0.0);
    const double* wrow = l.weight.data();
    for (std::size_t o = 0; o < l.out; ++o, wrow += l.in) {
      const double d = upstream[o] * detail::activation_slope(l.activation, pre[o], post[o]);
      if (d == 0.0) continue;
      for (std::size_t i = 0; i < l.in; ++i) next[i] += d * wrow[i];
    }
    upstream.swap(next);
  }
  return upstream;
}

inline BackwardResult backward(const ParamSet& params, const Tape& tape, std::span<const double> output_gradient) {
  BackwardResult r;
  r.gradient = zeros_like(params);
  accumulate_backward(params, tape, output_gradient, r.gradient, &r.input_gradient);
  return r;
}

// ---------------------------------------------------------------------------
// Losses

struct LossGrad {
  double loss = 0.0;
  double grad = 0.0;  // d loss / d prediction
};

/// Huber loss: quadratic within `threshold` of the target, linear outside.
inline LossGrad huber(double prediction, double target, double threshold) {
  DIVRL_REQUIRE(threshold > 0.0, ConfigError, "huber: threshold must be positive");
  const double d = prediction - target;
  DIVRL_REQUIRE(std::isfinite(d), NumericError, "huber: non-finite input");
  const double a = std::abs(d);
  if (a <= threshold) return {0.5 * d * d, d};
  return {threshold * (a - 0.5 * threshold), d > 0.0 ? threshold : -threshold};
}

inline LossGrad squared_error(double prediction, double target) {
  const double d = prediction - target;
  DIVRL_REQUIRE(std::isfinite(d), NumericError, "squared_error: non-finite input");
  return {d * d, 2.0 * d};
}

/// Divides the gradient entries of `encoder_layers` by `head_count` so that
/// the encoder's gradient magnitude does not grow with the number of heads
/// stacked on it. Other layers are left as they are.
inline ParamSet scale_encoder_gradients(ParamSet gradient, std::span<const std::size_t> encoder_layers,
                                        std::size_t head_count) {
  DIVRL_REQUIRE(head_count >= 1, ConfigError, "scale_encoder_gradients: head_count must be >= 1");
  const double factor = 1.0 / static_cast<double>(head_count);
  for (std::size_t k : encoder_layers) {
    DIVRL_REQUIRE(k < gradient.layers.size(), ConfigError, "scale_encoder_gradients: layer index out of range");
    for (auto& v : gradient.layers[k].weight) v *= factor;
    for (auto& v : gradient.layers[k].bias) v *= factor;
  }
  return gradient;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  bool operator==(const AdamConfig&) const = default;
};

struct OptimState {
  ParamSet first_moment;
  ParamSet second_moment;
  std::int64_t step = 0;
  AdamConfig config;

  bool operator==(const OptimState&) const = default;
};

inline OptimState make_optim_state(const ParamSet& params, AdamConfig config = {}) {
  return OptimState{zeros_like(params), zeros_like(params), 0, config};
}

/// In-place bias-corrected Adam update. A non-finite gradient is rejected
/// with NumericError and leaves both params and state untouched.
inline void adam_step(ParamSet& params, const ParamSet& gradient, OptimState& state) {
  DIVRL_REQUIRE(same_shape(params, gradient) && same_shape(params, state.first_moment), ContractViolation,
                "optimizer_step: shape mismatch");
  DIVRL_REQUIRE(all_finite(gradient), NumericError, "optimizer_step: non-finite gradient");
  const AdamConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                      std::vector<double>& v) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
      }
    };
    update(params.layers[k].weight, gradient.layers[k].weight, state.first_moment.layers[k].weight,
           state.second_moment.layers[k].weight);
    update(params.layers[k].bias, gradient.layers[k].bias, state.first_moment.layers[k].bias,
           state.second_moment.layers[k].bias);
  }
}

inline std::pair<ParamSet, OptimState> optimizer_step(ParamSet params, const ParamSet& gradient, OptimState state) {
  adam_step(params, gradient, state);
  return {std::move(params), std::move(state)};
}

/// Adam for a single scalar parameter (used for the entropy temperature).
struct ScalarAdam {
  double m = 0.0;
  double v = 0.0;
  std::int64_t step = 0;
  AdamConfig config;

  void apply(double& param, double grad) {
    DIVRL_REQUIRE(std::isfinite(grad), NumericError, "optimizer_step: non-finite gradient");
    step += 1;
    const double t = static_cast<double>(step);
    m = config.beta1 * m + (1.0 - config.beta1) * grad;
    v = config.beta2 * v + (1.0 - config.beta2) * grad * grad;
    const double mhat = m / (1.0 - std::pow(config.beta1, t));
    const double vhat = v / (1.0 - std::pow(config.beta2, t));
    param -= config.learning_rate * mhat / (std::sqrt(vhat) + config.epsilon);
  }

  bool operator==(const ScalarAdam&) const = default;
};

}  // namespace divrl::nn

#pragma once

// Parameter layout shared by the discrete and continuous ensembles.
//
//   input -> trunk (first L hidden layers, one copy shared by all members)
//         -> encoder_i (remaining hidden layers, one per member)
//         -> head_i^h (one linear layer per head slot)
//
// Plain ensembles have one head per member; CERL has N (slot j learns member
// j's values); multi-horizon has K (slot k uses discount gamma_k).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "divrl/autodiff.hpp"
#include "divrl/error.hpp"
#include "divrl/rng.hpp"

namespace divrl::ensemble {

enum class HeadMode : std::uint8_t { plain, cerl, cerl_self_target, multi_horizon };

inline const char* to_string(HeadMode m) {
  switch (m) {
    case HeadMode::plain: return "plain";
    case HeadMode::cerl: return "cerl";
    case HeadMode::cerl_self_target: return "cerl_self_target";
    case HeadMode::multi_horizon: return "multi_horizon";
  }
  return "?";
}

inline HeadMode head_mode_from_string(const std::string& s) {
  if (s == "plain") return HeadMode::plain;
  if (s == "cerl") return HeadMode::cerl;
  if (s == "cerl_self_target") return HeadMode::cerl_self_target;
  if (s == "multi_horizon") return HeadMode::multi_horizon;
  throw ConfigError("unknown head_mode '" + s + "'");
}

struct GridLayout {
  std::size_t members = 1;
  std::size_t heads_per_member = 1;
  std::size_t shared_layers = 0;     // L
  std::vector<std::size_t> hidden;   // encoder widths, trunk included
  std::size_t input_dim = 1;
  std::size_t output_dim = 1;
  nn::Activation activation = nn::Activation::relu;
  HeadMode mode = HeadMode::plain;

  std::size_t encoder_depth() const { return hidden.size(); }
  std::size_t feature_dim() const { return hidden.empty() ? input_dim : hidden.back(); }

  /// Slot of member i's main head.
  std::size_t main_slot(std::size_t member) const {
    switch (mode) {
      case HeadMode::plain: return 0;
      case HeadMode::cerl:
      case HeadMode::cerl_self_target: return member;
      case HeadMode::multi_horizon: return heads_per_member - 1;
    }
    return 0;
  }

  void validate() const {
    DIVRL_REQUIRE(members >= 1, ConfigError, "ensemble size N must be >= 1");
    DIVRL_REQUIRE(heads_per_member >= 1, ConfigError, "each member needs at least one head");
    DIVRL_REQUIRE(shared_layers <= hidden.size(), ConfigError,
                  "shared_layers L = " + std::to_string(shared_layers) + " exceeds encoder depth " +
                      std::to_string(hidden.size()));
    DIVRL_REQUIRE(input_dim >= 1 && output_dim >= 1, ConfigError, "network dimensions must be positive");
    if (mode == HeadMode::cerl || mode == HeadMode::cerl_self_target) {
      DIVRL_REQUIRE(heads_per_member == members, ConfigError, "CERL needs N heads per member");
    }
    if (mode == HeadMode::plain) {
      DIVRL_REQUIRE(heads_per_member == 1, ConfigError, "plain mode has one head per member");
    }
  }
};

/// One full set of grid parameters (online or target).
struct GridParams {
  nn::ParamSet trunk;
  std::vector<nn::ParamSet> encoders;           // [member]
  std::vector<std::vector<nn::ParamSet>> heads;  // [member][slot]

  bool operator==(const GridParams&) const = default;

  template <typename F>
  void for_each(F&& f) {
    f(trunk);
    for (auto& e : encoders) f(e);
    for (auto& row : heads)
      for (auto& h : row) f(h);
  }
  template <typename F>
  void for_each(F&& f) const {
    f(trunk);
    for (const auto& e : encoders) f(e);
    for (const auto& row : heads)
      for (const auto& h : row) f(h);
  }

  std::uint64_t hash(std::uint64_t h = 0xcbf29ce484222325ULL) const {
    for_each([&h](const nn::ParamSet& p) { h = nn::hash_params(p, h); });
    return h;
  }
};

struct GridOptim {
  nn::OptimState trunk;
  std::vector<nn::OptimState> encoders;
  std::vector<std::vector<nn::OptimState>> heads;

  bool operator==(const GridOptim&) const = default;
};

/// Name used to derive the init stream of head (member, slot). Plain heads
/// are named by their member so a CERL grid with N = 1 initialises exactly
/// like a plain one.
inline std::string head_stream_name(const GridLayout& g, std::size_t member, std::size_t slot) {
  switch (g.mode) {
    case HeadMode::plain: return "head/" + std::to_string(member) + "/" + std::to_string(member);
    case HeadMode::cerl:
    case HeadMode::cerl_self_target: return "head/" + std::to_string(member) + "/" + std::to_string(slot);
    case HeadMode::multi_horizon: return "mh_head/" + std::to_string(member) + "/" + std::to_string(slot);
  }
  return "";
}

/// Randomly initialised grid. Every component draws from its own named
/// stream under `seed`, so members differ at init and adding heads never
/// shifts another component's initial values.
inline GridParams init_grid(const GridLayout& g, std::uint64_t seed, const std::string& tag) {
  g.validate();
  GridParams p;
  const std::span<const std::size_t> widths(g.hidden);
  {
    Rng rng = make_stream(seed, tag + "/trunk");
    p.trunk = nn::make_mlp(g.input_dim, widths.first(g.shared_layers), 0, g.activation, g.activation, rng);
  }
  const std::size_t enc_in = g.shared_layers == 0 ? g.input_dim : g.hidden[g.shared_layers - 1];
  for (std::size_t i = 0; i < g.members; ++i) {
    Rng rng = make_stream(seed, tag + "/encoder/" + std::to_string(i));
    p.encoders.push_back(nn::make_mlp(enc_in, widths.subspan(g.shared_layers), 0, g.activation, g.activation, rng));
  }
  p.heads.resize(g.members);
  for (std::size_t i = 0; i < g.members; ++i) {
    for (std::size_t h = 0; h < g.heads_per_member; ++h) {
      Rng rng = make_stream(seed, tag + "/" + head_stream_name(g, i, h));
      nn::ParamSet head;
      head.layers.push_back(nn::init_layer(g.feature_dim(), g.output_dim, nn::Activation::identity, rng));
      p.heads[i].push_back(std::move(head));
    }
  }
  return p;
}

inline GridParams zeros_like(const GridParams& p) {
  GridParams z = p;
  z.for_each([](nn::ParamSet& s) { nn::set_zero(s); });
  return z;
}

inline GridOptim make_grid_optim(const GridParams& p, nn::AdamConfig c) {
  GridOptim o;
  o.trunk = nn::make_optim_state(p.trunk, c);
  for (const auto& e : p.encoders) o.encoders.push_back(nn::make_optim_state(e, c));
  o.heads.resize(p.heads.size());
  for (std::size_t i = 0; i < p.heads.size(); ++i)
    for (const auto& h : p.heads[i]) o.heads[i].push_back(nn::make_optim_state(h, c));
  return o;
}

/// Reusable forward buffers for one member.
struct MemberPass {
  nn::Tape trunk;
  nn::Tape encoder;
  std::vector<nn::Tape> heads;
};

/// Runs trunk and member encoder; returns the feature vector.
inline const std::vector<double>& member_features(const GridParams& p, std::size_t member,
                                                  std::span<const double> input, MemberPass& pass) {
  nn::forward_into(p.trunk, input, pass.trunk);
  nn::forward_into(p.encoders[member], pass.trunk.output, pass.encoder);
  return pass.encoder.output;
}

inline const std::vector<double>& head_output(const GridParams& p, std::size_t member, std::size_t slot,
                                              std::span<const double> features, MemberPass& pass) {
  if (pass.heads.size() <= slot) pass.heads.resize(slot + 1);
  nn::forward_into(p.heads[member][slot], features, pass.heads[slot]);
  return pass.heads[slot].output;
}

/// Convenience: one head's output for one input.
inline std::vector<double> evaluate_head(const GridParams& p, std::size_t member, std::size_t slot,
                                         std::span<const double> input) {
  MemberPass pass;
  const auto& f = member_features(p, member, input, pass);
  return head_output(p, member, slot, f, pass);
}

/// Gradient accumulator with per-component "touched" flags; untouched
/// components skip the optimizer so a fully masked member stays frozen.
struct GridGradient {
  GridParams grad;
  bool trunk_touched = false;
  std::vector<bool> encoder_touched;
  std::vector<std::vector<bool>> head_touched;

  explicit GridGradient(const GridParams& shape) : grad(zeros_like(shape)) { reset(); }

  void reset() {
    grad.for_each([](nn::ParamSet& s) { nn::set_zero(s); });
    trunk_touched = false;
    encoder_touched.assign(grad.encoders.size(), false);
    head_touched.assign(grad.heads.size(), {});
    for (std::size_t i = 0; i < grad.heads.size(); ++i) head_touched[i].assign(grad.heads[i].size(), false);
  }
};

/// Backpropagates one member's head-output gradients (one vector per slot,
/// empty = no contribution). Writes d/d(input) into `input_grad` when non-null.
inline void member_backward(const GridParams& p, std::size_t member, const MemberPass& pass,
                            std::span<const std::vector<double>> head_grads, GridGradient& g,
                            std::vector<double>* input_grad = nullptr) {
  std::vector<double> dfeat(pass.encoder.output.size(), 0.0);
  std::vector<double> tmp;
  bool any = false;
  for (std::size_t h = 0; h < head_grads.size(); ++h) {
    if (head_grads[h].empty()) continue;
    any = true;
    nn::accumulate_backward(p.heads[member][h], pass.heads[h], head_grads[h], g.grad.heads[member][h], &tmp);
    g.head_touched[member][h] = true;
    for (std::size_t k = 0; k < dfeat.size(); ++k) dfeat[k] += tmp[k];
  }
  if (!any) return;
  std::vector<double> dtrunk;
  nn::accumulate_backward(p.encoders[member], pass.encoder, dfeat, g.grad.encoders[member], &dtrunk);
  g.encoder_touched[member] = true;
  nn::accumulate_backward(p.trunk, pass.trunk, dtrunk, g.grad.trunk, input_grad);
  g.trunk_touched = true;
}

/// d(head output . head_grad)/d(input) through head, encoder and trunk,
/// without touching any parameter gradient.
inline std::vector<double> member_input_gradient(const GridParams& p, std::size_t member, std::size_t slot,
                                                 const MemberPass& pass, std::span<const double> head_grad) {
  const auto dfeat = nn::input_gradient(p.heads[member][slot], pass.heads[slot], head_grad);
  const auto dtrunk = nn::input_gradient(p.encoders[member], pass.encoder, dfeat);
  return nn::input_gradient(p.trunk, pass.trunk, dtrunk);
}

/// Scales encoder gradients by the number of heads above them and applies
/// one Adam step to every touched component.
inline void apply_gradient(const GridLayout& layout, GridParams& params, GridGradient& g, GridOptim& optim) {
  auto all_layers = [](const nn::ParamSet& s) {
    std::vector<std::size_t> idx(s.layers.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    return idx;
  };
  if (g.trunk_touched && !params.trunk.empty()) {
    const auto idx = all_layers(g.grad.trunk);
    const nn::ParamSet scaled =
        nn::scale_encoder_gradients(g.grad.trunk, idx, layout.members * layout.heads_per_member);
    nn::adam_step(params.trunk, scaled, optim.trunk);
  }
  for (std::size_t i = 0; i < params.encoders.size(); ++i) {
    if (!g.encoder_touched[i] || params.encoders[i].empty()) continue;
    const auto idx = all_layers(g.grad.encoders[i]);
    const nn::ParamSet scaled = nn::scale_encoder_gradients(g.grad.encoders[i], idx, layout.heads_per_member);
    nn::adam_step(params.encoders[i], scaled, optim.encoders[i]);
  }
  for (std::size_t i = 0; i < params.heads.size(); ++i) {
    for (std::size_t h = 0; h < params.heads[i].size(); ++h) {
      if (!g.head_touched[i][h]) continue;
      nn::adam_step(params.heads[i][h], g.grad.heads[i][h], optim.heads[i][h]);
    }
  }
}

inline void polyak(GridParams& target, const GridParams& online, double tau) {
  DIVRL_REQUIRE(tau > 0.0 && tau <= 1.0, ConfigError, "soft update tau must lie in (0, 1]");
  nn::polyak_update(target.trunk, online.trunk, tau);
  for (std::size_t i = 0; i < target.encoders.size(); ++i) nn::polyak_update(target.encoders[i], online.encoders[i], tau);
  for (std::size_t i = 0; i < target.heads.size(); ++i)
    for (std::size_t h = 0; h < target.heads[i].size(); ++h)
      nn::polyak_update(target.heads[i][h], online.heads[i][h], tau);
}

}  // namespace divrl::ensemble

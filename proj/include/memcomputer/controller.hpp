#pragma once

// Recurrent controller: a stack of (optionally layer-normalized) LSTM layers,
// or a dense tanh stack without recurrence.

#include <cstddef>
#include <string>
#include <vector>

#include "memcomputer/rng.hpp"
#include "memcomputer/tensor.hpp"

namespace memcomputer {

enum class ControllerKind { lstm, dense };

struct ControllerSpec {
  ControllerKind kind = ControllerKind::lstm;
  std::vector<std::size_t> layers{256};
  bool layer_norm = true;
  // Normalize each gate block separately instead of the joint 4C vector.
  bool per_gate_norm = false;
  double ln_eps = 1e-5;

  std::size_t output_size() const { return layers.back(); }
};

struct LayerParams {
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  Tensor weight;   // lstm: [(in + C) x 4C] with gate blocks i, f, o, g; dense: [in x C]
  Tensor bias;     // [4C] or [C]
  Tensor ln_gain;  // undefined when layer norm is off
  Tensor ln_bias;
};

struct ControllerParams {
  ControllerSpec spec;
  std::size_t input_size = 0;
  std::vector<LayerParams> layers;

  std::size_t output_size() const { return spec.output_size(); }
  void append_to(ParameterList& out, const std::string& prefix) const;
};

struct LayerState {
  Tensor h;  // [B, C]
  Tensor c;  // [B, C]; unused by dense layers
};

struct ControllerState {
  std::vector<LayerState> layers;
};

// Uniform(±sqrt(6 / (fan_in + fan_out))) weights, forget-gate bias 1, other
// biases 0, LN gain 1 and bias 0.
ControllerParams init_controller(const ControllerSpec& spec, std::size_t input_size, Rng& rng);

// Allocates an all-zero parameter set of the right shapes.
ControllerParams zero_controller(const ControllerSpec& spec, std::size_t input_size);

ControllerState initial_controller_state(const ControllerParams& params, std::size_t batch);

// One LSTM layer step on x_in [B, in_l].
LayerState lstm_step_ln(const Tensor& x_in, const LayerState& prev, const ControllerParams& params,
                        std::size_t layer);

struct ControllerOutput {
  Tensor h;  // top-layer output [B, C]
  ControllerState state;
};

// Runs every layer bottom-up on [x_t; mu_prev]. Pass an undefined mu_prev for
// a controller that only sees x_t (the backward controller).
ControllerOutput controller_step(const Tensor& x_t, const Tensor& mu_prev, const ControllerState& state,
                                 const ControllerParams& params);

std::size_t controller_parameter_count(const ControllerSpec& spec, std::size_t input_size);

}  // namespace memcomputer

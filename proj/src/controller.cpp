#include "memcomputer/controller.hpp"

#include <cmath>

namespace memcomputer {

namespace {

std::size_t gate_width(const ControllerSpec& spec, std::size_t hidden) {
  return spec.kind == ControllerKind::lstm ? 4 * hidden : hidden;
}

std::size_t weight_rows(const ControllerSpec& spec, std::size_t in, std::size_t hidden) {
  return spec.kind == ControllerKind::lstm ? in + hidden : in;
}

LayerParams make_layer(const ControllerSpec& spec, std::size_t in, std::size_t hidden) {
  LayerParams p;
  p.input_size = in;
  p.hidden_size = hidden;
  const std::size_t cols = gate_width(spec, hidden);
  p.weight = Tensor({weight_rows(spec, in, hidden), cols}, true);
  p.bias = Tensor({cols}, true);
  if (spec.layer_norm) {
    p.ln_gain = Tensor::filled({cols}, 1.0).set_requires_grad(true);
    p.ln_bias = Tensor({cols}, true);
  }
  return p;
}

Tensor normalize(const Tensor& z, const LayerParams& p, const ControllerSpec& spec) {
  if (!spec.layer_norm) return z;
  if (!spec.per_gate_norm || spec.kind == ControllerKind::dense) {
    return layer_norm(z, p.ln_gain, p.ln_bias, spec.ln_eps);
  }
  const std::size_t c = p.hidden_size;
  std::vector<Tensor> blocks;
  for (std::size_t g = 0; g < 4; ++g) {
    blocks.push_back(layer_norm(slice(z, -1, g * c, c), slice(p.ln_gain, 0, g * c, c),
                                slice(p.ln_bias, 0, g * c, c), spec.ln_eps));
  }
  return concat(blocks, -1);
}

void check_input(const Tensor& x, std::size_t expected, const char* what) {
  if (x.rank() != 2 || x.dim(1) != expected) {
    throw ShapeError(std::string(what) + ": expected [B, " + std::to_string(expected) + "], got " +
                     shape_str(x.shape()));
  }
}

}  // namespace

void ControllerParams::append_to(ParameterList& out, const std::string& prefix) const {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = prefix + ".l" + std::to_string(l);
    out.push_back({p + ".weight", layers[l].weight});
    out.push_back({p + ".bias", layers[l].bias});
    if (layers[l].ln_gain.defined()) {
      out.push_back({p + ".ln_gain", layers[l].ln_gain});
      out.push_back({p + ".ln_bias", layers[l].ln_bias});
    }
  }
}

ControllerParams zero_controller(const ControllerSpec& spec, std::size_t input_size) {
  if (spec.layers.empty()) throw std::invalid_argument("controller needs at least one layer");
  ControllerParams params;
  params.spec = spec;
  params.input_size = input_size;
  std::size_t in = input_size;
  for (std::size_t hidden : spec.layers) {
    params.layers.push_back(make_layer(spec, in, hidden));
    in = hidden;
  }
  return params;
}

ControllerParams init_controller(const ControllerSpec& spec, std::size_t input_size, Rng& rng) {
  ControllerParams params = zero_controller(spec, input_size);
  for (LayerParams& p : params.layers) {
    const double fan_in = static_cast<double>(p.weight.dim(0));
    const double fan_out = static_cast<double>(p.weight.dim(1));
    const double s = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& w : p.weight.mutable_data()) w = rng.uniform(-s, s);
    if (spec.kind == ControllerKind::lstm) {
      auto b = p.bias.mutable_data();
      for (std::size_t j = p.hidden_size; j < 2 * p.hidden_size; ++j) b[j] = 1.0;
    }
  }
  return params;
}

ControllerState initial_controller_state(const ControllerParams& params, std::size_t batch) {
  ControllerState state;
  for (const LayerParams& p : params.layers) {
    state.layers.push_back({Tensor({batch, p.hidden_size}), Tensor({batch, p.hidden_size})});
  }
  return state;
}

LayerState lstm_step_ln(const Tensor& x_in, const LayerState& prev, const ControllerParams& params,
                        std::size_t layer) {
  const LayerParams& p = params.layers.at(layer);
  check_input(x_in, p.input_size, "lstm_step_ln");
  const std::size_t c = p.hidden_size;
  // Input and recurrent contributions come from one joint product.
  Tensor z = add(matmul(concat({x_in, prev.h}, 1), p.weight), p.bias);
  z = normalize(z, p, params.spec);
  const Tensor in_gate = sigmoid(slice(z, 1, 0, c));
  const Tensor forget_gate = sigmoid(slice(z, 1, c, c));
  const Tensor out_gate = sigmoid(slice(z, 1, 2 * c, c));
  const Tensor candidate = tanh(slice(z, 1, 3 * c, c));
  LayerState next;
  next.c = add(mul(forget_gate, prev.c), mul(in_gate, candidate));
  next.h = mul(out_gate, tanh(next.c));
  return next;
}

ControllerOutput controller_step(const Tensor& x_t, const Tensor& mu_prev, const ControllerState& state,
                                 const ControllerParams& params) {
  Tensor input = mu_prev.defined() ? concat({x_t, mu_prev}, 1) : x_t;
  ControllerOutput out;
  out.state.layers.reserve(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    if (params.spec.kind == ControllerKind::lstm) {
      out.state.layers.push_back(lstm_step_ln(input, state.layers.at(l), params, l));
    } else {
      const LayerParams& p = params.layers[l];
      check_input(input, p.input_size, "dense controller");
      Tensor z = normalize(add(matmul(input, p.weight), p.bias), p, params.spec);
      out.state.layers.push_back({tanh(z), state.layers.at(l).c});
    }
    input = out.state.layers.back().h;
  }
  out.h = input;
  return out;
}

std::size_t controller_parameter_count(const ControllerSpec& spec, std::size_t input_size) {
  std::size_t total = 0;
  std::size_t in = input_size;
  for (std::size_t hidden : spec.layers) {
    const std::size_t cols = gate_width(spec, hidden);
    total += weight_rows(spec, in, hidden) * cols + cols;
    if (spec.layer_norm) total += 2 * cols;
    in = hidden;
  }
  return total;
}

}  // namespace memcomputer

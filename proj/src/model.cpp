#include "memcomputer/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace memcomputer {

namespace {

void xavier(Tensor& t, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(t.dim(0) + t.dim(1)));
  for (double& w : t.mutable_data()) w = rng.uniform(-s, s);
}

Tensor output_weight(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}, true); }

// Values-only y = x · W for observations.
std::vector<double> project_values(const Tensor& x, const Tensor& w) {
  NoGradScope no_grad;
  const Tensor y = matmul(x, w);
  return {y.data().begin(), y.data().end()};
}

std::vector<double> add_values(std::vector<double> a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

Tensor embed(const Model& model, const Tensor& x) {
  return model.embedding.defined() ? matmul(x, model.embedding) : x;
}

}  // namespace

void validate(const ModelConfig& c) {
  if (c.input_size == 0 || c.output_size == 0) throw std::invalid_argument("X and Y must be >= 1");
  if (!(c.keep_prob > 0.0) || c.keep_prob > 1.0) throw std::invalid_argument("keep_prob must lie in (0, 1]");
  if (c.controller.layers.empty() || (c.bidirectional() && c.backward_controller.layers.empty())) {
    throw std::invalid_argument("controller needs at least one layer");
  }
  validate(c.memory);
}

ModelConfig apply_preset(ModelConfig c, const std::string& arch) {
  bool linkage = false, robust = false, bidir = false;
  if (arch == "dnc") {
    linkage = true;
  } else if (arch == "rsdnc") {
    robust = true;
  } else if (arch == "bdnc") {
    bidir = true;
    linkage = true;
  } else if (arch == "brsdnc") {
    robust = bidir = true;
  } else {
    throw std::invalid_argument("unknown architecture '" + arch + "'");
  }
  c.memory.variant = linkage ? MemoryVariant::dnc : MemoryVariant::cbmu;
  c.memory.layer_norm = robust;
  c.controller.layer_norm = robust;
  c.backward_controller.layer_norm = robust;
  c.keep_prob = robust ? 0.9 : 1.0;
  c.architecture = bidir ? Architecture::bidirectional : Architecture::unidirectional;
  return c;
}

ModelConfig babi_config(const std::string& arch) {
  ModelConfig c;
  c.input_size = 159;
  c.output_size = 159;
  c.memory.locations = 192;
  c.memory.width = 64;
  c.memory.read_heads = 4;
  c = apply_preset(c, arch);
  const std::size_t units = c.bidirectional() ? 172 : 256;
  c.controller.layers = {units};
  c.backward_controller.layers = {units};
  return c;
}

std::size_t Model::controller_width() const {
  return controller.output_size() + (config.bidirectional() ? backward_controller.output_size() : 0);
}

ParameterList Model::parameters() const {
  ParameterList out;
  if (embedding.defined()) out.push_back({"embedding", embedding});
  controller.append_to(out, "controller.fw");
  if (config.bidirectional()) backward_controller.append_to(out, "controller.bw");
  memory.append_to(out, "memory");
  out.push_back({"output.controller_weight", output.controller_weight});
  if (output.backward_weight.defined()) out.push_back({"output.backward_weight", output.backward_weight});
  out.push_back({"output.memory_weight", output.memory_weight});
  if (output.bias.defined()) out.push_back({"output.bias", output.bias});
  return out;
}

Model zero_model(const ModelConfig& config) {
  validate(config);
  Model m;
  m.config = config;
  const std::size_t p = config.memory.output_size();
  m.controller = zero_controller(config.controller, config.input_size + p);
  if (config.bidirectional()) m.backward_controller = zero_controller(config.backward_controller, config.input_size);
  m.memory = zero_mu_params(config.memory, m.controller_width());
  m.output.controller_weight = output_weight(m.controller.output_size(), config.output_size);
  if (config.bidirectional()) {
    m.output.backward_weight = output_weight(m.backward_controller.output_size(), config.output_size);
  }
  m.output.memory_weight = output_weight(p, config.output_size);
  if (config.output_bias) m.output.bias = Tensor({config.output_size}, true);
  if (config.embedding_vocab) m.embedding = Tensor({config.embedding_vocab, config.input_size}, true);
  return m;
}

Model init_model(const ModelConfig& config, Rng& rng) {
  validate(config);
  Model m;
  m.config = config;
  const std::size_t p = config.memory.output_size();
  m.controller = init_controller(config.controller, config.input_size + p, rng);
  if (config.bidirectional()) {
    m.backward_controller = init_controller(config.backward_controller, config.input_size, rng);
  }
  m.memory = init_mu_params(config.memory, m.controller_width(), rng);
  m.output.controller_weight = output_weight(m.controller.output_size(), config.output_size);
  xavier(m.output.controller_weight, rng);
  if (config.bidirectional()) {
    m.output.backward_weight = output_weight(m.backward_controller.output_size(), config.output_size);
    xavier(m.output.backward_weight, rng);
  }
  m.output.memory_weight = output_weight(p, config.output_size);
  xavier(m.output.memory_weight, rng);
  if (config.output_bias) m.output.bias = Tensor({config.output_size}, true);
  if (config.embedding_vocab) {
    m.embedding = Tensor({config.embedding_vocab, config.input_size}, true);
    for (double& w : m.embedding.mutable_data()) w = rng.uniform(-0.1, 0.1);
  }
  return m;
}

Tensor bypass_dropout(const Tensor& h, const DropoutSpec& spec) {
  if (spec.mode == DropoutMode::eval || spec.keep_prob == 1.0) return h;
  if (!spec.rng) throw std::logic_error("train-mode dropout needs an rng");
  return mul(h, Tensor(h.shape(), dropout_mask(h.numel(), spec.keep_prob, *spec.rng)));
}

Tensor output_step_uni(const Tensor& h, const Tensor& mu, const OutputParams& params,
                       const DropoutSpec& spec) {
  Tensor y = add(matmul(bypass_dropout(h, spec), params.controller_weight), matmul(mu, params.memory_weight));
  if (params.bias.defined()) y = add(y, params.bias);
  return y;
}

Tensor output_step_bi(const Tensor& h_fw, const Tensor& h_bw, const Tensor& mu,
                      const OutputParams& params, const DropoutSpec& spec) {
  Tensor y = matmul(mu, params.memory_weight);
  y = add(y, matmul(bypass_dropout(h_fw, spec), params.controller_weight));
  y = add(y, matmul(bypass_dropout(h_bw, spec), params.backward_weight));
  if (params.bias.defined()) y = add(y, params.bias);
  return y;
}

ForwardResult forward(const Model& model, const std::vector<Tensor>& inputs, const DropoutSpec& dropout,
                      const ForwardOptions& options) {
  return model.config.bidirectional() ? forward_bidirectional(model, inputs, dropout, options)
                                      : forward_unidirectional(model, inputs, dropout, options);
}

ForwardResult forward_unidirectional(const Model& model, const std::vector<Tensor>& inputs,
                                     const DropoutSpec& dropout, const ForwardOptions& options) {
  if (inputs.empty()) throw std::invalid_argument("forward needs T >= 1");
  const std::size_t batch = inputs[0].dim(0);
  const MuConfig& mc = model.config.memory;
  ForwardResult out;
  ControllerState cstate = initial_controller_state(model.controller, batch);
  MemoryState mstate = initial_memory_state(mc, batch);
  Tensor mu({batch, mc.output_size()});
  for (const Tensor& x_raw : inputs) {
    ControllerOutput c = controller_step(embed(model, x_raw), mu, cstate, model.controller);
    cstate = std::move(c.state);
    MuStepResult m = mu_step(c.h, mstate, model.memory, mc);
    mstate = m.state;
    mu = m.mu;
    out.logits.push_back(output_step_uni(c.h, mu, model.output, dropout));
    if (options.observe) {
      out.observations.push_back({m.signals, mstate.write_weighting,
                                  project_values(mu, model.output.memory_weight),
                                  project_values(c.h, model.output.controller_weight)});
    }
    out.controller.push_back(c.h);
    out.mu.push_back(mu);
  }
  return out;
}

ForwardResult forward_bidirectional(const Model& model, const std::vector<Tensor>& inputs,
                                    const DropoutSpec& dropout, const ForwardOptions& options) {
  if (inputs.empty()) throw std::invalid_argument("forward needs T >= 1");
  const std::size_t batch = inputs[0].dim(0), steps = inputs.size();
  const MuConfig& mc = model.config.memory;
  ForwardResult out;

  std::vector<Tensor> embedded;
  embedded.reserve(steps);
  for (const Tensor& x : inputs) embedded.push_back(embed(model, x));

  // Phase 1: the backward controller unrolls from T down to 1 on x_t alone.
  out.backward.resize(steps);
  ControllerState bstate = initial_controller_state(model.backward_controller, batch);
  for (std::size_t t = steps; t-- > 0;) {
    ControllerOutput c = controller_step(embedded[t], Tensor(), bstate, model.backward_controller);
    bstate = std::move(c.state);
    out.backward[t] = c.h;
  }

  // Phase 2: forward controller and memory unit.
  ControllerState fstate = initial_controller_state(model.controller, batch);
  MemoryState mstate = initial_memory_state(mc, batch);
  Tensor mu({batch, mc.output_size()});
  for (std::size_t t = 0; t < steps; ++t) {
    ControllerOutput c = controller_step(embedded[t], mu, fstate, model.controller);
    fstate = std::move(c.state);
    MuStepResult m = mu_step(concat({c.h, out.backward[t]}, 1), mstate, model.memory, mc);
    mstate = m.state;
    mu = m.mu;
    out.logits.push_back(output_step_bi(c.h, out.backward[t], mu, model.output, dropout));
    if (options.observe) {
      out.observations.push_back(
          {m.signals, mstate.write_weighting, project_values(mu, model.output.memory_weight),
           add_values(project_values(c.h, model.output.controller_weight),
                      project_values(out.backward[t], model.output.backward_weight))});
    }
    out.controller.push_back(c.h);
    out.mu.push_back(mu);
  }
  return out;
}

Tensor masked_loss(const std::vector<Tensor>& logits, const Tensor& targets, const Tensor& mask,
                   bool allow_empty) {
  const std::size_t batch = targets.dim(0), steps = targets.dim(1), y = targets.dim(2);
  if (logits.size() != steps || mask.dim(0) != batch || mask.dim(1) != steps) {
    throw ShapeError("masked_loss: logits/targets/mask disagree on [B, T]");
  }
  double count = 0.0;
  std::vector<double> weights(targets.data().begin(), targets.data().end());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      const double m = mask.data()[b * steps + t];
      count += m;
      for (std::size_t k = 0; k < y; ++k) weights[(b * steps + t) * y + k] *= m;
    }
  }
  if (count == 0.0) {
    if (!allow_empty) throw std::invalid_argument("masked_loss: mask selects no step");
    return Tensor::scalar(0.0);
  }
  std::vector<Tensor> rows;
  rows.reserve(steps);
  for (const Tensor& l : logits) rows.push_back(reshape(l, {batch, 1, y}));
  const Tensor stacked = concat(rows, 1);
  const Tensor picked = mul(log_softmax(stacked, -1), Tensor({batch, steps, y}, std::move(weights)));
  return mul_scalar(sum(picked), -1.0 / count);
}

std::vector<double> candidate_masked_predict(const std::vector<double>& logits,
                                             const std::vector<std::size_t>& candidates) {
  if (candidates.empty()) throw std::invalid_argument("candidate set is empty");
  double mx = -INFINITY;
  for (std::size_t c : candidates) mx = std::max(mx, logits.at(c));
  std::vector<double> p(logits.size(), 0.0);
  double z = 0.0;
  for (std::size_t c : candidates) {
    p[c] = std::exp(logits[c] - mx);
    z += p[c];
  }
  for (std::size_t c : candidates) p[c] /= z;
  return p;
}

ParameterCount count_parameters(const ModelConfig& c) {
  validate(c);
  ParameterCount n;
  const std::size_t p = c.memory.output_size();
  n.controllers = controller_parameter_count(c.controller, c.input_size + p);
  std::size_t width = c.controller.output_size();
  if (c.bidirectional()) {
    n.controllers += controller_parameter_count(c.backward_controller, c.input_size);
    width += c.backward_controller.output_size();
  }
  n.memory_unit = mu_parameter_count(c.memory, width);
  n.output = width * c.output_size + p * c.output_size + (c.output_bias ? c.output_size : 0);
  n.embedding = c.embedding_vocab * c.input_size;
  return n;
}

}  // namespace memcomputer

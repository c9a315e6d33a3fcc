#include "memcomputer/memory_unit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace memcomputer {

void validate(const MuConfig& config) {
  if (config.locations < 1 || config.width < 1 || config.read_heads < 1) {
    throw std::invalid_argument("memory config needs N, W, R >= 1");
  }
}

std::size_t interface_size(const MuConfig& c) {
  const std::size_t r = c.read_heads, w = c.width;
  std::size_t n = r * w + r + w + 1 + w + w + r + 1 + 1;
  if (c.has_linkage()) n += 3 * r;
  return n;
}

void MuParams::append_to(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".projection", projection});
  if (ln_gain.defined()) {
    out.push_back({prefix + ".ln_gain", ln_gain});
    out.push_back({prefix + ".ln_bias", ln_bias});
  }
}

MuParams zero_mu_params(const MuConfig& config, std::size_t controller_width) {
  validate(config);
  const std::size_t xi = interface_size(config);
  MuParams p;
  p.projection = Tensor({controller_width, xi}, true);
  if (config.layer_norm) {
    p.ln_gain = Tensor::filled({xi}, 1.0).set_requires_grad(true);
    p.ln_bias = Tensor({xi}, true);
  }
  return p;
}

MuParams init_mu_params(const MuConfig& config, std::size_t controller_width, Rng& rng) {
  MuParams p = zero_mu_params(config, controller_width);
  const double s = std::sqrt(6.0 / static_cast<double>(controller_width + interface_size(config)));
  for (double& w : p.projection.mutable_data()) w = rng.uniform(-s, s);
  return p;
}

std::size_t mu_parameter_count(const MuConfig& config, std::size_t controller_width) {
  const std::size_t xi = interface_size(config);
  return controller_width * xi + (config.layer_norm ? 2 * xi : 0);
}

MemoryState initial_memory_state(const MuConfig& c, std::size_t batch) {
  validate(c);
  const std::size_t n = c.locations, w = c.width, r = c.read_heads;
  MemoryState s;
  s.memory = Tensor({batch, n, w});
  s.usage = Tensor({batch, n});
  s.write_weighting = Tensor({batch, n});
  s.read_weightings = Tensor({batch, r, n});
  s.read_vectors = Tensor({batch, r, w});
  if (c.has_linkage()) {
    s.linkage = Tensor({batch, n, n});
    s.precedence = Tensor({batch, n});
  }
  return s;
}

Tensor project_interface(const Tensor& h, const MuParams& params, const MuConfig& config) {
  if (h.rank() != 2 || h.dim(1) != params.projection.dim(0)) {
    throw ShapeError("project_interface: controller output " + shape_str(h.shape()) +
                     " does not match projection " + shape_str(params.projection.shape()));
  }
  Tensor xi = matmul(h, params.projection);
  if (config.layer_norm) xi = layer_norm(xi, params.ln_gain, params.ln_bias, config.ln_eps);
  return xi;
}

InterfaceSignals split_interface(const Tensor& xi, const MuConfig& c) {
  if (xi.rank() != 2 || xi.dim(1) != interface_size(c)) {
    throw ShapeError("split_interface: expected [B, " + std::to_string(interface_size(c)) + "], got " +
                     shape_str(xi.shape()));
  }
  const std::size_t b = xi.dim(0), r = c.read_heads, w = c.width;
  std::vector<std::size_t> sizes{r * w, r, w, 1, w, w, r, 1, 1};
  if (c.has_linkage()) sizes.push_back(3 * r);
  const std::vector<Tensor> parts = split(xi, sizes, 1);
  InterfaceSignals s;
  s.read_keys = reshape(parts[0], {b, r, w});
  s.read_strengths = oneplus(parts[1]);
  s.write_key = reshape(parts[2], {b, 1, w});
  s.write_strength = oneplus(parts[3]);
  s.erase = sigmoid(parts[4]);
  s.write_vector = parts[5];
  s.free_gates = sigmoid(parts[6]);
  s.allocation_gate = sigmoid(parts[7]);
  s.write_gate = sigmoid(parts[8]);
  if (c.has_linkage()) s.read_modes = softmax(reshape(parts[9], {b, r, 3}), -1);
  return s;
}

Tensor content_weighting(const Tensor& memory, const Tensor& keys, const Tensor& strengths,
                         double cosine_eps) {
  const Tensor scores = cosine_similarity(memory, keys, cosine_eps);  // [B, K, N]
  Shape s = strengths.shape();
  s.push_back(1);
  return softmax(mul(scores, reshape(strengths, s)), -1);
}

std::pair<Tensor, Tensor> retention_usage(const Tensor& free_gates, const Tensor& prev_read_weightings,
                                          const Tensor& prev_usage, const Tensor& prev_write_weighting) {
  const std::size_t b = prev_read_weightings.dim(0), r = prev_read_weightings.dim(1),
                    n = prev_read_weightings.dim(2);
  const Tensor keep = one_minus(mul(reshape(free_gates, {b, r, 1}), prev_read_weightings));
  Tensor psi = reshape(slice(keep, 1, 0, 1), {b, n});
  for (std::size_t i = 1; i < r; ++i) psi = mul(psi, reshape(slice(keep, 1, i, 1), {b, n}));
  const Tensor carried =
      sub(add(prev_usage, prev_write_weighting), mul(prev_usage, prev_write_weighting));
  return {psi, mul(carried, psi)};
}

Tensor allocation_weighting(const Tensor& usage) {
  const std::size_t n = usage.dim(-1);
  const std::size_t lanes = usage.numel() / n;
  std::vector<double> out(usage.numel());
  auto order = std::make_shared<std::vector<std::size_t>>(usage.numel());
  const double* pu = usage.data().data();
  for (std::size_t lane = 0; lane < lanes; ++lane) {
    const double* u = pu + lane * n;
    std::size_t* phi = order->data() + lane * n;
    std::iota(phi, phi + n, std::size_t{0});
    std::stable_sort(phi, phi + n, [u](std::size_t a, std::size_t b) { return u[a] < u[b]; });
    double prod = 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[lane * n + phi[j]] = (1.0 - u[phi[j]]) * prod;
      prod *= u[phi[j]];
    }
  }
  const bool track = detail::tracking({&usage});
  Tensor result = detail::make_output(usage.shape(), std::move(out), track);
  if (track) {
    active_tape()->record([pu_ = usage.impl_ptr(), po = result.impl_ptr(), order, lanes, n] {
      if (po->grad.empty()) return;
      double* gu_all = pu_->grad_buffer();
      for (std::size_t lane = 0; lane < lanes; ++lane) {
        const double* u = pu_->data.data() + lane * n;
        const double* g = po->grad.data() + lane * n;
        const std::size_t* phi = order->data() + lane * n;
        double* gu = gu_all + lane * n;
        double prefix = 1.0;  // ∏_{k<l} u[φ_k]
        for (std::size_t l = 0; l < n; ++l) {
          // Direct term: ∂a[φ_l]/∂u[φ_l] = −∏_{k<l} u[φ_k].
          double acc = -g[phi[l]] * prefix;
          // Later entries: ∂a[φ_j]/∂u[φ_l] = (1 − u[φ_j]) ∏_{k<j, k≠l} u[φ_k].
          double excl = prefix;
          for (std::size_t j = l + 1; j < n; ++j) {
            acc += g[phi[j]] * (1.0 - u[phi[j]]) * excl;
            excl *= u[phi[j]];
          }
          gu[phi[l]] += acc;
          prefix *= u[phi[l]];
        }
      }
    });
  }
  return result;
}

Tensor write_weighting(const Tensor& write_gate, const Tensor& allocation_gate, const Tensor& allocation,
                       const Tensor& write_content) {
  return mul(write_gate,
             add(mul(allocation_gate, allocation), mul(one_minus(allocation_gate), write_content)));
}

Tensor memory_update(const Tensor& memory, const Tensor& write_weighting, const Tensor& erase,
                     const Tensor& write_vector) {
  const std::size_t b = memory.dim(0), n = memory.dim(1), w = memory.dim(2);
  const Tensor ww = reshape(write_weighting, {b, n, 1});
  const Tensor keep = one_minus(mul(ww, reshape(erase, {b, 1, w})));
  return add(mul(memory, keep), mul(ww, reshape(write_vector, {b, 1, w})));
}

std::pair<Tensor, Tensor> linkage_update(const Tensor& linkage, const Tensor& precedence,
                                         const Tensor& write_weighting) {
  const std::size_t b = linkage.dim(0), n = linkage.dim(1);
  const Tensor wi = reshape(write_weighting, {b, n, 1});
  const Tensor wj = reshape(write_weighting, {b, 1, n});
  std::vector<double> off_diag(n * n, 1.0);
  for (std::size_t i = 0; i < n; ++i) off_diag[i * n + i] = 0.0;
  const Tensor mask({n, n}, std::move(off_diag));
  const Tensor decayed = mul(one_minus(add(wi, wj)), linkage);
  const Tensor next_link = mul(add(decayed, mul(wi, reshape(precedence, {b, 1, n}))), mask);
  const Tensor written = sum(write_weighting, 1, true);  // [B, 1]
  const Tensor next_prec = add(mul(one_minus(written), precedence), write_weighting);
  return {next_link, next_prec};
}

Tensor read_weightings_dnc(const Tensor& linkage, const Tensor& prev_read_weightings,
                           const Tensor& read_content, const Tensor& read_modes) {
  const Tensor forward = matmul(prev_read_weightings, transpose(linkage));  // (L w)_i
  const Tensor backward = matmul(prev_read_weightings, linkage);            // (Lᵀ w)_i
  const Tensor pi_b = slice(read_modes, 2, 0, 1);
  const Tensor pi_c = slice(read_modes, 2, 1, 1);
  const Tensor pi_f = slice(read_modes, 2, 2, 1);
  return add(add(mul(pi_b, backward), mul(pi_c, read_content)), mul(pi_f, forward));
}

std::pair<Tensor, Tensor> read_vectors(const Tensor& memory, const Tensor& read_weightings) {
  const Tensor r = matmul(read_weightings, memory);  // [B, R, W]
  return {r, reshape(r, {r.dim(0), r.dim(1) * r.dim(2)})};
}

MuStepResult memory_step(const InterfaceSignals& s, const MemoryState& prev, const MuConfig& c) {
  const std::size_t b = prev.memory.dim(0), n = c.locations;
  MuStepResult out;
  out.signals = s;
  MemoryState& next = out.state;

  auto [psi, usage] =
      retention_usage(s.free_gates, prev.read_weightings, prev.usage, prev.write_weighting);
  next.usage = usage;
  const Tensor alloc = allocation_weighting(usage);
  const Tensor write_content =
      reshape(content_weighting(prev.memory, s.write_key, s.write_strength, c.cosine_eps), {b, n});
  next.write_weighting = write_weighting(s.write_gate, s.allocation_gate, alloc, write_content);
  next.memory = memory_update(prev.memory, next.write_weighting, s.erase, s.write_vector);

  const Tensor read_content = content_weighting(next.memory, s.read_keys, s.read_strengths, c.cosine_eps);
  if (c.has_linkage()) {
    std::tie(next.linkage, next.precedence) =
        linkage_update(prev.linkage, prev.precedence, next.write_weighting);
    next.read_weightings =
        read_weightings_dnc(next.linkage, prev.read_weightings, read_content, s.read_modes);
  } else {
    next.read_weightings = read_content;
  }
  std::tie(next.read_vectors, out.mu) = read_vectors(next.memory, next.read_weightings);
  return out;
}

MuStepResult mu_step(const Tensor& h, const MemoryState& prev, const MuParams& params,
                     const MuConfig& config) {
  return memory_step(split_interface(project_interface(h, params, config), config), prev, config);
}

}  // namespace memcomputer

#pragma once

// External memory: interface projection, write path (usage, allocation and
// content addressing) and the two read variants. The full DNC unit reads
// through the temporal linkage as well as by content; the content-based unit
// (CBMU) carries no linkage state and reads by content only.
//
// All tensors carry a leading batch axis B; lanes never interact.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "memcomputer/rng.hpp"
#include "memcomputer/tensor.hpp"

namespace memcomputer {

enum class MemoryVariant { dnc, cbmu };

struct MuConfig {
  std::size_t locations = 192;  // N
  std::size_t width = 64;       // W
  std::size_t read_heads = 4;   // R
  MemoryVariant variant = MemoryVariant::cbmu;
  bool layer_norm = true;
  double ln_eps = 1e-5;
  double cosine_eps = 1e-8;

  std::size_t output_size() const { return read_heads * width; }
  bool has_linkage() const { return variant == MemoryVariant::dnc; }
};

void validate(const MuConfig& config);

// |ξ| = R·W + R + W + 1 + W + W + R + 1 + 1, plus 3R read-mode logits for DNC.
std::size_t interface_size(const MuConfig& config);

struct InterfaceSignals {
  Tensor read_keys;        // [B, R, W]
  Tensor read_strengths;   // [B, R], >= 1
  Tensor write_key;        // [B, 1, W]
  Tensor write_strength;   // [B, 1], >= 1
  Tensor erase;            // [B, W] in (0, 1)
  Tensor write_vector;     // [B, W]
  Tensor free_gates;       // [B, R] in (0, 1)
  Tensor allocation_gate;  // [B, 1] in (0, 1)
  Tensor write_gate;       // [B, 1] in (0, 1)
  Tensor read_modes;       // [B, R, 3] (backward, content, forward); DNC only
};

struct MemoryState {
  Tensor memory;            // [B, N, W]
  Tensor usage;             // [B, N]
  Tensor write_weighting;   // [B, N]
  Tensor read_weightings;   // [B, R, N]
  Tensor read_vectors;      // [B, R, W]
  Tensor linkage;           // [B, N, N]; DNC only
  Tensor precedence;        // [B, N]; DNC only
};

struct MuParams {
  Tensor projection;  // [C_in x |ξ|]
  Tensor ln_gain;     // [|ξ|]; undefined when layer norm is off
  Tensor ln_bias;

  void append_to(ParameterList& out, const std::string& prefix) const;
};

MuParams init_mu_params(const MuConfig& config, std::size_t controller_width, Rng& rng);
MuParams zero_mu_params(const MuConfig& config, std::size_t controller_width);
std::size_t mu_parameter_count(const MuConfig& config, std::size_t controller_width);

// All-zero state.
MemoryState initial_memory_state(const MuConfig& config, std::size_t batch);

// ξ = LN(h · W_ξ), one joint normalization over the whole interface vector.
Tensor project_interface(const Tensor& h, const MuParams& params, const MuConfig& config);

// Fixed slice order: read keys, read strengths, write key, write strength,
// erase, write vector, free gates, allocation gate, write gate, read modes.
InterfaceSignals split_interface(const Tensor& xi, const MuConfig& config);

// keys [B, K, W], strengths [B, K] -> [B, K, N] softmax over locations of
// strength · cosine(memory row, key).
Tensor content_weighting(const Tensor& memory, const Tensor& keys, const Tensor& strengths,
                         double cosine_eps = 1e-8);

// Returns (ψ, u) with ψ = ∏_i (1 − f_i w^r_prev,i) and
// u = (u_prev + w^w_prev − u_prev ∘ w^w_prev) ∘ ψ.
std::pair<Tensor, Tensor> retention_usage(const Tensor& free_gates, const Tensor& prev_read_weightings,
                                          const Tensor& prev_usage, const Tensor& prev_write_weighting);

// Least-used-first allocation over the last axis. The ascending sort order
// (stable, lower index first on ties) is treated as a constant when
// differentiating.
Tensor allocation_weighting(const Tensor& usage);

// w^w = g^w · (g^a · a + (1 − g^a) · c^w).
Tensor write_weighting(const Tensor& write_gate, const Tensor& allocation_gate, const Tensor& allocation,
                       const Tensor& write_content);

// M' = M ∘ (1 − w^w eᵀ) + w^w vᵀ.
Tensor memory_update(const Tensor& memory, const Tensor& write_weighting, const Tensor& erase,
                     const Tensor& write_vector);

// Returns (L', p').
std::pair<Tensor, Tensor> linkage_update(const Tensor& linkage, const Tensor& precedence,
                                         const Tensor& write_weighting);

// w^r = π_b · Lᵀ w_prev + π_c · c^r + π_f · L w_prev, per head.
Tensor read_weightings_dnc(const Tensor& linkage, const Tensor& prev_read_weightings,
                           const Tensor& read_content, const Tensor& read_modes);

// Returns (r [B, R, W], μ [B, R·W]) with r_i = Mᵀ w^r_i concatenated in head order.
std::pair<Tensor, Tensor> read_vectors(const Tensor& memory, const Tensor& read_weightings);

struct MuStepResult {
  Tensor mu;  // [B, R·W]
  MemoryState state;
  InterfaceSignals signals;
};

// Write then read, driven directly by interface signals.
MuStepResult memory_step(const InterfaceSignals& signals, const MemoryState& prev, const MuConfig& config);

// Projection, split and memory_step.
MuStepResult mu_step(const Tensor& h, const MemoryState& prev, const MuParams& params,
                     const MuConfig& config);

}  // namespace memcomputer

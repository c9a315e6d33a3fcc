#pragma once

// Sequence models built from controller(s), memory unit and output layer:
// unidirectional (rs)DNC and bidirectional B(rs)DNC, with bypass dropout on
// the controller-to-output path.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "memcomputer/controller.hpp"
#include "memcomputer/memory_unit.hpp"
#include "memcomputer/rng.hpp"
#include "memcomputer/tensor.hpp"

namespace memcomputer {

enum class Architecture { unidirectional, bidirectional };

struct ModelConfig {
  std::size_t input_size = 159;   // X
  std::size_t output_size = 159;  // Y
  ControllerSpec controller;           // forward controller
  ControllerSpec backward_controller;  // bidirectional only
  MuConfig memory;
  double keep_prob = 0.9;  // bypass dropout keep probability
  Architecture architecture = Architecture::unidirectional;
  bool output_bias = true;
  // When non-zero, inputs are one-hot rows over this many tokens and are
  // mapped to input_size features through a trainable embedding matrix.
  std::size_t embedding_vocab = 0;

  bool bidirectional() const { return architecture == Architecture::bidirectional; }
  // Width of the model's per-step input rows.
  std::size_t feed_size() const { return embedding_vocab ? embedding_vocab : input_size; }
};

void validate(const ModelConfig& config);

// Named variants: "dnc" (DNC memory, no layer norm, no bypass dropout),
// "rsdnc" (CBMU + layer norm + bypass dropout), and their bidirectional
// counterparts "bdnc" and "brsdnc". Sizes are left to the caller.
ModelConfig apply_preset(ModelConfig base, const std::string& arch);

// Reference sizes of the bAbI experiments: X = Y = 159, one LSTM layer of
// 256 units (172 per direction when bidirectional), N = 192, W = 64, R = 4.
ModelConfig babi_config(const std::string& arch);

struct OutputParams {
  Tensor controller_weight;  // W_h, or W_fwh when bidirectional: [C x Y]
  Tensor backward_weight;    // W_bwh: [C_bw x Y], bidirectional only
  Tensor memory_weight;      // W_μ: [P x Y]
  Tensor bias;               // [Y], undefined when disabled
};

struct Model {
  ModelConfig config;
  ControllerParams controller;
  ControllerParams backward_controller;
  MuParams memory;
  OutputParams output;
  Tensor embedding;  // [embedding_vocab x X] when enabled

  // Stable names and order; checkpoints rely on both.
  ParameterList parameters() const;
  std::size_t controller_width() const;  // C_in of the memory unit
};

Model init_model(const ModelConfig& config, Rng& rng);
Model zero_model(const ModelConfig& config);

enum class DropoutMode { train, eval };

struct DropoutSpec {
  double keep_prob = 1.0;
  DropoutMode mode = DropoutMode::eval;
  Rng* rng = nullptr;  // consulted only in train mode with keep_prob < 1
};

Tensor bypass_dropout(const Tensor& h, const DropoutSpec& spec);

// y = W_h · drop(h) + W_μ · μ + b.
Tensor output_step_uni(const Tensor& h, const Tensor& mu, const OutputParams& params,
                       const DropoutSpec& spec);

// y = W_μ · μ + W_fwh · drop(h_fw) + W_bwh · drop(h_bw) + b, with
// independent masks per branch.
Tensor output_step_bi(const Tensor& h_fw, const Tensor& h_bw, const Tensor& mu,
                      const OutputParams& params, const DropoutSpec& spec);

// Per-step observations gathered for introspection. Values only; gathering
// them never touches the tape or the dropout stream.
struct StepObservation {
  InterfaceSignals signals;
  Tensor write_weighting;            // [B, N]
  std::vector<double> memory_term;   // W_μ μ, [B x Y]
  std::vector<double> bypass_term;   // controller contribution without dropout, [B x Y]
};

struct ForwardOptions {
  bool observe = false;
};

struct ForwardResult {
  std::vector<Tensor> logits;      // T tensors of [B, Y]
  std::vector<Tensor> controller;  // forward controller outputs h_t
  std::vector<Tensor> backward;    // backward controller outputs, bidirectional only
  std::vector<Tensor> mu;          // memory outputs μ_t
  std::vector<StepObservation> observations;
};

// inputs: T tensors of [B, feed_size]. Dispatches on the architecture.
ForwardResult forward(const Model& model, const std::vector<Tensor>& inputs, const DropoutSpec& dropout,
                      const ForwardOptions& options = {});
ForwardResult forward_unidirectional(const Model& model, const std::vector<Tensor>& inputs,
                                     const DropoutSpec& dropout, const ForwardOptions& options = {});
ForwardResult forward_bidirectional(const Model& model, const std::vector<Tensor>& inputs,
                                    const DropoutSpec& dropout, const ForwardOptions& options = {});

// Mean over masked steps of −log softmax(y_t)[target_t].
// targets: [B, T, Y] one-hot; mask: [B, T] of 0/1. An all-zero mask throws
// unless allow_empty is set, in which case the loss is 0.
Tensor masked_loss(const std::vector<Tensor>& logits, const Tensor& targets, const Tensor& mask,
                   bool allow_empty = false);

// Softmax restricted to the candidate indices; other entries are exactly 0.
std::vector<double> candidate_masked_predict(const std::vector<double>& logits,
                                             const std::vector<std::size_t>& candidates);

struct ParameterCount {
  std::size_t controllers = 0;
  std::size_t memory_unit = 0;
  std::size_t output = 0;
  std::size_t embedding = 0;  // reported separately

  std::size_t model() const { return controllers + memory_unit + output; }
};

ParameterCount count_parameters(const ModelConfig& config);

}  // namespace memcomputer

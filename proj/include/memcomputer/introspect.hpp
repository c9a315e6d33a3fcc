#pragma once

// Analysis instruments: per-step gate traces, the memory-influence probe,
// analytic per-step state-size accounting and parameter reports.

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "memcomputer/model.hpp"
#include "memcomputer/tasks.hpp"

namespace memcomputer {

struct StepTrace {
  std::size_t t = 0;  // 1-based
  std::string token;
  std::vector<double> free_gates;                // [R]
  double allocation_gate = 0.0;
  double write_gate = 0.0;
  std::vector<std::array<double, 3>> read_modes;  // (backward, content, forward) per head; empty for CBMU
  double write_entropy = 0.0;                     // −Σ w log w of the write weighting, nats
  double influence_pct = 0.0;
  bool is_answer = false;

  bool operator==(const StepTrace&) const = default;
};

// 100·‖m‖₁ / (‖m‖₁ + ‖b‖₁ + 1e−12) for the memory term m = W_μ μ and bypass
// term b = W_h h of one output step.
double influence_percent(std::span<const double> memory_term, std::span<const double> bypass_term);

// Runs a batch of one in eval mode and returns one trace per step. Tracing
// only observes: the logits are identical to an untraced forward pass.
std::vector<StepTrace> record_traces(const Model& model, const Sample& sample, const Vocabulary& vocab);

struct InfluenceReport {
  std::vector<double> per_step;  // influence_pct per step
  double mean_pct = 0.0;
  double answer_mean_pct = 0.0;  // mean over answer-requested steps
  // Fraction of answer steps where the memory-only output (bypass zeroed,
  // same state trajectory) has the same argmax as the full output.
  double agreement = 0.0;
  std::size_t answer_steps = 0;
};

InfluenceReport memory_influence(const Model& model, const Sample& sample, const Vocabulary& vocab);
// Pools answer steps over a corpus.
InfluenceReport memory_influence(const Model& model, const std::vector<Sample>& corpus, const Vocabulary& vocab);

// Floats held per time step per sample.
struct StateSizeReport {
  std::size_t memory = 0;              // N·W
  std::size_t linkage = 0;             // N²
  std::size_t precedence = 0;          // N
  std::size_t usage = 0;               // N
  std::size_t write_weighting = 0;     // N
  std::size_t read_weightings = 0;     // R·N
  std::size_t read_vectors = 0;        // R·W
  std::size_t controller_state = 0;    // h and c of every LSTM layer
  std::size_t controller_preact = 0;   // gate pre-activations
  std::size_t controller_input = 0;    // per-layer inputs retained for BPTT
  std::size_t interface_dnc = 0;       // |ξ| including read-mode logits
  std::size_t interface_cbmu = 0;

  std::size_t mu_state_dnc = 0;
  std::size_t mu_state_cbmu = 0;
  std::size_t total_dnc = 0;
  std::size_t total_cbmu = 0;
  double linkage_share = 0.0;  // (N² + N) / DNC memory-unit state
  double reduction = 0.0;      // 1 − CBMU total / DNC total

  std::size_t seq_len = 1;
  std::size_t batch = 1;
  std::size_t retained_dnc = 0;  // total × seq_len × batch
  std::size_t retained_cbmu = 0;
};

// Analytic accounting for both memory variants under the configuration's
// sizes, whatever variant it names.
StateSizeReport state_size_report(const ModelConfig& config, std::size_t seq_len = 1, std::size_t batch = 1);
std::string format_state_size_report(const StateSizeReport& report);
std::string format_parameter_report(const ModelConfig& config);

enum class TraceFormat { csv, json };

// CSV columns: t,token,free_g_1..R,alloc_g,write_g,mode_b_1..R,mode_c_1..R,
// mode_f_1..R,influence_pct,is_answer,write_entropy. Mode cells are empty
// for the content-based unit.
std::string trace_csv_header(std::size_t read_heads);
void export_traces(const std::vector<StepTrace>& traces, const std::filesystem::path& path, TraceFormat format);
std::vector<StepTrace> read_traces(const std::filesystem::path& path, TraceFormat format);

}  // namespace memcomputer

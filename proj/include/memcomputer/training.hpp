#pragma once

// Mini-batch BPTT training with RMSprop, sequence padding and masking,
// checkpoint/resume and evaluation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "memcomputer/model.hpp"
#include "memcomputer/tasks.hpp"
#include "memcomputer/tensor.hpp"

namespace memcomputer {

enum class Padding { end, front };

struct TrainConfig {
  std::size_t batch_size = 32;
  double learning_rate = 3e-5;
  double momentum = 0.9;
  double decay = 0.9;
  double eps = 1e-10;
  double clip_norm = 10.0;  // global L2 norm; <= 0 disables clipping
  std::size_t max_len = 800;
  Padding padding = Padding::end;
  std::size_t steps = 1000;  // optimizer steps
  std::size_t eval_every = 100;
  std::size_t eval_batch_size = 64;
  std::uint64_t seed = 1;
  // Stop after the first evaluation whose validation WER is below this.
  std::optional<double> early_stop_wer;
  // Number of most recent checkpoints kept on disk; 0 keeps all.
  std::size_t keep_checkpoints = 0;
  // Real elapsed milliseconds in the metrics log. Off by default so that the
  // log of a seeded run is byte-reproducible.
  bool log_wall_time = false;
};

void validate(const TrainConfig& config);

struct OptimizerState {
  std::vector<Tensor> acc;  // mean-square accumulators, aligned with Model::parameters()
  std::vector<Tensor> mom;  // momentum buffers
  std::size_t step = 0;
};

OptimizerState init_optimizer(const ParameterList& params);

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// acc ← decay·acc + (1−decay)·g², mom ← momentum·mom + lr·g/√(acc+eps),
// θ ← θ − mom. Missing gradients count as zero. A non-finite gradient entry
// throws NonFiniteError before anything is modified.
void rmsprop_step(const ParameterList& params, OptimizerState& state, double lr, double momentum,
                  double decay, double eps);

// Global L2 norm of all gradients, before clipping.
double gradient_norm(const ParameterList& params);
// Rescales every gradient so that the global norm is at most max_norm.
// Returns the norm before clipping.
double clip_gradients(const ParameterList& params, double max_norm);

struct Batch {
  std::vector<Tensor> inputs;          // T tensors of [B, |V|]
  Tensor targets;                      // [B, T, |V|] one-hot, zero rows where unmasked
  Tensor mask;                         // [B, T]
  std::vector<std::vector<long>> ids;  // [B][T] target index, -1 where unmasked
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> samples;    // corpus index of each lane
  std::size_t steps() const { return inputs.size(); }
  std::size_t size() const { return lengths.size(); }
};

// Pads to the longest member with all-zero rows and mask 0.
Batch make_batch(const std::vector<Sample>& corpus, const std::vector<std::size_t>& members,
                 const Vocabulary& vocab, Padding padding);

// Shuffles with Rng(mix(seed, epoch)) (no shuffle when shuffle is false),
// drops samples longer than max_len and groups the rest. The last batch may
// be smaller.
std::vector<Batch> make_batches(const std::vector<Sample>& corpus, const Vocabulary& vocab,
                                std::size_t batch_size, std::size_t max_len, Padding padding,
                                std::uint64_t seed, std::uint64_t epoch = 0, bool shuffle = true);

struct EvalResult {
  double loss = 0.0;      // mean over answered steps
  double wer = 0.0;       // wrong answer words / requested words
  double accuracy = 0.0;  // samples with every answer word right
  std::size_t samples = 0;
  std::size_t words = 0;
};

// Argmax predictions over the whole output, eval-mode dropout.
EvalResult evaluate(const Model& model, const std::vector<Sample>& corpus, const Vocabulary& vocab,
                    std::size_t batch_size, std::size_t max_len, Padding padding);

struct TrainProgress {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t cursor = 0;  // next batch within the epoch
  std::uint64_t dropout_rng = 0;
};

struct TrainSummary {
  std::size_t steps = 0;
  std::optional<std::size_t> converged_step;  // first eval step meeting early_stop_wer
  EvalResult last_eval;
  std::filesystem::path last_checkpoint;
};

struct TrainState {
  Model model;
  OptimizerState optimizer;
  TrainProgress progress;
};

// Fresh state: parameters from Rng(mix(seed, 0)), dropout stream
// Rng(mix(seed, 1)).
TrainState initial_train_state(const ModelConfig& model_config, const TrainConfig& config);

// Runs until config.steps optimizer steps have been taken (or early stop).
// Writes metrics.csv and ckpt-<step>/ under run_dir at every evaluation.
// metrics.csv rows beyond the resumed step are discarded, so a resumed run
// reproduces the log of an uninterrupted one.
TrainSummary train(TrainState& state, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                   const Vocabulary& vocab, const TrainConfig& config, const std::filesystem::path& run_dir);

// Resumes from a checkpoint written by train().
TrainState resume_train_state(const std::filesystem::path& checkpoint);

struct PretrainResult {
  TrainSummary pretrain;
  TrainSummary finetune;
};

// Trains on corpus A, then keeps the parameters, resets the optimizer
// accumulators and trains on corpus B. Each phase gets its own run
// subdirectory ("pretrain", "finetune"). Throws std::invalid_argument if the
// corpora do not fit the shared vocabulary.
PretrainResult pretrain_finetune(TrainState& state, const std::vector<Sample>& train_a,
                                 const std::vector<Sample>& val_a, const std::vector<Sample>& train_b,
                                 const std::vector<Sample>& val_b, const Vocabulary& vocab,
                                 const TrainConfig& config_a, const TrainConfig& config_b,
                                 const std::filesystem::path& run_dir);

struct ModelGradCheck {
  std::vector<std::pair<std::string, double>> blocks;  // max relative error per parameter tensor
  double max_rel_error = 0.0;
};

// Compares full-BPTT gradients of the masked loss against central finite
// differences on a random input/target/mask set. Dropout runs in train mode
// with the same mask sequence for every evaluation.
ModelGradCheck model_gradcheck(const ModelConfig& config, std::size_t steps, std::size_t batch,
                               std::uint64_t seed, double h = 1e-5, double floor = 1e-8);

}  // namespace memcomputer

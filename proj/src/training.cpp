#include "memcomputer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "memcomputer/checkpoint.hpp"
#include "memcomputer/config.hpp"

namespace memcomputer {

namespace fs = std::filesystem;

void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (c.eval_batch_size < 1) throw std::invalid_argument("eval_batch_size must be >= 1");
  if (!(c.learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be >= 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(c.decay >= 0.0 && c.decay < 1.0)) throw std::invalid_argument("decay must lie in [0, 1)");
  if (!(c.eps > 0.0)) throw std::invalid_argument("eps must be > 0");
  if (c.max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  if (c.eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
}

OptimizerState init_optimizer(const ParameterList& params) {
  OptimizerState s;
  for (const NamedTensor& p : params) {
    s.acc.emplace_back(p.tensor.shape());
    s.mom.emplace_back(p.tensor.shape());
  }
  return s;
}

void rmsprop_step(const ParameterList& params, OptimizerState& state, double lr, double momentum,
                  double decay, double eps) {
  if (state.acc.size() != params.size() || state.mom.size() != params.size()) {
    throw std::invalid_argument("optimizer state does not match the parameter list");
  }
  for (const NamedTensor& p : params) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in '" + p.name + "'");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor theta = params[i].tensor;
    const auto g = theta.grad();
    auto acc = state.acc[i].mutable_data();
    auto mom = state.mom[i].mutable_data();
    auto w = theta.mutable_data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      acc[k] = decay * acc[k] + (1.0 - decay) * gk * gk;
      mom[k] = momentum * mom[k] + lr * gk / std::sqrt(acc[k] + eps);
      w[k] -= mom[k];
    }
  }
  ++state.step;
}

double gradient_norm(const ParameterList& params) {
  double sq = 0.0;
  for (const NamedTensor& p : params) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_gradients(const ParameterList& params, double max_norm) {
  const double norm = gradient_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const NamedTensor& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.impl()->grad) g *= scale;
    }
  }
  return norm;
}

Batch make_batch(const std::vector<Sample>& corpus, const std::vector<std::size_t>& members,
                 const Vocabulary& vocab, Padding padding) {
  if (members.empty()) throw std::invalid_argument("make_batch: empty batch");
  const std::size_t b_size = members.size(), v = vocab.size();
  std::vector<EncodedSample> enc;
  std::size_t steps = 0;
  for (std::size_t idx : members) {
    enc.push_back(encode(corpus.at(idx), vocab));
    steps = std::max(steps, enc.back().mask.size());
  }
  Batch batch;
  batch.samples = members;
  std::vector<std::vector<double>> rows(steps, std::vector<double>(b_size * v, 0.0));
  std::vector<double> targets(b_size * steps * v, 0.0), mask(b_size * steps, 0.0);
  batch.ids.assign(b_size, std::vector<long>(steps, -1));
  for (std::size_t b = 0; b < b_size; ++b) {
    const EncodedSample& e = enc[b];
    const std::size_t len = e.mask.size();
    const std::size_t offset = padding == Padding::front ? steps - len : 0;
    batch.lengths.push_back(len);
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t s = t + offset;
      rows[s][b * v + e.ids[t]] = 1.0;
      if (e.mask[t] != 0.0) {
        mask[b * steps + s] = 1.0;
        targets[(b * steps + s) * v + static_cast<std::size_t>(e.targets[t])] = 1.0;
        batch.ids[b][s] = e.targets[t];
      }
    }
  }
  for (auto& r : rows) batch.inputs.emplace_back(Shape{b_size, v}, std::move(r));
  batch.targets = Tensor({b_size, steps, v}, std::move(targets));
  batch.mask = Tensor({b_size, steps}, std::move(mask));
  return batch;
}

std::vector<Batch> make_batches(const std::vector<Sample>& corpus, const Vocabulary& vocab,
                                std::size_t batch_size, std::size_t max_len, Padding padding,
                                std::uint64_t seed, std::uint64_t epoch, bool shuffle_order) {
  if (batch_size < 1) throw std::invalid_argument("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_order) {
    Rng rng(Rng::mix(seed, epoch));
    shuffle(order, rng);
  }
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    if (corpus[i].tokens.size() <= max_len) kept.push_back(i);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < kept.size(); start += batch_size) {
    const std::size_t end = std::min(kept.size(), start + batch_size);
    out.push_back(make_batch(corpus, {kept.begin() + start, kept.begin() + end}, vocab, padding));
  }
  return out;
}

namespace {

void check_dimensions(const ModelConfig& c, const Vocabulary& vocab) {
  if (c.feed_size() != vocab.size() || c.output_size != vocab.size()) {
    throw std::invalid_argument("model input/output sizes (" + std::to_string(c.feed_size()) + ", " +
                                std::to_string(c.output_size) + ") do not match the vocabulary size " +
                                std::to_string(vocab.size()));
  }
}

// Running totals of loss and answer correctness over a set of batches.
struct Tally {
  double loss_sum = 0.0;
  std::size_t words = 0, wrong = 0, samples = 0, correct = 0;

  void add(const Batch& batch, const std::vector<Tensor>& logits, double loss) {
    const std::size_t y = logits.front().dim(1);
    std::size_t batch_words = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      bool all_right = true;
      for (std::size_t t = 0; t < batch.steps(); ++t) {
        const long target = batch.ids[b][t];
        if (target < 0) continue;
        const auto row = logits[t].data().subspan(b * y, y);
        const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
        ++batch_words;
        if (pred != target) {
          ++wrong;
          all_right = false;
        }
      }
      ++samples;
      correct += all_right ? 1 : 0;
    }
    words += batch_words;
    loss_sum += loss * static_cast<double>(batch_words);
  }

  EvalResult result() const {
    EvalResult r;
    r.samples = samples;
    r.words = words;
    if (words) {
      r.loss = loss_sum / static_cast<double>(words);
      r.wer = static_cast<double>(wrong) / static_cast<double>(words);
    }
    if (samples) r.accuracy = static_cast<double>(correct) / static_cast<double>(samples);
    return r;
  }
};

std::string format_row(std::size_t step, const char* split, const EvalResult& r, long long wall_ms) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.10g,%.10g,%.10g,%lld\n", step, split, r.loss, r.wer, r.accuracy,
                wall_ms);
  return buf;
}

constexpr const char* kMetricsHeader = "step,split,loss,wer,accuracy,wall_ms\n";

// Keeps the header and every row up to `step`, so a resumed run appends
// exactly what an uninterrupted run would have written.
void prepare_metrics(const fs::path& path, std::size_t step) {
  std::string kept = kMetricsHeader;
  if (step > 0 && fs::exists(path)) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const std::size_t row_step = std::stoul(line.substr(0, line.find(',')));
      if (row_step <= step) kept += line + "\n";
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kept;
}

fs::path checkpoint_path(const fs::path& run_dir, std::size_t step) {
  return run_dir / ("ckpt-" + std::to_string(step)) / "checkpoint.bin";
}

void prune_checkpoints(const fs::path& run_dir, std::size_t keep) {
  if (keep == 0) return;
  std::vector<std::pair<std::size_t, fs::path>> found;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || name.rfind("ckpt-", 0) != 0) continue;
    try {
      found.emplace_back(std::stoul(name.substr(5)), entry.path());
    } catch (const std::exception&) {
    }
  }
  std::sort(found.begin(), found.end());
  for (std::size_t i = 0; i + keep < found.size(); ++i) fs::remove_all(found[i].second);
}

}  // namespace

EvalResult evaluate(const Model& model, const std::vector<Sample>& corpus, const Vocabulary& vocab,
                    std::size_t batch_size, std::size_t max_len, Padding padding) {
  check_dimensions(model.config, vocab);
  NoGradScope no_grad;
  Tally tally;
  const DropoutSpec eval_mode{model.config.keep_prob, DropoutMode::eval, nullptr};
  for (const Batch& batch : make_batches(corpus, vocab, batch_size, max_len, padding, 0, 0, false)) {
    const ForwardResult fr = forward(model, batch.inputs, eval_mode);
    const double loss = masked_loss(fr.logits, batch.targets, batch.mask, true).item();
    tally.add(batch, fr.logits, loss);
  }
  return tally.result();
}

TrainState initial_train_state(const ModelConfig& model_config, const TrainConfig& config) {
  validate(config);
  TrainState s;
  Rng init_rng(Rng::mix(config.seed, 0));
  s.model = init_model(model_config, init_rng);
  s.optimizer = init_optimizer(s.model.parameters());
  s.progress.dropout_rng = Rng::mix(config.seed, 1);
  return s;
}

TrainState resume_train_state(const fs::path& checkpoint) {
  Checkpoint ck = load_checkpoint(checkpoint);
  TrainState s;
  s.model = std::move(ck.model);
  s.optimizer = ck.optimizer ? std::move(*ck.optimizer) : init_optimizer(s.model.parameters());
  s.progress = ck.progress;
  return s;
}

TrainSummary train(TrainState& state, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                   const Vocabulary& vocab, const TrainConfig& config, const fs::path& run_dir) {
  validate(config);
  check_dimensions(state.model.config, vocab);
  if (val_set.empty()) throw std::invalid_argument("train: validation set is empty");
  fs::create_directories(run_dir);
  const fs::path metrics = run_dir / "metrics.csv";
  prepare_metrics(metrics, state.progress.step);

  const ParameterList params = state.model.parameters();
  const auto started = std::chrono::steady_clock::now();
  auto wall_ms = [&]() -> long long {
    if (!config.log_wall_time) return 0;
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started)
        .count();
  };

  TrainProgress& pr = state.progress;
  Rng dropout_rng(pr.dropout_rng);
  const DropoutSpec train_mode{state.model.config.keep_prob, DropoutMode::train, &dropout_rng};
  std::vector<Batch> batches =
      make_batches(train_set, vocab, config.batch_size, config.max_len, config.padding, config.seed, pr.epoch);
  if (batches.empty()) throw std::invalid_argument("train: no training sample fits max_len");

  TrainSummary summary;
  Tally running;
  while (pr.step < config.steps) {
    if (pr.cursor >= batches.size()) {
      ++pr.epoch;
      pr.cursor = 0;
      batches = make_batches(train_set, vocab, config.batch_size, config.max_len, config.padding, config.seed,
                             pr.epoch);
    }
    const Batch& batch = batches[pr.cursor];

    for (const NamedTensor& p : params) p.tensor.impl()->grad.clear();
    Tape tape;
    std::vector<Tensor> logits;
    double loss_value = 0.0;
    {
      TapeScope scope(tape);
      ForwardResult fr = forward(state.model, batch.inputs, train_mode);
      const Tensor loss = masked_loss(fr.logits, batch.targets, batch.mask);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NonFiniteError("non-finite loss at step " + std::to_string(pr.step + 1) +
                             "; last good checkpoint: " +
                             (summary.last_checkpoint.empty() ? "none" : summary.last_checkpoint.string()));
      }
      tape.backward(loss);
      logits = std::move(fr.logits);
    }
    clip_gradients(params, config.clip_norm);
    rmsprop_step(params, state.optimizer, config.learning_rate, config.momentum, config.decay, config.eps);
    running.add(batch, logits, loss_value);
    ++pr.step;
    ++pr.cursor;

    if (pr.step % config.eval_every == 0 || pr.step == config.steps) {
      const EvalResult val =
          evaluate(state.model, val_set, vocab, config.eval_batch_size, config.max_len, config.padding);
      {
        std::ofstream out(metrics, std::ios::binary | std::ios::app);
        const long long ms = wall_ms();
        out << format_row(pr.step, "train", running.result(), ms) << format_row(pr.step, "val", val, ms);
      }
      running = Tally{};
      pr.dropout_rng = dropout_rng.state();
      Checkpoint ck{state.model, vocab, state.optimizer, pr, to_json(config)};
      summary.last_checkpoint = checkpoint_path(run_dir, pr.step);
      save_checkpoint(summary.last_checkpoint, ck);
      prune_checkpoints(run_dir, config.keep_checkpoints);
      summary.last_eval = val;
      if (config.early_stop_wer && val.wer < *config.early_stop_wer) {
        summary.converged_step = pr.step;
        break;
      }
    }
  }
  pr.dropout_rng = dropout_rng.state();
  summary.steps = pr.step;
  return summary;
}

PretrainResult pretrain_finetune(TrainState& state, const std::vector<Sample>& train_a,
                                 const std::vector<Sample>& val_a, const std::vector<Sample>& train_b,
                                 const std::vector<Sample>& val_b, const Vocabulary& vocab,
                                 const TrainConfig& config_a, const TrainConfig& config_b,
                                 const fs::path& run_dir) {
  for (const auto* corpus : {&train_a, &val_a, &train_b, &val_b}) {
    for (const Sample& s : *corpus) {
      for (const auto* words : {&s.tokens, &s.answers}) {
        for (const std::string& w : *words) {
          if (!vocab.find(w)) throw std::invalid_argument("vocabulary mismatch: corpus token '" + w + "' is unknown");
        }
      }
    }
  }
  PretrainResult out;
  out.pretrain = train(state, train_a, val_a, vocab, config_a, run_dir / "pretrain");
  state.optimizer = init_optimizer(state.model.parameters());
  const std::uint64_t dropout = state.progress.dropout_rng;
  state.progress = TrainProgress{};
  state.progress.dropout_rng = dropout;
  out.finetune = train(state, train_b, val_b, vocab, config_b, run_dir / "finetune");
  return out;
}

}  // namespace memcomputer

namespace memcomputer {

ModelGradCheck model_gradcheck(const ModelConfig& config, std::size_t steps, std::size_t batch,
                               std::uint64_t seed, double h, double floor) {
  if (steps < 1 || batch < 1) throw std::invalid_argument("model_gradcheck: steps and batch must be >= 1");
  Rng rng(Rng::mix(seed, 0));
  const Model model = init_model(config, rng);
  const std::size_t x = config.feed_size(), y = config.output_size;
  std::vector<Tensor> inputs;
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<double> row(batch * x, 0.0);
    for (std::size_t b = 0; b < batch; ++b) row[b * x + rng.below(x)] = 1.0;
    inputs.emplace_back(Shape{batch, x}, std::move(row));
  }
  std::vector<double> targets(batch * steps * y, 0.0), mask(batch * steps, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      targets[(b * steps + t) * y + rng.below(y)] = 1.0;
      mask[b * steps + t] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    mask[b * steps + steps - 1] = 1.0;
  }
  const Tensor target_t({batch, steps, y}, std::move(targets));
  const Tensor mask_t({batch, steps}, std::move(mask));
  const std::uint64_t dropout_seed = Rng::mix(seed, 1);

  auto loss_fn = [&]() {
    Rng dropout_rng(dropout_seed);
    const DropoutSpec spec{config.keep_prob, DropoutMode::train, &dropout_rng};
    return masked_loss(forward(model, inputs, spec).logits, target_t, mask_t);
  };
  const ParameterList params = model.parameters();
  std::vector<Tensor> tensors;
  for (const NamedTensor& p : params) tensors.push_back(p.tensor);
  const GradCheckResult r = finite_diff_check(loss_fn, tensors, h, floor);
  ModelGradCheck out;
  out.max_rel_error = r.max_rel_error;
  for (std::size_t i = 0; i < params.size(); ++i) out.blocks.emplace_back(params[i].name, r.per_param[i]);
  return out;
}

}  // namespace memcomputer

// memcomputer: data generation, training, evaluation, gradient checking and
// introspection for memory-augmented sequence models.
//
// Exit codes: 0 success, 1 usage, 2 runtime error, 3 verification failure.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "memcomputer/checkpoint.hpp"
#include "memcomputer/config.hpp"
#include "memcomputer/introspect.hpp"
#include "memcomputer/tasks.hpp"
#include "memcomputer/training.hpp"

namespace fs = std::filesystem;
using namespace memcomputer;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Entries smaller than this are below what central differences at h = 1e-5
// can resolve for an O(1) loss; see finite_diff_check.
constexpr double kGradcheckFloor = 1e-6;
constexpr double kGradcheckTolerance = 1e-4;

template <class T>
void override_with(T& dst, const std::optional<T>& src) {
  if (src) dst = *src;
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("MEMCOMPUTER_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("MEMCOMPUTER_SEED must be an unsigned integer, got '") + s + "'");
  }
}

// Flags shared by the commands that build a model.
struct ModelFlags {
  std::optional<std::string> arch;
  std::optional<std::size_t> units, locations, width, read_heads;
  std::optional<double> keep_prob;

  void add(CLI::App* app) {
    app->add_option("--arch", arch, "Model variant: dnc, rsdnc, bdnc, brsdnc")
        ->check(CLI::IsMember({"dnc", "rsdnc", "bdnc", "brsdnc"}));
    app->add_option("--units", units, "LSTM units per controller");
    app->add_option("--locations", locations, "Memory locations N");
    app->add_option("--width", width, "Memory word width W");
    app->add_option("--read-heads", read_heads, "Read heads R");
    app->add_option("--keep-prob", keep_prob, "Bypass dropout keep probability");
  }

  void apply(ModelConfig& m) const {
    if (arch) m = apply_preset(m, *arch);
    if (units) m.controller.layers = m.backward_controller.layers = {*units};
    override_with(m.memory.locations, locations);
    override_with(m.memory.width, width);
    override_with(m.memory.read_heads, read_heads);
    override_with(m.keep_prob, keep_prob);
  }
};

struct GeneratorFlags {
  std::optional<std::string> task, mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> min_length, max_length, symbols, context_people;

  void add(CLI::App* app) {
    app->add_option("--task", task, "Generator task: copy, induction16")
        ->check(CLI::IsMember({"copy", "induction", "induction16"}));
    app->add_option("--mode", mode, "Induction mode: original, augmented")
        ->check(CLI::IsMember({"original", "augmented"}));
    app->add_option("--gen-seed", seed, "Generator seed (defaults to --seed)");
    app->add_option("--min-length", min_length, "Shortest copy pattern");
    app->add_option("--max-length", max_length, "Longest copy pattern");
    app->add_option("--symbols", symbols, "Copy alphabet size");
    app->add_option("--context-people", context_people, "People described per induction story");
  }

  void apply(GeneratorConfig& g) const {
    if (task) g.task = parse_task_kind(*task);
    if (mode) g.induction.mode = parse_induction_mode(*mode);
    override_with(g.seed, seed);
    override_with(g.copy.min_length, min_length);
    override_with(g.copy.max_length, max_length);
    override_with(g.copy.symbols, symbols);
    override_with(g.induction.context_people, context_people);
  }
};

RunConfig base_config(const std::optional<std::string>& config_path) {
  RunConfig rc;
  if (config_path) rc = load_run_config(*config_path);
  if (const auto s = env_seed()) rc.train.seed = rc.generator.seed = *s;
  return rc;
}

Vocabulary vocabulary_of(const std::vector<const std::vector<Sample>*>& corpora) {
  Vocabulary v;
  for (const auto* corpus : corpora) {
    for (const Sample& s : *corpus) {
      for (const std::string& t : s.tokens) v.add(t);
      for (const std::string& a : s.answers) v.add(a);
    }
  }
  return v;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string eval_json(const EvalResult& r) {
  return Json{{"loss", r.loss}, {"wer", r.wer}, {"accuracy", r.accuracy}, {"samples", r.samples},
              {"words", r.words}}
      .dump();
}

// ---------------------------------------------------------------------------

struct GenCommand {
  std::optional<std::string> config;
  GeneratorFlags gen;
  std::optional<std::uint64_t> seed;
  std::size_t count = 1000;
  std::string out = "data";
  std::optional<std::string> babi_file;
  int babi_task = 0;

  void add(CLI::App* app) {
    app->add_option("--config", config, "Run configuration JSON")->check(CLI::ExistingFile);
    gen.add(app);
    app->add_option("--seed", seed, "Generator seed");
    app->add_option("--n", count, "Number of samples")->capture_default_str();
    app->add_option("--out", out, "Output directory for samples.jsonl and vocab.json")->capture_default_str();
    app->add_option("--from-babi", babi_file, "Convert a bAbI text file instead of generating")
        ->check(CLI::ExistingFile);
    app->add_option("--babi-task", babi_task, "Task id recorded for --from-babi samples");
  }

  int run() const {
    RunConfig rc = base_config(config);
    override_with(rc.generator.seed, seed);
    gen.apply(rc.generator);
    std::vector<Sample> samples;
    Vocabulary vocab;
    if (babi_file) {
      Preprocessed p = preprocess(parse_babi_file(*babi_file, babi_task));
      samples = std::move(p.samples);
      vocab = std::move(p.vocabulary);
    } else {
      samples = generate_corpus(rc.generator, count);
      vocab = generator_vocabulary(rc.generator);
    }
    fs::create_directories(out);
    write_jsonl(fs::path(out) / "samples.jsonl", samples);
    write_vocabulary(fs::path(out) / "vocab.json", vocab);
    std::cout << "wrote " << samples.size() << " samples and " << vocab.size() << " vocabulary entries to "
              << out << "\n";
    return 0;
  }
};

struct TrainCommand {
  std::optional<std::string> config, data, val, vocab, run_dir, resume, padding;
  ModelFlags model;
  GeneratorFlags gen;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, batch_size, eval_every, max_len, keep_checkpoints;
  std::optional<double> lr, clip_norm, early_stop_wer;
  std::size_t count = 10000;
  bool log_wall_time = false;

  void add(CLI::App* app) {
    app->add_option("--config", config, "Run configuration JSON")->check(CLI::ExistingFile);
    app->add_option("--data", data, "Training corpus (JSONL); generated when absent")->check(CLI::ExistingFile);
    app->add_option("--val", val, "Validation corpus; 10% of --data per task when absent")
        ->check(CLI::ExistingFile);
    app->add_option("--vocab", vocab, "Vocabulary file")->check(CLI::ExistingFile);
    app->add_option("--run-dir", run_dir, "Output directory");
    app->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
    model.add(app);
    gen.add(app);
    app->add_option("--seed", seed, "Run seed (initialisation, shuffling, dropout)");
    app->add_option("--n", count, "Generated corpus size when --data is absent")->capture_default_str();
    app->add_option("--steps", steps, "Total optimizer steps");
    app->add_option("--batch-size", batch_size, "Mini-batch size");
    app->add_option("--lr", lr, "RMSprop learning rate");
    app->add_option("--clip-norm", clip_norm, "Global gradient-norm clip (<= 0 disables)");
    app->add_option("--eval-every", eval_every, "Steps between evaluations and checkpoints");
    app->add_option("--max-len", max_len, "Drop samples longer than this");
    app->add_option("--padding", padding, "Padding side: end, front")->check(CLI::IsMember({"end", "front"}));
    app->add_option("--early-stop-wer", early_stop_wer, "Stop once validation WER falls below this");
    app->add_option("--keep-checkpoints", keep_checkpoints, "Most recent checkpoints to keep (0 = all)");
    app->add_flag("--log-wall-time", log_wall_time, "Record elapsed time in metrics.csv");
  }

  int run() const {
    RunConfig rc = base_config(config);
    if (seed) rc.train.seed = rc.generator.seed = *seed;
    model.apply(rc.model);
    gen.apply(rc.generator);
    override_with(rc.paths.train, data);
    override_with(rc.paths.val, val);
    override_with(rc.paths.vocab, vocab);
    override_with(rc.paths.run_dir, run_dir);
    override_with(rc.paths.checkpoint, resume);
    override_with(rc.train.steps, steps);
    override_with(rc.train.batch_size, batch_size);
    override_with(rc.train.learning_rate, lr);
    override_with(rc.train.clip_norm, clip_norm);
    override_with(rc.train.eval_every, eval_every);
    override_with(rc.train.max_len, max_len);
    override_with(rc.train.keep_checkpoints, keep_checkpoints);
    if (padding) rc.train.padding = parse_padding(*padding);
    if (early_stop_wer) rc.train.early_stop_wer = *early_stop_wer;
    if (log_wall_time) rc.train.log_wall_time = true;

    std::vector<Sample> train_set, val_set;
    Vocabulary vocabulary;
    if (rc.paths.train.empty()) {
      auto all = generate_corpus(rc.generator, count);
      std::tie(train_set, val_set) = split_validation(all, 0.1, rc.train.seed);
      vocabulary = generator_vocabulary(rc.generator);
    } else {
      train_set = read_jsonl(rc.paths.train);
      if (rc.paths.val.empty()) {
        std::tie(train_set, val_set) = split_validation(train_set, 0.1, rc.train.seed);
      } else {
        val_set = read_jsonl(rc.paths.val);
      }
      vocabulary = rc.paths.vocab.empty() ? vocabulary_of({&train_set, &val_set}) : read_vocabulary(rc.paths.vocab);
    }
    rc.model.input_size = rc.model.output_size = vocabulary.size();
    rc.model.embedding_vocab = 0;

    TrainState state;
    if (rc.paths.checkpoint.empty()) {
      state = initial_train_state(rc.model, rc.train);
    } else {
      const Checkpoint ck = load_checkpoint(rc.paths.checkpoint);
      if (!(ck.vocabulary == vocabulary)) throw std::runtime_error("checkpoint vocabulary differs from the corpus vocabulary");
      state = resume_train_state(rc.paths.checkpoint);
      rc.model = state.model.config;
    }
    const fs::path dir = rc.paths.run_dir;
    write_text(dir / "config.json", to_json(rc).dump(2) + "\n");
    const TrainSummary s = train(state, train_set, val_set, vocabulary, rc.train, dir);
    std::cout << "steps " << s.steps << "\nval " << eval_json(s.last_eval) << "\n";
    if (s.converged_step) std::cout << "converged at step " << *s.converged_step << "\n";
    std::cout << "checkpoint " << s.last_checkpoint.string() << "\n";
    return 0;
  }
};

struct EvalCommand {
  std::string checkpoint, data;
  std::size_t batch_size = 64, max_len = 800;

  void add(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    app->add_option("--data", data, "Corpus (JSONL)")->required()->check(CLI::ExistingFile);
    app->add_option("--batch-size", batch_size, "Evaluation batch size")->capture_default_str();
    app->add_option("--max-len", max_len, "Skip samples longer than this")->capture_default_str();
  }

  int run() const {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const auto corpus = read_jsonl(data);
    std::cout << eval_json(evaluate(ck.model, corpus, ck.vocabulary, batch_size, max_len, Padding::end)) << "\n";
    return 0;
  }
};

struct GradcheckCommand {
  std::string arch = "rsdnc";
  std::size_t units = 8, locations = 4, width = 4, read_heads = 2, steps = 5, batch = 2, symbols = 5;
  std::uint64_t seed = 1;

  void add(CLI::App* app) {
    app->add_option("--arch", arch, "Model variant")
        ->check(CLI::IsMember({"dnc", "rsdnc", "bdnc", "brsdnc"}))
        ->capture_default_str();
    app->add_option("--units", units, "Controller units (<= 16)")->capture_default_str();
    app->add_option("--locations", locations, "Memory locations (<= 8)")->capture_default_str();
    app->add_option("--width", width, "Memory width (<= 8)")->capture_default_str();
    app->add_option("--read-heads", read_heads, "Read heads (<= 2)")->capture_default_str();
    app->add_option("--steps", steps, "Sequence length (<= 6)")->capture_default_str();
    app->add_option("--batch", batch, "Batch lanes")->capture_default_str();
    app->add_option("--symbols", symbols, "Input and output width")->capture_default_str();
    app->add_option("--seed", seed, "Initialisation and data seed")->capture_default_str();
  }

  int run() const {
    if (locations > 8 || width > 8 || units > 16 || steps > 6 || read_heads > 2) {
      throw UsageError("gradcheck needs a tiny configuration: N <= 8, W <= 8, R <= 2, C <= 16, T <= 6");
    }
    const std::uint64_t s = env_seed().value_or(seed);
    ModelConfig c;
    c.input_size = c.output_size = symbols;
    c.controller.layers = c.backward_controller.layers = {units};
    c.memory.locations = locations;
    c.memory.width = width;
    c.memory.read_heads = read_heads;
    c = apply_preset(c, arch);
    const ModelGradCheck r = model_gradcheck(c, steps, batch, s, 1e-5, kGradcheckFloor);
    for (const auto& [name, err] : r.blocks) std::printf("%-28s %.3e\n", name.c_str(), err);
    std::printf("max relative error %.3e (tolerance %.0e)\n", r.max_rel_error, kGradcheckTolerance);
    if (!(r.max_rel_error < kGradcheckTolerance)) throw VerificationFailure("gradient check failed");
    return 0;
  }
};

struct InspectCommand {
  std::optional<std::string> checkpoint, data;
  std::string arch = "rsdnc", out = "traces", format = "csv";
  std::vector<std::string> reports;
  bool trace = false;
  std::size_t sample = 0, seq_len = 1, batch = 1;

  void add(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "Checkpoint to analyse")->check(CLI::ExistingFile);
    app->add_option("--data", data, "Corpus (JSONL) for traces and influence")->check(CLI::ExistingFile);
    app->add_option("--arch", arch, "Reference bAbI configuration when no checkpoint is given")
        ->check(CLI::IsMember({"dnc", "rsdnc", "bdnc", "brsdnc"}))
        ->capture_default_str();
    app->add_option("--report", reports, "Reports: params, statesize, influence")
        ->check(CLI::IsMember({"params", "statesize", "influence"}));
    app->add_flag("--trace", trace, "Export per-step gate traces for one sample");
    app->add_option("--sample", sample, "Corpus index traced by --trace")->capture_default_str();
    app->add_option("--out", out, "Directory for trace files")->capture_default_str();
    app->add_option("--format", format, "Trace format: csv, json")
        ->check(CLI::IsMember({"csv", "json"}))
        ->capture_default_str();
    app->add_option("--seq-len", seq_len, "Sequence length for the state-size report")->capture_default_str();
    app->add_option("--batch", batch, "Batch size for the state-size report")->capture_default_str();
  }

  int run() const {
    if (reports.empty() && !trace) throw UsageError("inspect needs --report and/or --trace");
    std::optional<Checkpoint> ck;
    if (checkpoint) ck = load_checkpoint(*checkpoint);
    const ModelConfig cfg = ck ? ck->model.config : babi_config(arch);
    std::vector<Sample> corpus;
    auto need_corpus = [&](const char* what) {
      if (!ck || !data) throw UsageError(std::string(what) + " needs --checkpoint and --data");
      if (corpus.empty()) corpus = read_jsonl(*data);
    };
    for (const std::string& r : reports) {
      if (r == "params") {
        std::cout << format_parameter_report(cfg);
      } else if (r == "statesize") {
        const StateSizeReport s = state_size_report(cfg, seq_len, batch);
        std::cout << format_state_size_report(s);
        const std::size_t n = cfg.memory.locations, heads = cfg.memory.read_heads;
        if (s.total_dnc - s.total_cbmu != n * n + n + 3 * heads) {
          throw VerificationFailure("state-size identity DNC - CBMU = N^2 + N + 3R does not hold");
        }
      } else {
        need_corpus("the influence report");
        const InfluenceReport inf = memory_influence(ck->model, corpus, ck->vocabulary);
        std::printf("memory influence: mean %.2f%%, answer steps %.2f%%, argmax agreement %.4f over %zu answers\n",
                    inf.mean_pct, inf.answer_mean_pct, inf.agreement, inf.answer_steps);
      }
    }
    if (trace) {
      need_corpus("--trace");
      if (sample >= corpus.size()) throw UsageError("--sample is beyond the corpus");
      const auto traces = record_traces(ck->model, corpus[sample], ck->vocabulary);
      const bool json = format == "json";
      const fs::path path = fs::path(out) / ("trace-" + std::to_string(sample) + (json ? ".json" : ".csv"));
      export_traces(traces, path, json ? TraceFormat::json : TraceFormat::csv);
      std::cout << "wrote " << traces.size() << " steps to " << path.string() << "\n";
    }
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memory-augmented sequence models: generate data, train, evaluate, verify and inspect."};
  app.require_subcommand(1, 1);
  GenCommand gen;
  TrainCommand train_cmd;
  EvalCommand eval_cmd;
  GradcheckCommand gradcheck;
  InspectCommand inspect;
  auto* gen_app = app.add_subcommand("gen", "Generate or convert a corpus");
  auto* train_app = app.add_subcommand("train", "Train a model");
  auto* eval_app = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
  auto* grad_app = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  auto* inspect_app = app.add_subcommand("inspect", "Parameter, state-size, influence and trace reports");
  gen.add(gen_app);
  train_cmd.add(train_app);
  eval_cmd.add(eval_app);
  gradcheck.add(grad_app);
  inspect.add(inspect_app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    if (*gen_app) return gen.run();
    if (*train_app) return train_cmd.run();
    if (*eval_app) return eval_cmd.run();
    if (*grad_app) return gradcheck.run();
    if (*inspect_app) return inspect.run();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const VerificationFailure& e) {
    std::cerr << "verification failed: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

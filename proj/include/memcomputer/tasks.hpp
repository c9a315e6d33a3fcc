#pragma once

// Question-answering data: bAbI-format ingestion, one-hot encoding, the copy
// and colour-induction generators, metrics, and the colour-counting baseline.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "memcomputer/rng.hpp"
#include "memcomputer/tensor.hpp"

namespace memcomputer {

inline constexpr const char* kQueryToken = "?";
inline constexpr const char* kExclaimToken = "!";
inline constexpr const char* kAnswerToken = "-";  // requests an answer word

class Vocabulary {
 public:
  // Starts with the reserved symbols '?', '!', '-'.
  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens);

  std::size_t add(const std::string& token);
  std::optional<std::size_t> find(const std::string& token) const;
  // Throws std::out_of_range for unknown tokens.
  std::size_t index(const std::string& token) const;
  const std::string& token(std::size_t index) const { return tokens_.at(index); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Mask and targets are implied: a step is answer-requested exactly when its
// token is '-', and answers[k] is the target of the k-th such step.
struct Sample {
  std::vector<std::string> tokens;
  std::vector<std::string> answers;
  std::vector<std::string> candidates;
  int task = 0;

  std::vector<double> mask() const;
  std::size_t answer_count() const;
  bool operator==(const Sample&) const = default;
};

void check_sample(const Sample& sample);

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct RawBabiSample {
  std::vector<std::string> context;  // statement lines prior to the question
  std::string question;
  std::vector<std::string> answers;
  int task = 0;
};

// Official bAbI text format. Supporting-fact ids are discarded.
std::vector<RawBabiSample> parse_babi(std::istream& in, const std::string& source = "<stream>", int task = 0);
std::vector<RawBabiSample> parse_babi_file(const std::filesystem::path& path, int task = 0);

// Lowercases, splits into word tokens, drops '.', ',' and digit tokens.
std::vector<std::string> tokenize(const std::string& text);

struct Preprocessed {
  std::vector<Sample> samples;
  Vocabulary vocabulary;
};

// Tokenizes, drops exact (context, question) duplicates and appends one '-'
// per answer word. The vocabulary is built in first-occurrence order.
Preprocessed preprocess(const std::vector<RawBabiSample>& raw);

struct EncodedSample {
  Tensor inputs;                  // [T, |V|] one-hot rows
  std::vector<std::size_t> ids;   // token index per step
  std::vector<long> targets;      // answer index per step, -1 where unmasked
  std::vector<double> mask;
};

EncodedSample encode(const Sample& sample, const Vocabulary& vocab);
Sample decode(const EncodedSample& encoded, const Vocabulary& vocab, int task = 0);

// ---------------------------------------------------------------------------
// Generators.

struct CopyConfig {
  std::size_t min_length = 1;
  std::size_t max_length = 8;
  std::size_t symbols = 2;
};

enum class InductionMode { original, augmented };

struct InductionConfig {
  InductionMode mode = InductionMode::original;
  // Named people that carry an animal and a colour statement; one further
  // name is queried.
  std::size_t context_people = 4;
  // Answer-colour scenario rates for the original mode: the answer colour is
  // unique among all-distinct colours, strictly most frequent, or tied with
  // exactly one other colour.
  double p_unique = 4181.0 / 9000.0;
  double p_dominant = 3449.0 / 9000.0;
  double p_tie = 1370.0 / 9000.0;
};

enum class TaskKind { copy, induction };

struct GeneratorConfig {
  std::uint64_t seed = 1;
  TaskKind task = TaskKind::copy;
  CopyConfig copy;
  InductionConfig induction;
};

const std::vector<std::string>& induction_names();
const std::vector<std::string>& induction_animals();
const std::vector<std::string>& induction_colours();

Vocabulary copy_vocabulary(const CopyConfig& config);
Vocabulary induction_vocabulary();
Vocabulary generator_vocabulary(const GeneratorConfig& config);

Sample gen_copy(const CopyConfig& config, Rng& rng);
// Throws std::invalid_argument for an infeasible augmented configuration.
Sample gen_induction(const InductionConfig& config, Rng& rng);
std::vector<Sample> generate_corpus(const GeneratorConfig& config, std::size_t count);

// Answers the most frequent colour word of the context, ties uniform.
std::string counting_heuristic(const Sample& sample, Rng& rng);

// Resolves "what colour is X" through the animal chain. Returns nullopt when
// the story does not determine an answer.
std::optional<std::string> solve_induction(const Sample& sample);

// ---------------------------------------------------------------------------
// Metrics.

// Fraction of masked steps whose predicted index differs from the target.
double word_error_rate(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& targets,
                       const std::vector<double>& mask);
// Fraction of samples answered correctly.
double accuracy(const std::vector<bool>& sample_correct);

// Deterministic 10% validation split per task.
std::pair<std::vector<Sample>, std::vector<Sample>> split_validation(const std::vector<Sample>& samples,
                                                                     double fraction, std::uint64_t seed);

// Line-delimited JSON: {"tokens", "targets", "mask", "candidates", "task"}.
void write_jsonl(const std::filesystem::path& path, const std::vector<Sample>& samples);
std::vector<Sample> read_jsonl(const std::filesystem::path& path);
void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab);
Vocabulary read_vocabulary(const std::filesystem::path& path);

}  // namespace memcomputer

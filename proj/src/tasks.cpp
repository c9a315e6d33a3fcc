#include "memcomputer/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace memcomputer {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary and Sample

Vocabulary::Vocabulary() {
  add(kQueryToken);
  add(kExclaimToken);
  add(kAnswerToken);
}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) {
  for (const std::string& t : tokens) {
    if (find(t)) throw std::invalid_argument("duplicate vocabulary token '" + t + "'");
    add(t);
  }
  if (!find(kAnswerToken)) throw std::invalid_argument("vocabulary lacks the '-' answer marker");
}

std::size_t Vocabulary::add(const std::string& token) {
  if (auto i = find(token)) return *i;
  index_.emplace(token, tokens_.size());
  tokens_.push_back(token);
  return tokens_.size() - 1;
}

std::optional<std::size_t> Vocabulary::find(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Vocabulary::index(const std::string& token) const {
  auto i = find(token);
  if (!i) throw std::out_of_range("out-of-vocabulary token '" + token + "'");
  return *i;
}

std::vector<double> Sample::mask() const {
  std::vector<double> m(tokens.size(), 0.0);
  for (std::size_t t = 0; t < tokens.size(); ++t) m[t] = tokens[t] == kAnswerToken ? 1.0 : 0.0;
  return m;
}

std::size_t Sample::answer_count() const {
  return static_cast<std::size_t>(std::count(tokens.begin(), tokens.end(), kAnswerToken));
}

void check_sample(const Sample& s) {
  if (s.answer_count() != s.answers.size()) {
    throw std::invalid_argument("sample has " + std::to_string(s.answer_count()) + " '-' steps but " +
                                std::to_string(s.answers.size()) + " answers");
  }
}

// ---------------------------------------------------------------------------
// bAbI parsing

ParseError::ParseError(const std::string& source, std::size_t line, const std::string& what)
    : std::runtime_error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

namespace {

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool all_digits(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

}  // namespace

std::vector<RawBabiSample> parse_babi(std::istream& in, const std::string& source, int task) {
  std::vector<RawBabiSample> out;
  std::vector<std::string> story;
  std::size_t prev_id = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto space = line.find(' ');
    const std::string id_str = line.substr(0, space);
    if (space == std::string::npos || !all_digits(id_str)) {
      throw ParseError(source, line_no, "expected '<line id> <text>'");
    }
    const std::size_t id = std::stoul(id_str);
    if (id == 1) {
      story.clear();
    } else if (id != prev_id + 1) {
      throw ParseError(source, line_no,
                       "line id " + std::to_string(id) + " does not follow " + std::to_string(prev_id));
    }
    prev_id = id;
    const std::string body = line.substr(space + 1);
    if (body.find('\t') == std::string::npos) {
      story.push_back(trim(body));
      continue;
    }
    const auto fields = split_on(body, '\t');
    if (fields.size() < 2 || trim(fields[1]).empty()) {
      throw ParseError(source, line_no, "question line needs '<question>\\t<answer>[\\t<support>]'");
    }
    RawBabiSample s;
    s.context = story;
    s.question = trim(fields[0]);
    for (const std::string& a : split_on(trim(fields[1]), ',')) s.answers.push_back(trim(a));
    s.task = task;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<RawBabiSample> parse_babi_file(const std::filesystem::path& path, int task) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_babi(in, path.string(), task);
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty() && !all_digits(cur)) out.push_back(cur);
    cur.clear();
  };
  for (char raw : text) {
    const auto ch = static_cast<unsigned char>(raw);
    if (std::isspace(ch) || ch == '.' || ch == ',' || ch == ';' || ch == ':') {
      flush();
    } else if (ch == '?' || ch == '!') {
      flush();
      out.emplace_back(1, static_cast<char>(ch));
    } else {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  flush();
  return out;
}

Preprocessed preprocess(const std::vector<RawBabiSample>& raw) {
  Preprocessed out;
  std::set<std::pair<std::vector<std::string>, std::string>> seen;
  for (const RawBabiSample& r : raw) {
    if (!seen.insert({r.context, r.question}).second) continue;
    Sample s;
    s.task = r.task;
    for (const std::string& line : r.context) {
      for (std::string& t : tokenize(line)) s.tokens.push_back(std::move(t));
    }
    for (std::string& t : tokenize(r.question)) s.tokens.push_back(std::move(t));
    for (const std::string& a : r.answers) {
      for (std::string& t : tokenize(a)) {
        s.tokens.push_back(kAnswerToken);
        s.answers.push_back(std::move(t));
      }
    }
    for (const std::string& t : s.tokens) out.vocabulary.add(t);
    for (const std::string& a : s.answers) out.vocabulary.add(a);
    out.samples.push_back(std::move(s));
  }
  return out;
}

EncodedSample encode(const Sample& sample, const Vocabulary& vocab) {
  check_sample(sample);
  const std::size_t steps = sample.tokens.size(), v = vocab.size();
  EncodedSample e;
  std::vector<double> rows(steps * v, 0.0);
  e.targets.assign(steps, -1);
  e.mask = sample.mask();
  std::size_t k = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t id = vocab.index(sample.tokens[t]);
    e.ids.push_back(id);
    rows[t * v + id] = 1.0;
    if (e.mask[t] != 0.0) e.targets[t] = static_cast<long>(vocab.index(sample.answers[k++]));
  }
  e.inputs = Tensor({steps, v}, std::move(rows));
  return e;
}

Sample decode(const EncodedSample& e, const Vocabulary& vocab, int task) {
  Sample s;
  s.task = task;
  const std::size_t v = vocab.size();
  for (std::size_t t = 0; t < e.mask.size(); ++t) {
    const auto row = e.inputs.data().subspan(t * v, v);
    const auto hot = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    s.tokens.push_back(vocab.token(hot));
    if (e.mask[t] != 0.0) s.answers.push_back(vocab.token(static_cast<std::size_t>(e.targets[t])));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Generators

namespace {

std::vector<std::string> copy_symbols(const CopyConfig& c) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < c.symbols; ++i) {
    out.push_back(i < 26 ? std::string(1, static_cast<char>('a' + i)) : "s" + std::to_string(i));
  }
  return out;
}

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[static_cast<std::size_t>(rng.below(v.size()))];
}

std::map<std::string, std::size_t> colour_counts(const std::vector<std::string>& colours) {
  std::map<std::string, std::size_t> counts;
  for (const std::string& c : colours) ++counts[c];
  return counts;
}

enum class Scenario { unique, dominant, tie };

bool matches(Scenario sc, const std::vector<std::string>& colours, const std::string& answer) {
  const auto counts = colour_counts(colours);
  std::size_t top = 0, at_top = 0;
  for (const auto& [c, n] : counts) top = std::max(top, n);
  for (const auto& [c, n] : counts) at_top += n == top ? 1 : 0;
  const std::size_t mine = counts.at(answer);
  switch (sc) {
    case Scenario::unique:
      return top == 1;
    case Scenario::dominant:
      return mine == top && at_top == 1 && top >= 2;
    case Scenario::tie:
      return mine == top && at_top == 2 && top >= 2;
  }
  return false;
}

}  // namespace

const std::vector<std::string>& induction_names() {
  static const std::vector<std::string> v{"lily", "bernhard", "greg", "julius", "brian"};
  return v;
}
const std::vector<std::string>& induction_animals() {
  static const std::vector<std::string> v{"frog", "lion", "swan", "rhino"};
  return v;
}
const std::vector<std::string>& induction_colours() {
  static const std::vector<std::string> v{"white", "yellow", "green", "gray"};
  return v;
}

Vocabulary copy_vocabulary(const CopyConfig& c) {
  Vocabulary v;
  for (const std::string& s : copy_symbols(c)) v.add(s);
  return v;
}

Vocabulary induction_vocabulary() {
  Vocabulary v;
  for (const char* w : {"is", "a", "what", "colour"}) v.add(w);
  for (const auto* list : {&induction_names(), &induction_animals(), &induction_colours()}) {
    for (const std::string& w : *list) v.add(w);
  }
  return v;
}

Vocabulary generator_vocabulary(const GeneratorConfig& c) {
  return c.task == TaskKind::copy ? copy_vocabulary(c.copy) : induction_vocabulary();
}

Sample gen_copy(const CopyConfig& c, Rng& rng) {
  if (c.min_length < 1 || c.min_length > c.max_length || c.symbols < 1) {
    throw std::invalid_argument("copy task needs 1 <= min_length <= max_length and >= 1 symbol");
  }
  const auto symbols = copy_symbols(c);
  const std::size_t len = c.min_length + static_cast<std::size_t>(rng.below(c.max_length - c.min_length + 1));
  Sample s;
  for (std::size_t i = 0; i < len; ++i) s.answers.push_back(pick(symbols, rng));
  s.tokens = s.answers;
  s.tokens.push_back(kExclaimToken);
  s.tokens.insert(s.tokens.end(), len, kAnswerToken);
  s.candidates = symbols;
  return s;
}

Sample gen_induction(const InductionConfig& c, Rng& rng) {
  const auto& names = induction_names();
  const auto& animals = induction_animals();
  const auto& colours = induction_colours();
  const std::size_t k = c.context_people;
  if (k < 1 || k + 1 > names.size()) {
    throw std::invalid_argument("induction task needs 1 <= context_people <= " +
                                std::to_string(names.size() - 1));
  }
  if (c.mode == InductionMode::augmented && k > std::min(animals.size(), colours.size())) {
    throw std::invalid_argument("augmented induction needs context_people <= min(#colours, #animals)");
  }
  std::vector<std::string> people = names;
  shuffle(people, rng);
  const std::string query = people[k];
  people.resize(k);
  const std::size_t support = static_cast<std::size_t>(rng.below(k));

  std::vector<std::string> animal(k), colour(k);
  if (c.mode == InductionMode::augmented) {
    std::vector<std::string> a = animals, col = colours;
    shuffle(a, rng);
    shuffle(col, rng);
    std::copy_n(a.begin(), k, animal.begin());
    std::copy_n(col.begin(), k, colour.begin());
  } else {
    const std::string support_animal = pick(animals, rng);
    std::vector<std::string> others;
    for (const std::string& a : animals) {
      if (a != support_animal) others.push_back(a);
    }
    for (std::size_t i = 0; i < k; ++i) animal[i] = i == support ? support_animal : pick(others, rng);

    const double total = c.p_unique + c.p_dominant + c.p_tie;
    const double u = rng.uniform() * total;
    Scenario sc = u < c.p_unique ? Scenario::unique
                                 : (u < c.p_unique + c.p_dominant ? Scenario::dominant : Scenario::tie);
    if (k == 1) sc = Scenario::unique;
    if (sc == Scenario::unique && k > colours.size()) sc = Scenario::dominant;
    if (sc == Scenario::tie && k < 4) sc = Scenario::dominant;
    const std::string answer = pick(colours, rng);
    // Rejection sampling over colour assignments with replacement.
    do {
      for (std::size_t i = 0; i < k; ++i) colour[i] = i == support ? answer : pick(colours, rng);
    } while (!matches(sc, colour, answer));
  }

  // Each person's animal statement precedes their colour statement.
  struct Statement {
    std::size_t person;  // k denotes the queried person
    bool is_colour;
  };
  std::vector<Statement> order;
  for (std::size_t i = 0; i < k; ++i) {
    order.push_back({i, false});
    order.push_back({i, true});
  }
  order.push_back({k, false});
  shuffle(order, rng);
  for (std::size_t i = 0; i <= k; ++i) {
    std::size_t pos_animal = 0, pos_colour = order.size();
    for (std::size_t j = 0; j < order.size(); ++j) {
      if (order[j].person != i) continue;
      (order[j].is_colour ? pos_colour : pos_animal) = j;
    }
    if (pos_colour < pos_animal) std::swap(order[pos_colour], order[pos_animal]);
  }

  Sample s;
  s.task = 16;
  const std::string query_animal = animal[support];
  for (const Statement& st : order) {
    const std::string& who = st.person == k ? query : people[st.person];
    if (st.is_colour) {
      s.tokens.insert(s.tokens.end(), {who, "is", colour[st.person]});
    } else {
      s.tokens.insert(s.tokens.end(), {who, "is", "a", st.person == k ? query_animal : animal[st.person]});
    }
  }
  s.tokens.insert(s.tokens.end(), {"what", "colour", "is", query, kQueryToken, kAnswerToken});
  s.answers = {colour[support]};
  s.candidates = colours;
  return s;
}

std::vector<Sample> generate_corpus(const GeneratorConfig& c, std::size_t count) {
  Rng rng(c.seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(c.task == TaskKind::copy ? gen_copy(c.copy, rng) : gen_induction(c.induction, rng));
  }
  return out;
}

namespace {

// Context tokens precede the "what colour is X ?" question.
std::size_t question_start(const Sample& s) {
  for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) {
    if (s.tokens[t] == "what" && s.tokens[t + 1] == "colour") return t;
  }
  return s.tokens.size();
}

}  // namespace

std::string counting_heuristic(const Sample& s, Rng& rng) {
  const auto& palette = induction_colours();
  std::map<std::string, std::size_t> counts;
  const std::size_t end = question_start(s);
  for (std::size_t t = 0; t < end; ++t) {
    if (std::find(palette.begin(), palette.end(), s.tokens[t]) != palette.end()) ++counts[s.tokens[t]];
  }
  if (counts.empty()) return pick(palette, rng);
  std::size_t top = 0;
  for (const auto& [c, n] : counts) top = std::max(top, n);
  std::vector<std::string> best;
  for (const std::string& c : palette) {
    auto it = counts.find(c);
    if (it != counts.end() && it->second == top) best.push_back(c);
  }
  return pick(best, rng);
}

std::optional<std::string> solve_induction(const Sample& s) {
  const std::size_t q = question_start(s);
  if (q + 3 >= s.tokens.size()) return std::nullopt;
  const std::string& query = s.tokens[q + 3];
  std::map<std::string, std::string> animal_of, colour_of;
  for (std::size_t t = 0; t + 2 < q;) {
    if (s.tokens[t + 1] == "is" && s.tokens[t + 2] == "a" && t + 3 < q) {
      animal_of[s.tokens[t]] = s.tokens[t + 3];
      t += 4;
    } else if (s.tokens[t + 1] == "is") {
      colour_of[s.tokens[t]] = s.tokens[t + 2];
      t += 3;
    } else {
      return std::nullopt;
    }
  }
  auto qa = animal_of.find(query);
  if (qa == animal_of.end()) return std::nullopt;
  std::optional<std::string> answer;
  for (const auto& [who, a] : animal_of) {
    if (who == query || a != qa->second) continue;
    auto c = colour_of.find(who);
    if (c == colour_of.end()) continue;
    if (answer && *answer != c->second) return std::nullopt;
    answer = c->second;
  }
  return answer;
}

// ---------------------------------------------------------------------------
// Metrics and corpora

double word_error_rate(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& targets,
                       const std::vector<double>& mask) {
  if (predicted.size() != targets.size() || predicted.size() != mask.size()) {
    throw std::invalid_argument("word_error_rate: misaligned inputs");
  }
  double wrong = 0.0, asked = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0.0) continue;
    asked += 1.0;
    wrong += predicted[i] != targets[i] ? 1.0 : 0.0;
  }
  if (asked == 0.0) throw std::invalid_argument("word_error_rate: no answer was requested");
  return wrong / asked;
}

double accuracy(const std::vector<bool>& sample_correct) {
  if (sample_correct.empty()) throw std::invalid_argument("accuracy: no samples");
  const auto n = std::count(sample_correct.begin(), sample_correct.end(), true);
  return static_cast<double>(n) / static_cast<double>(sample_correct.size());
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_validation(const std::vector<Sample>& samples,
                                                                     double fraction, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < samples.size(); ++i) by_task[samples[i].task].push_back(i);
  std::vector<bool> is_val(samples.size(), false);
  for (auto& [task, idx] : by_task) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(task) + 0x5eed));
    shuffle(idx, rng);
    const auto n_val = static_cast<std::size_t>(fraction * static_cast<double>(idx.size()) + 0.5);
    for (std::size_t j = 0; j < n_val && j < idx.size(); ++j) is_val[idx[j]] = true;
  }
  std::pair<std::vector<Sample>, std::vector<Sample>> out;
  for (std::size_t i = 0; i < samples.size(); ++i) (is_val[i] ? out.second : out.first).push_back(samples[i]);
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const Sample& s : samples) {
    std::vector<int> mask;
    for (double m : s.mask()) mask.push_back(m != 0.0 ? 1 : 0);
    json j = {{"tokens", s.tokens}, {"targets", s.answers}, {"mask", mask}, {"candidates", s.candidates},
              {"task", s.task}};
    out << j.dump() << '\n';
  }
}

std::vector<Sample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Sample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      Sample s;
      s.tokens = j.at("tokens").get<std::vector<std::string>>();
      s.answers = j.at("targets").get<std::vector<std::string>>();
      if (j.contains("candidates")) s.candidates = j.at("candidates").get<std::vector<std::string>>();
      if (j.contains("task")) s.task = j.at("task").get<int>();
      if (j.contains("mask")) {
        const auto mask = j.at("mask").get<std::vector<int>>();
        const auto expected = s.mask();
        if (mask.size() != expected.size()) throw std::invalid_argument("mask length differs from tokens");
        for (std::size_t t = 0; t < mask.size(); ++t) {
          if ((mask[t] != 0) != (expected[t] != 0.0)) throw std::invalid_argument("mask disagrees with '-' steps");
        }
      }
      check_sample(s);
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
  }
  return out;
}

void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << json(vocab.tokens()).dump() << '\n';
}

Vocabulary read_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Vocabulary(json::parse(in).get<std::vector<std::string>>());
}

}  // namespace memcomputer

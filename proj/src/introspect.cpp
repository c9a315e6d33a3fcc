#include "memcomputer/introspect.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "memcomputer/training.hpp"

namespace memcomputer {

double influence_percent(std::span<const double> memory_term, std::span<const double> bypass_term) {
  double m = 0.0, b = 0.0;
  for (double v : memory_term) m += std::abs(v);
  for (double v : bypass_term) b += std::abs(v);
  return 100.0 * m / (m + b + 1e-12);
}

namespace {

ForwardResult observed_run(const Model& model, const Sample& sample, const Vocabulary& vocab) {
  const Batch batch = make_batch({sample}, {0}, vocab, Padding::end);
  NoGradScope no_grad;
  const DropoutSpec eval_mode{model.config.keep_prob, DropoutMode::eval, nullptr};
  return forward(model, batch.inputs, eval_mode, ForwardOptions{true});
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::vector<StepTrace> record_traces(const Model& model, const Sample& sample, const Vocabulary& vocab) {
  const ForwardResult fr = observed_run(model, sample, vocab);
  const std::size_t r = model.config.memory.read_heads;
  std::vector<StepTrace> out;
  for (std::size_t t = 0; t < fr.observations.size(); ++t) {
    const StepObservation& o = fr.observations[t];
    StepTrace s;
    s.t = t + 1;
    s.token = sample.tokens[t];
    s.free_gates.assign(o.signals.free_gates.data().begin(), o.signals.free_gates.data().end());
    s.allocation_gate = o.signals.allocation_gate[0];
    s.write_gate = o.signals.write_gate[0];
    if (o.signals.read_modes.defined()) {
      for (std::size_t i = 0; i < r; ++i) {
        const auto m = o.signals.read_modes.data().subspan(3 * i, 3);
        s.read_modes.push_back({m[0], m[1], m[2]});
      }
    }
    for (double w : o.write_weighting.data()) s.write_entropy -= w > 0.0 ? w * std::log(w) : 0.0;
    s.influence_pct = influence_percent(o.memory_term, o.bypass_term);
    s.is_answer = sample.tokens[t] == kAnswerToken;
    out.push_back(std::move(s));
  }
  return out;
}

InfluenceReport memory_influence(const Model& model, const std::vector<Sample>& corpus, const Vocabulary& vocab) {
  InfluenceReport rep;
  double answer_sum = 0.0;
  std::size_t agree = 0;
  for (const Sample& sample : corpus) {
    const ForwardResult fr = observed_run(model, sample, vocab);
    for (std::size_t t = 0; t < fr.observations.size(); ++t) {
      const StepObservation& o = fr.observations[t];
      const double pct = influence_percent(o.memory_term, o.bypass_term);
      rep.per_step.push_back(pct);
      if (sample.tokens[t] != kAnswerToken) continue;
      ++rep.answer_steps;
      answer_sum += pct;
      std::vector<double> memory_only = o.memory_term;
      if (model.output.bias.defined()) {
        for (std::size_t k = 0; k < memory_only.size(); ++k) memory_only[k] += model.output.bias[k];
      }
      agree += argmax(memory_only) == argmax(fr.logits[t].data()) ? 1 : 0;
    }
  }
  if (!rep.per_step.empty()) {
    double total = 0.0;
    for (double p : rep.per_step) total += p;
    rep.mean_pct = total / static_cast<double>(rep.per_step.size());
  }
  if (rep.answer_steps) {
    rep.answer_mean_pct = answer_sum / static_cast<double>(rep.answer_steps);
    rep.agreement = static_cast<double>(agree) / static_cast<double>(rep.answer_steps);
  }
  return rep;
}

InfluenceReport memory_influence(const Model& model, const Sample& sample, const Vocabulary& vocab) {
  return memory_influence(model, std::vector<Sample>{sample}, vocab);
}

StateSizeReport state_size_report(const ModelConfig& config, std::size_t seq_len, std::size_t batch) {
  validate(config);
  const std::size_t n = config.memory.locations, w = config.memory.width, r = config.memory.read_heads;
  StateSizeReport s;
  s.memory = n * w;
  s.linkage = n * n;
  s.precedence = n;
  s.usage = n;
  s.write_weighting = n;
  s.read_weightings = r * n;
  s.read_vectors = r * w;

  auto add_controller = [&](const ControllerSpec& spec, std::size_t input) {
    for (std::size_t units : spec.layers) {
      const bool lstm = spec.kind == ControllerKind::lstm;
      s.controller_state += lstm ? 2 * units : units;
      s.controller_preact += lstm ? 4 * units : units;
      s.controller_input += input;
      input = units;
    }
  };
  add_controller(config.controller, config.input_size + config.memory.output_size());
  if (config.bidirectional()) add_controller(config.backward_controller, config.input_size);

  MuConfig dnc = config.memory, cbmu = config.memory;
  dnc.variant = MemoryVariant::dnc;
  cbmu.variant = MemoryVariant::cbmu;
  s.interface_dnc = interface_size(dnc);
  s.interface_cbmu = interface_size(cbmu);

  const std::size_t shared = s.memory + s.usage + s.write_weighting + s.read_weightings + s.read_vectors;
  s.mu_state_dnc = shared + s.linkage + s.precedence;
  s.mu_state_cbmu = shared;
  const std::size_t controller = s.controller_state + s.controller_preact + s.controller_input;
  s.total_dnc = s.mu_state_dnc + controller + s.interface_dnc;
  s.total_cbmu = s.mu_state_cbmu + controller + s.interface_cbmu;
  s.linkage_share = static_cast<double>(s.linkage + s.precedence) / static_cast<double>(s.mu_state_dnc);
  s.reduction = 1.0 - static_cast<double>(s.total_cbmu) / static_cast<double>(s.total_dnc);
  s.seq_len = seq_len;
  s.batch = batch;
  s.retained_dnc = s.total_dnc * seq_len * batch;
  s.retained_cbmu = s.total_cbmu * seq_len * batch;
  return s;
}

std::string format_state_size_report(const StateSizeReport& s) {
  std::ostringstream o;
  o << "per-step floats per sample\n"
    << "  memory matrix        " << s.memory << "\n"
    << "  linkage              " << s.linkage << "\n"
    << "  precedence           " << s.precedence << "\n"
    << "  usage                " << s.usage << "\n"
    << "  write weighting      " << s.write_weighting << "\n"
    << "  read weightings      " << s.read_weightings << "\n"
    << "  read vectors         " << s.read_vectors << "\n"
    << "  controller state     " << s.controller_state << "\n"
    << "  controller preact    " << s.controller_preact << "\n"
    << "  controller input     " << s.controller_input << "\n"
    << "  interface (dnc/cbmu) " << s.interface_dnc << " / " << s.interface_cbmu << "\n"
    << "memory unit state      dnc " << s.mu_state_dnc << ", cbmu " << s.mu_state_cbmu << "\n"
    << "linkage mechanism      " << s.linkage + s.precedence << " (" << s.linkage_share * 100.0
    << "% of the dnc memory-unit state)\n"
    << "total per step         dnc " << s.total_dnc << ", cbmu " << s.total_cbmu << "\n"
    << "reduction              " << s.reduction * 100.0 << "%\n"
    << "retained over T=" << s.seq_len << ", B=" << s.batch << "   dnc " << s.retained_dnc << ", cbmu "
    << s.retained_cbmu << "\n";
  return o.str();
}

std::string format_parameter_report(const ModelConfig& config) {
  const ParameterCount c = count_parameters(config);
  std::ostringstream o;
  o << "controllers  " << c.controllers << "\n"
    << "memory unit  " << c.memory_unit << "\n"
    << "output       " << c.output << "\n"
    << "total        " << c.model() << "\n";
  if (c.embedding) o << "embedding    " << c.embedding << " (not included in total)\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Trace files

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out{""};
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

std::size_t trace_heads(const std::vector<StepTrace>& traces) {
  return traces.empty() ? 0 : traces.front().free_gates.size();
}

}  // namespace

std::string trace_csv_header(std::size_t r) {
  std::string h = "t,token";
  for (std::size_t i = 1; i <= r; ++i) h += ",free_g_" + std::to_string(i);
  h += ",alloc_g,write_g";
  for (const char* mode : {"b", "c", "f"}) {
    for (std::size_t i = 1; i <= r; ++i) h += std::string(",mode_") + mode + "_" + std::to_string(i);
  }
  return h + ",influence_pct,is_answer,write_entropy";
}

void export_traces(const std::vector<StepTrace>& traces, const std::filesystem::path& path, TraceFormat format) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::size_t r = trace_heads(traces);
  if (format == TraceFormat::json) {
    nlohmann::json arr = nlohmann::json::array();
    for (const StepTrace& s : traces) {
      arr.push_back({{"t", s.t}, {"token", s.token}, {"free_gates", s.free_gates},
                     {"alloc_gate", s.allocation_gate}, {"write_gate", s.write_gate},
                     {"read_modes", s.read_modes}, {"write_entropy", s.write_entropy},
                     {"influence_pct", s.influence_pct}, {"is_answer", s.is_answer}});
    }
    out << arr.dump(1) << '\n';
    return;
  }
  out << trace_csv_header(r) << '\n';
  for (const StepTrace& s : traces) {
    if (s.free_gates.size() != r) throw std::invalid_argument("export_traces: head count varies between steps");
    out << s.t << ',' << csv_field(s.token);
    for (double f : s.free_gates) out << ',' << num(f);
    out << ',' << num(s.allocation_gate) << ',' << num(s.write_gate);
    for (std::size_t m = 0; m < 3; ++m) {
      for (std::size_t i = 0; i < r; ++i) out << ',' << (s.read_modes.empty() ? "" : num(s.read_modes.at(i)[m]));
    }
    out << ',' << num(s.influence_pct) << ',' << (s.is_answer ? 1 : 0) << ',' << num(s.write_entropy) << '\n';
  }
}

std::vector<StepTrace> read_traces(const std::filesystem::path& path, TraceFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<StepTrace> out;
  if (format == TraceFormat::json) {
    const auto arr = nlohmann::json::parse(in);
    for (const auto& j : arr) {
      StepTrace s;
      s.t = j.at("t").get<std::size_t>();
      s.token = j.at("token").get<std::string>();
      s.free_gates = j.at("free_gates").get<std::vector<double>>();
      s.allocation_gate = j.at("alloc_gate").get<double>();
      s.write_gate = j.at("write_gate").get<double>();
      s.read_modes = j.at("read_modes").get<std::vector<std::array<double, 3>>>();
      s.write_entropy = j.at("write_entropy").get<double>();
      s.influence_pct = j.at("influence_pct").get<double>();
      s.is_answer = j.at("is_answer").get<bool>();
      out.push_back(std::move(s));
    }
    return out;
  }
  std::string line;
  if (!std::getline(in, line)) return out;
  const auto header = csv_split(line);
  std::size_t r = 0;
  for (const std::string& h : header) r += h.rfind("free_g_", 0) == 0 ? 1 : 0;
  if (line != trace_csv_header(r)) throw std::runtime_error(path.string() + ": unexpected trace header");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto f = csv_split(line);
    if (f.size() != header.size()) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": wrong column count");
    }
    StepTrace s;
    std::size_t k = 0;
    s.t = std::stoul(f[k++]);
    s.token = f[k++];
    for (std::size_t i = 0; i < r; ++i) s.free_gates.push_back(std::stod(f[k++]));
    s.allocation_gate = std::stod(f[k++]);
    s.write_gate = std::stod(f[k++]);
    const bool has_modes = r > 0 && !f[k].empty();
    if (has_modes) s.read_modes.resize(r);
    for (std::size_t m = 0; m < 3; ++m) {
      for (std::size_t i = 0; i < r; ++i, ++k) {
        if (has_modes) s.read_modes[i][m] = std::stod(f[k]);
      }
    }
    s.influence_pct = std::stod(f[k++]);
    s.is_answer = f[k++] == "1";
    s.write_entropy = std::stod(f[k++]);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace memcomputer

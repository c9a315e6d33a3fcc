#include "memcomputer/config.hpp"

#include <fstream>
#include <functional>
#include <set>

namespace memcomputer {

namespace {

// Collects the keys a reader understands so that leftovers can be rejected.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    known_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

  template <class E>
  void get_enum(const std::string& key, E& out, E (*parse)(const std::string&)) {
    known_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = parse(j_.at(key).get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

  void get_optional(const std::string& key, std::optional<double>& out) {
    known_.insert(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    double v = 0.0;
    get(key, v);
    out = v;
  }

  // Hands a nested object to a sub-reader.
  void nested(const std::string& key, const std::function<void(const Json&, const std::string&)>& read) {
    known_.insert(key);
    if (j_.contains(key)) read(j_.at(key), path(key));
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!known_.count(item.key())) throw ConfigError("unknown configuration key '" + path(item.key()) + "'");
    }
  }

 private:
  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  const Json& j_;
  std::string where_;
  std::set<std::string> known_;
};

ControllerKind parse_controller_kind(const std::string& s) {
  if (s == "lstm") return ControllerKind::lstm;
  if (s == "dense") return ControllerKind::dense;
  throw ConfigError("unknown controller kind '" + s + "' (lstm, dense)");
}

std::string to_string(ControllerKind k) { return k == ControllerKind::lstm ? "lstm" : "dense"; }

ControllerSpec read_controller(const Json& j, const std::string& where, ControllerSpec base) {
  Fields f(j, where);
  f.get_enum("kind", base.kind, &parse_controller_kind);
  f.get("layers", base.layers);
  f.get("layer_norm", base.layer_norm);
  f.get("per_gate_norm", base.per_gate_norm);
  f.get("ln_eps", base.ln_eps);
  f.finish();
  return base;
}

MuConfig read_mu(const Json& j, const std::string& where, MuConfig base) {
  Fields f(j, where);
  f.get("locations", base.locations);
  f.get("width", base.width);
  f.get("read_heads", base.read_heads);
  f.get_enum("variant", base.variant, &parse_memory_variant);
  f.get("layer_norm", base.layer_norm);
  f.get("ln_eps", base.ln_eps);
  f.get("cosine_eps", base.cosine_eps);
  f.finish();
  return base;
}

ModelConfig read_model(const Json& j, const std::string& where, ModelConfig base) {
  Fields f(j, where);
  std::string arch;
  f.get("arch", arch);
  if (!arch.empty()) {
    try {
      base = apply_preset(base, arch);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ".arch: " + e.what());
    }
  }
  f.get("input_size", base.input_size);
  f.get("output_size", base.output_size);
  f.nested("controller", [&](const Json& c, const std::string& w) { base.controller = read_controller(c, w, base.controller); });
  f.nested("backward_controller", [&](const Json& c, const std::string& w) {
    base.backward_controller = read_controller(c, w, base.backward_controller);
  });
  f.nested("memory", [&](const Json& c, const std::string& w) { base.memory = read_mu(c, w, base.memory); });
  f.get("keep_prob", base.keep_prob);
  f.get_enum("architecture", base.architecture, &parse_architecture);
  f.get("output_bias", base.output_bias);
  f.get("embedding_vocab", base.embedding_vocab);
  f.finish();
  return base;
}

TrainConfig read_train(const Json& j, const std::string& where, TrainConfig base) {
  Fields f(j, where);
  f.get("batch_size", base.batch_size);
  f.get("learning_rate", base.learning_rate);
  f.get("momentum", base.momentum);
  f.get("decay", base.decay);
  f.get("eps", base.eps);
  f.get("clip_norm", base.clip_norm);
  f.get("max_len", base.max_len);
  f.get_enum("padding", base.padding, &parse_padding);
  f.get("steps", base.steps);
  f.get("eval_every", base.eval_every);
  f.get("eval_batch_size", base.eval_batch_size);
  f.get("seed", base.seed);
  f.get_optional("early_stop_wer", base.early_stop_wer);
  f.get("keep_checkpoints", base.keep_checkpoints);
  f.get("log_wall_time", base.log_wall_time);
  f.finish();
  return base;
}

GeneratorConfig read_generator(const Json& j, const std::string& where, GeneratorConfig base) {
  Fields f(j, where);
  f.get("seed", base.seed);
  f.get_enum("task", base.task, &parse_task_kind);
  f.nested("copy", [&](const Json& c, const std::string& w) {
    Fields g(c, w);
    g.get("min_length", base.copy.min_length);
    g.get("max_length", base.copy.max_length);
    g.get("symbols", base.copy.symbols);
    g.finish();
  });
  f.nested("induction", [&](const Json& c, const std::string& w) {
    Fields g(c, w);
    g.get_enum("mode", base.induction.mode, &parse_induction_mode);
    g.get("context_people", base.induction.context_people);
    g.get("p_unique", base.induction.p_unique);
    g.get("p_dominant", base.induction.p_dominant);
    g.get("p_tie", base.induction.p_tie);
    g.finish();
  });
  f.finish();
  return base;
}

}  // namespace

std::string to_string(MemoryVariant v) { return v == MemoryVariant::dnc ? "dnc" : "cbmu"; }
std::string to_string(Architecture a) { return a == Architecture::unidirectional ? "unidirectional" : "bidirectional"; }
std::string to_string(TaskKind t) { return t == TaskKind::copy ? "copy" : "induction"; }
std::string to_string(InductionMode m) { return m == InductionMode::original ? "original" : "augmented"; }
std::string to_string(Padding p) { return p == Padding::end ? "end" : "front"; }

MemoryVariant parse_memory_variant(const std::string& s) {
  if (s == "dnc") return MemoryVariant::dnc;
  if (s == "cbmu") return MemoryVariant::cbmu;
  throw ConfigError("unknown memory variant '" + s + "' (dnc, cbmu)");
}

Architecture parse_architecture(const std::string& s) {
  if (s == "unidirectional" || s == "uni") return Architecture::unidirectional;
  if (s == "bidirectional" || s == "bi") return Architecture::bidirectional;
  throw ConfigError("unknown architecture '" + s + "' (unidirectional, bidirectional)");
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "induction" || s == "induction16") return TaskKind::induction;
  throw ConfigError("unknown task '" + s + "' (copy, induction16)");
}

InductionMode parse_induction_mode(const std::string& s) {
  if (s == "original") return InductionMode::original;
  if (s == "augmented") return InductionMode::augmented;
  throw ConfigError("unknown induction mode '" + s + "' (original, augmented)");
}

Padding parse_padding(const std::string& s) {
  if (s == "end") return Padding::end;
  if (s == "front") return Padding::front;
  throw ConfigError("unknown padding '" + s + "' (end, front)");
}

Json to_json(const ControllerSpec& s) {
  return {{"kind", to_string(s.kind)}, {"layers", s.layers}, {"layer_norm", s.layer_norm},
          {"per_gate_norm", s.per_gate_norm}, {"ln_eps", s.ln_eps}};
}

Json to_json(const MuConfig& c) {
  return {{"locations", c.locations}, {"width", c.width}, {"read_heads", c.read_heads},
          {"variant", to_string(c.variant)}, {"layer_norm", c.layer_norm}, {"ln_eps", c.ln_eps},
          {"cosine_eps", c.cosine_eps}};
}

Json to_json(const ModelConfig& c) {
  return {{"input_size", c.input_size},
          {"output_size", c.output_size},
          {"controller", to_json(c.controller)},
          {"backward_controller", to_json(c.backward_controller)},
          {"memory", to_json(c.memory)},
          {"keep_prob", c.keep_prob},
          {"architecture", to_string(c.architecture)},
          {"output_bias", c.output_bias},
          {"embedding_vocab", c.embedding_vocab}};
}

Json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"decay", c.decay},
          {"eps", c.eps},
          {"clip_norm", c.clip_norm},
          {"max_len", c.max_len},
          {"padding", to_string(c.padding)},
          {"steps", c.steps},
          {"eval_every", c.eval_every},
          {"eval_batch_size", c.eval_batch_size},
          {"seed", c.seed},
          {"early_stop_wer", c.early_stop_wer ? Json(*c.early_stop_wer) : Json(nullptr)},
          {"keep_checkpoints", c.keep_checkpoints},
          {"log_wall_time", c.log_wall_time}};
}

Json to_json(const GeneratorConfig& c) {
  return {{"seed", c.seed},
          {"task", to_string(c.task)},
          {"copy", {{"min_length", c.copy.min_length}, {"max_length", c.copy.max_length},
                    {"symbols", c.copy.symbols}}},
          {"induction", {{"mode", to_string(c.induction.mode)}, {"context_people", c.induction.context_people},
                         {"p_unique", c.induction.p_unique}, {"p_dominant", c.induction.p_dominant},
                         {"p_tie", c.induction.p_tie}}}};
}

Json to_json(const RunConfig& c) {
  return {{"schema_version", kConfigSchemaVersion},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"generator", to_json(c.generator)},
          {"paths", {{"train", c.paths.train}, {"val", c.paths.val}, {"vocab", c.paths.vocab},
                     {"run_dir", c.paths.run_dir}, {"checkpoint", c.paths.checkpoint}}}};
}

ControllerSpec controller_spec_from_json(const Json& j, ControllerSpec base) { return read_controller(j, "", base); }
MuConfig mu_config_from_json(const Json& j, MuConfig base) { return read_mu(j, "", base); }
ModelConfig model_config_from_json(const Json& j, ModelConfig base) { return read_model(j, "", base); }
TrainConfig train_config_from_json(const Json& j, TrainConfig base) { return read_train(j, "", base); }
GeneratorConfig generator_config_from_json(const Json& j, GeneratorConfig base) {
  return read_generator(j, "", base);
}

RunConfig run_config_from_json(const Json& j, RunConfig base) {
  Fields f(j, "");
  int version = kConfigSchemaVersion;
  f.get("schema_version", version);
  if (version != kConfigSchemaVersion) {
    throw ConfigError("unsupported schema_version " + std::to_string(version) + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  }
  f.nested("model", [&](const Json& c, const std::string& w) { base.model = read_model(c, w, base.model); });
  f.nested("train", [&](const Json& c, const std::string& w) { base.train = read_train(c, w, base.train); });
  f.nested("generator", [&](const Json& c, const std::string& w) {
    base.generator = read_generator(c, w, base.generator);
  });
  f.nested("paths", [&](const Json& c, const std::string& w) {
    Fields g(c, w);
    g.get("train", base.paths.train);
    g.get("val", base.paths.val);
    g.get("vocab", base.paths.vocab);
    g.get("run_dir", base.paths.run_dir);
    g.get("checkpoint", base.paths.checkpoint);
    g.finish();
  });
  f.finish();
  return base;
}

RunConfig load_run_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration file " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

}  // namespace memcomputer

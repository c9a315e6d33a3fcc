#pragma once

// JSON forms of every configuration. Readers overlay the keys present onto a
// base value, so missing keys keep their defaults; unknown keys are errors.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "memcomputer/model.hpp"
#include "memcomputer/tasks.hpp"
#include "memcomputer/training.hpp"

namespace memcomputer {

using Json = nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kConfigSchemaVersion = 1;

Json to_json(const ControllerSpec& spec);
Json to_json(const MuConfig& config);
Json to_json(const ModelConfig& config);
Json to_json(const TrainConfig& config);
Json to_json(const GeneratorConfig& config);

ControllerSpec controller_spec_from_json(const Json& j, ControllerSpec base = {});
MuConfig mu_config_from_json(const Json& j, MuConfig base = {});
// An "arch" key applies the named preset before the remaining keys.
ModelConfig model_config_from_json(const Json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const Json& j, TrainConfig base = {});
GeneratorConfig generator_config_from_json(const Json& j, GeneratorConfig base = {});

struct RunPaths {
  std::string train;       // training corpus (JSONL)
  std::string val;         // validation corpus; split from train when empty
  std::string vocab;       // vocabulary file; derived from the corpora when empty
  std::string run_dir = "run";
  std::string checkpoint;  // resume / evaluate / inspect source
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GeneratorConfig generator;
  RunPaths paths;
};

Json to_json(const RunConfig& config);
RunConfig run_config_from_json(const Json& j, RunConfig base = {});
RunConfig load_run_config(const std::string& path, RunConfig base = {});

std::string to_string(MemoryVariant v);
std::string to_string(Architecture a);
std::string to_string(TaskKind t);
std::string to_string(InductionMode m);
std::string to_string(Padding p);
MemoryVariant parse_memory_variant(const std::string& s);
Architecture parse_architecture(const std::string& s);
TaskKind parse_task_kind(const std::string& s);
InductionMode parse_induction_mode(const std::string& s);
Padding parse_padding(const std::string& s);

}  // namespace memcomputer

#pragma once

// Single-file checkpoint archive:
//   "MEMCKPT\0", u32 version, u64 length + canonical JSON metadata,
//   u64 tensor count, then per tensor: u32 name length, name, u32 rank,
//   u64 dims, little-endian f64 values.
// Optimizer buffers are stored as "optim.acc.<name>" and "optim.mom.<name>".

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>

#include "memcomputer/config.hpp"
#include "memcomputer/model.hpp"
#include "memcomputer/tasks.hpp"
#include "memcomputer/training.hpp"

namespace memcomputer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  Model model;
  Vocabulary vocabulary;
  std::optional<OptimizerState> optimizer;
  TrainProgress progress;
  Json train_config;  // provenance only
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace memcomputer

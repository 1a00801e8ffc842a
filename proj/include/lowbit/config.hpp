#pragma once

// Run configuration: flat `key = value` text with dotted keys.
//
//   # comment
//   model.d_model = 64
//   bits = 2-2-2
//   kd.temperature = 2

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "lowbit/model.hpp"
#include "lowbit/tasks.hpp"

namespace lowbit {

struct RunConfig {
  ModelConfig model;
  TaskSpec task;
  int epochs = 30;
  int batch_size = 64;
  double lr = 3e-4;
  DistillOptions kd;
  int train_size = 20000;
  int eval_size = 512;
  // Held-out examples greedy-decoded after every epoch for the metrics log.
  int log_eval_size = 128;
  int warmup_steps = 100;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

// Every recognised key, in serialization order.
const std::vector<std::string>& config_keys();

// Applies one key; throws on unknown keys and malformed values.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& key);

RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& config);

// Seed of the held-out set, kept apart from the training seed.
std::uint64_t eval_seed(const TaskSpec& task);

}  // namespace lowbit

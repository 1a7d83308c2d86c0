#pragma once

// Experiment configuration: a TOML-style file of [section] key = value lines,
// validated against a fixed schema.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsdet/data.hpp"
#include "fsdet/model.hpp"
#include "fsdet/training.hpp"

namespace fsdet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalConfig {
  std::string protocol = "episodic";  // episodic | fullway
  int ways = 5;
  int shots = 1;
  int episodes = 600;
  int queries_per_category = 10;
  /// Clamp ways to the number of available test categories.
  bool cap_ways = true;
  DetectOptions detect;
};

struct SeedConfig {
  std::uint64_t init = 1;
  std::uint64_t train = 1;
  std::uint64_t data = 1;
  std::uint64_t eval = 1;
};

struct PathConfig {
  /// Directory with train.jsonl / test.jsonl and images; empty means the
  /// synthetic dataset is generated in memory.
  std::string data_dir;
  std::string output_dir = "runs/default";
  std::string checkpoint;
};

struct ExperimentConfig {
  std::string name = "default";
  ModelConfig model;
  TrainingConfig training;
  EvalConfig eval;
  SynthSpec synthetic;
  SeedConfig seeds;
  PathConfig paths;

  /// Cross-field checks; throws ConfigError.
  void validate() const;
};

/// Desk-scale settings for the synthetic shape benchmark.
ExperimentConfig desk_config();

/// Parses text onto a base configuration. Unknown sections or keys and type
/// mismatches are all collected into one ConfigError.
ExperimentConfig parse_config(const std::string& text, const ExperimentConfig& base = desk_config());
ExperimentConfig load_config(const std::filesystem::path& path, const ExperimentConfig& base = desk_config());

/// Every key with its effective value; parse_config of this text reproduces
/// the configuration exactly.
std::string resolved_config_text(const ExperimentConfig& cfg);

/// FSDET_SEED (all seeds), FSDET_OUTPUT_DIR, FSDET_DATA_DIR, FSDET_CHECKPOINT.
void apply_env_overrides(ExperimentConfig& cfg);

/// Known "section.key" names, for documentation and tests.
std::vector<std::string> config_keys();

}  // namespace fsdet

#pragma once

// End-to-end runs driven by an ExperimentConfig: training with artifacts,
// evaluation, batch detection and the ablation grids.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fsdet/config.hpp"
#include "fsdet/eval.hpp"
#include "fsdet/model.hpp"
#include "fsdet/training.hpp"

namespace fsdet {

struct ExperimentData {
  DatasetManifest train;
  DatasetManifest test;
  ImageStore images;
};

/// Reads train.jsonl / test.jsonl under paths.data_dir, or renders the
/// synthetic dataset in memory (seeded by seeds.data) when data_dir is empty.
ExperimentData load_experiment_data(const ExperimentConfig& cfg);

struct TrainOptions {
  /// Write checkpoint, loss trace and resolved config under paths.output_dir.
  bool write_artifacts = true;
  /// Continue from paths.checkpoint (parameters, velocity, iteration).
  bool resume = false;
  /// Stop once this many seconds of training have elapsed (0 = no limit).
  double time_budget_seconds = 0.0;
  std::function<void(const LossBundle&)> on_step;
};

struct TrainOutcome {
  std::vector<LossBundle> trace;
  int start_iteration = 0;
  int end_iteration = 0;
  double seconds = 0.0;
  bool stopped_by_budget = false;
  std::filesystem::path checkpoint;
  std::filesystem::path loss_trace;
  std::filesystem::path resolved_config;
};

inline constexpr const char* kCheckpointFile = "model.ckpt";
inline constexpr const char* kLossTraceFile = "loss.csv";
inline constexpr const char* kResolvedConfigFile = "config.toml";

/// Builds the model described by the config with seeds.init.
std::unique_ptr<FewShotModel> make_model(const ExperimentConfig& cfg);

/// Trains the model on data.train following cfg.training and seeds.train.
TrainOutcome run_train(const ExperimentConfig& cfg, FewShotModel& model, ExperimentData& data,
                       const TrainOptions& opts = {});

/// Loads parameters from a checkpoint file; throws DataError when missing.
void load_model_weights(FewShotModel& model, const std::filesystem::path& checkpoint);

/// Evaluates on data.test with cfg.eval and seeds.eval. The episodic way count
/// is capped to the number of test categories when eval.cap_ways is set.
EvalReport run_evaluate(const ExperimentConfig& cfg, const FewShotModel& model, ExperimentData& data);

struct SupportExample {
  std::filesystem::path image;
  Box box;
};

struct DetectRequest {
  std::string category;
  std::vector<SupportExample> supports;
  /// A directory (every .ppm inside, sorted) or a single image file.
  std::filesystem::path queries;
  std::filesystem::path output;  // JSON-lines
  /// Annotated copies of the queries go here when set.
  std::optional<std::filesystem::path> overlay_dir;
};

/// Detects one category in every query with the K supports fused into a
/// single encoding. Returns the number of detections written.
std::size_t run_detect(const ExperimentConfig& cfg, const FewShotModel& model, const DetectRequest& request);

struct AblationRow {
  std::string label;
  HeadToggles heads;
  int train_ways = 1;
  int train_shots = 1;
  bool attention = false;
  std::optional<EvalReport> report;
};

/// Row definitions: "relation-heads" (7 head combinations, 1-way 1-shot
/// training, regular RPN) or "training-strategy" (6 strategy/attention rows).
std::vector<AblationRow> ablation_preset(const std::string& preset);

/// Trains and evaluates every row from the same base configuration.
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const std::string& preset,
                                      std::ostream* log = nullptr);

std::string ablation_table(const std::string& preset, const std::vector<AblationRow>& rows);
nlohmann::json ablation_to_json(const std::string& preset, const std::vector<AblationRow>& rows);

}  // namespace fsdet

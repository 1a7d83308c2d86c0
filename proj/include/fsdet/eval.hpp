#pragma once

// Episodic N-way K-shot evaluation and the full-way protocol.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsdet/data.hpp"
#include "fsdet/model.hpp"
#include "fsdet/training.hpp"

namespace fsdet {

struct EpisodeSpec {
  int ways = 0;
  int shots = 0;
  std::vector<std::string> categories;                // N
  std::vector<std::vector<InstanceRef>> supports;     // N x K
  std::vector<std::vector<std::size_t>> queries;      // N x queries_per_category record indices

  std::size_t support_count() const;
  std::size_t query_count() const;
  friend bool operator==(const EpisodeSpec&, const EpisodeSpec&) = default;
};

/// Draws n_episodes episodes. Categories and images are uniform per episode;
/// queries are distinct within an episode and never one of its support
/// images; episodes are independent of each other.
std::vector<EpisodeSpec> sample_episodes(const DatasetManifest& manifest, int ways, int shots, int n_episodes,
                                         Rng& rng, int queries_per_category = 10);

/// Output of one (query, category) branch in original image pixels.
struct BranchResult {
  std::vector<DetectionResult> detections;
  std::vector<DetectionResult> proposals;
};

/// What the evaluator needs from a detector.
class EpisodeDetector {
 public:
  virtual ~EpisodeDetector() = default;
  /// Installs the K supports of a category (replacing earlier ones).
  virtual void set_supports(const std::string& category, std::span<const InstanceRef> supports) = 0;
  virtual BranchResult detect(std::size_t query_record, const std::string& category) = 0;
};

struct EpisodeMetrics {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double recall100 = 0.0;
  double abo = 0.0;
  std::map<std::string, double> category_ap50;
};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
  double min = 0.0;
  double max = 0.0;
};

struct EvalReport {
  std::string protocol = "episodic";
  int ways = 0;
  int shots = 0;
  std::uint64_t seed = 0;
  int episodes = 0;
  std::vector<EpisodeMetrics> per_episode;
  MetricSummary ap, ap50, ap75, recall100, abo;
  /// Categories left out of a full-way run for lack of supports.
  std::vector<std::string> excluded;
};

/// Every episode query is run against every episode category; each category
/// is scored over all episode queries against its own ground truth.
EpisodeMetrics evaluate_episode(EpisodeDetector& detector, const DatasetManifest& manifest, const EpisodeSpec& episode);

/// Unweighted means and population standard deviations. Throws on empty input.
EvalReport aggregate(std::span<const EpisodeMetrics> episodes);

/// Runs and aggregates a list of episodes.
EvalReport evaluate_episodes(EpisodeDetector& detector, const DatasetManifest& manifest,
                             std::span<const EpisodeSpec> episodes);

/// Every category against every image with K supports fixed up front.
/// Categories with fewer than K instances are excluded and listed.
EvalReport full_way_evaluate(EpisodeDetector& detector, const DatasetManifest& manifest, int shots, Rng& rng);

nlohmann::json report_to_json(const EvalReport& report, bool include_episodes = false);
std::string report_table(const EvalReport& report);

/// Adapts FewShotModel to the evaluator, caching query features and the
/// prepared support encodings. Never updates weights.
class ModelDetector : public EpisodeDetector {
 public:
  ModelDetector(const FewShotModel& model, const DatasetManifest& manifest, ImageStore& images, DetectOptions opts);

  void set_supports(const std::string& category, std::span<const InstanceRef> supports) override;
  BranchResult detect(std::size_t query_record, const std::string& category) override;

  void clear_cache() { queries_.clear(); }

 private:
  const FewShotModel* model_;
  const DatasetManifest* manifest_;
  ImageStore* images_;
  DetectOptions opts_;
  std::map<std::string, SupportEncoding> supports_;
  std::map<std::size_t, QueryEncoding> queries_;
};

}  // namespace fsdet

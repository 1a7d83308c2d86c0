#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsdet/geometry.hpp"
#include "fsdet/image.hpp"
#include "fsdet/params.hpp"

namespace fsdet {

struct ImageRecord {
  std::string image;  // path relative to the dataset root
  int width = 0;
  int height = 0;
  std::vector<GroundTruthBox> boxes;

  bool has_category(const std::string& category) const;
  std::vector<Box> boxes_of(const std::string& category) const;
};

struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::string split;

  /// Sorted distinct categories over all boxes.
  std::vector<std::string> categories() const;
  /// Throws DataError on out-of-bounds or malformed boxes.
  void validate() const;
  GroundTruthSet ground_truth() const;
};

/// One ImageRecord per line: {image, width, height, boxes:[{x1,y1,x2,y2,category}]}.
DatasetManifest read_manifest(const std::filesystem::path& path, std::string split = {});
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
nlohmann::json record_to_json(const ImageRecord& rec);
ImageRecord record_from_json(const nlohmann::json& j);

/// COCO-style annotation JSON to a manifest. Category names pass through the
/// optional alias map (name -> canonical name).
DatasetManifest convert_coco(const nlohmann::json& coco, const std::map<std::string, std::string>& aliases = {});

// ---- preprocessing ------------------------------------------------------

struct QueryPrepConfig {
  int short_side = 600;
  int long_cap = 1000;
};

struct PreparedQuery {
  Image image;
  double scale = 1.0;
};

/// Resizes so the shorter side hits short_side unless the longer side would
/// exceed long_cap: scale = min(short/short_side_px, long/long_side_px).
PreparedQuery prepare_query(const Image& image, const QueryPrepConfig& cfg = {});
/// Output dimensions prepare_query would produce, without touching pixels.
std::pair<int, int> prepared_size(int width, int height, const QueryPrepConfig& cfg, double* scale = nullptr);

struct SupportPrepConfig {
  int size = 320;
  int context = 16;
};

struct SupportPadding {
  int top = 0, bottom = 0, left = 0, right = 0;
};

struct SupportCrop {
  Image image;            // size x size
  Box source;             // the object box in the source image
  Box crop_region;        // expanded, clipped region cut from the source
  SupportPadding padding;         // zero padding in source pixels
  SupportPadding output_padding;  // zero padding in output pixels
  Box object_in_crop;     // the object box in output coordinates
};

/// Expands the box by the context margin, clips to the image, centres the
/// crop in a zero-padded square and resizes it to size x size.
SupportCrop prepare_support(const Image& image, const Box& box, const SupportPrepConfig& cfg = {});

// ---- dataset construction ----------------------------------------------

inline constexpr double kMinBoxAreaRatio = 0.0005;

struct FilterReport {
  DatasetManifest manifest;
  int kept_images = 0;
  int removed_images = 0;
  int removed_boxes = 0;
};

/// Drops every image holding a box whose area is below min_ratio of the image.
FilterReport filter_small_boxes(const DatasetManifest& manifest, double min_ratio = kMinBoxAreaRatio);

/// Directed is-a edges (parent -> child).
struct Taxonomy {
  std::string root;
  std::vector<std::pair<std::string, std::string>> edges;

  std::vector<std::string> nodes() const;
  /// Throws DataError when cyclic or not connected.
  void validate() const;
  static Taxonomy from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct TaxonomySplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
  /// Shortest-path distance of each category to the training pool.
  std::map<std::string, int> distance;
};

/// Picks the n_test categories farthest (undirected shortest path) from the
/// training pool; ties go to the lexicographically smaller name.
TaxonomySplit taxonomy_split(const std::vector<std::string>& categories, const Taxonomy& taxonomy,
                             const std::vector<std::string>& train_pool, int n_test);

/// Partitions records by the split; images with boxes from both sides go to
/// test carrying only their test boxes.
std::pair<DatasetManifest, DatasetManifest> apply_split(const DatasetManifest& manifest, const TaxonomySplit& split);

struct DatasetStats {
  int num_classes = 0;
  int num_images = 0;
  int num_boxes = 0;
  double avg_boxes_per_image = 0.0;
  int min_images_per_class = 0;
  int max_images_per_class = 0;
  double avg_images_per_class = 0.0;
  double min_box_size = 0.0, max_box_size = 0.0;  // sqrt(w * h) in pixels
  double min_area_ratio = 0.0, max_area_ratio = 0.0;
  double min_aspect = 0.0, max_aspect = 0.0;  // w / h
};

DatasetStats dataset_stats(const DatasetManifest& manifest);
nlohmann::json stats_to_json(const DatasetStats& stats);
std::string stats_table(const std::vector<std::pair<std::string, DatasetStats>>& columns);

// ---- synthetic data -----------------------------------------------------

struct SynthSpec {
  std::vector<std::string> train_categories{"square", "disc", "triangle", "cross", "ring", "diamond"};
  std::vector<std::string> test_categories{"frame", "star"};
  int train_images = 400;
  int test_images = 100;
  int image_size = 96;
  int min_objects = 1;
  int max_objects = 3;
  double min_object_size = 18.0;
  double max_object_size = 36.0;
  int clutter = 4;
};

/// Shape names the renderer understands.
const std::vector<std::string>& synthetic_shapes();

struct SyntheticDataset {
  DatasetManifest train;
  DatasetManifest test;
  std::map<std::string, Image> images;  // keyed by record path
};

SyntheticDataset generate_synthetic_dataset(const SynthSpec& spec, std::uint64_t seed);

/// Writes images as PPM under root and the two manifests as train.jsonl/test.jsonl.
void write_synthetic_dataset(const SyntheticDataset& data, const std::filesystem::path& root);

// ---- image access -------------------------------------------------------

/// Loads record images relative to a root directory, caching decoded pixels.
class ImageStore {
 public:
  ImageStore() = default;
  explicit ImageStore(std::filesystem::path root) : root_(std::move(root)) {}

  void insert(const std::string& key, Image image);
  const Image& get(const std::string& key);
  void clear() { cache_.clear(); }

 private:
  std::filesystem::path root_;
  std::map<std::string, Image> cache_;
};

}  // namespace fsdet

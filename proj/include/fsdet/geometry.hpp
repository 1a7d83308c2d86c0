#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace fsdet {

/// Axis-aligned box in pixel coordinates, origin top-left.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept { return width() * height(); }
  double center_x() const noexcept { return 0.5 * (x1 + x2); }
  double center_y() const noexcept { return 0.5 * (y1 + y2); }
  bool valid() const noexcept;
  Box clipped(double image_width, double image_height) const noexcept;
  Box scaled(double s) const noexcept { return {x1 * s, y1 * s, x2 * s, y2 * s}; }

  friend bool operator==(const Box&, const Box&) = default;
};

struct DetectionResult {
  Box box;
  double score = 0.0;
  std::string category;
  std::string image_id;
};

struct GroundTruthBox {
  Box box;
  std::string category;
};

/// Ground truth of one image.
struct GroundTruthImage {
  std::string image_id;
  std::vector<GroundTruthBox> boxes;
};

using GroundTruthSet = std::vector<GroundTruthImage>;

/// Intersection over union. Zero-area boxes yield 0.
double iou(const Box& a, const Box& b) noexcept;

/// Greedy suppression. Returns kept indices in descending score order; equal
/// scores are ordered by ascending index. A box is dropped when its IoU with a
/// kept box exceeds iou_threshold.
std::vector<int> nms(std::span<const DetectionResult> dets, double iou_threshold);

struct SoftNmsParams {
  double sigma = 0.5;
  double score_floor = 0.001;
};

/// Gaussian soft-NMS: scores decay by exp(-iou^2 / sigma) against each
/// successively selected box. Output is in selection order.
std::vector<DetectionResult> soft_nms(std::span<const DetectionResult> dets,
                                      SoftNmsParams params = {});

struct ApResult {
  double value = 0.0;
  /// Detections of the category exist but the category has no ground truth.
  bool missing_ground_truth = false;
  int num_ground_truth = 0;
  int num_detections = 0;
};

/// AP for one category at one IoU threshold: greedy score-ordered matching,
/// 101-point interpolated precision.
ApResult average_precision(std::span<const DetectionResult> dets, const GroundTruthSet& gts,
                           const std::string& category, double iou_threshold);

/// Mean of average_precision over IoU thresholds 0.50:0.05:0.95.
double coco_average_precision(std::span<const DetectionResult> dets, const GroundTruthSet& gts,
                              const std::string& category);

/// 101-point interpolation of a precision/recall curve given in detection order.
double interpolated_ap(std::span<const double> precision, std::span<const double> recall);

/// Fraction of ground-truth boxes (optionally restricted to a category) hit at
/// iou_threshold by one of the top-k proposals of the same image. An empty
/// ground truth recalls 1.0.
double recall_at_k(std::span<const DetectionResult> proposals, const GroundTruthSet& gts, int k,
                   double iou_threshold, const std::string& category = {});

/// Mean over ground-truth boxes of the best IoU with any proposal in the same
/// image. 0 when there are no proposals.
double average_best_overlap(std::span<const DetectionResult> proposals, const GroundTruthSet& gts,
                            const std::string& category = {});

/// Metric line for reports: {metric, category, value, iou_threshold, k}.
nlohmann::json metric_record(const std::string& metric, const std::string& category, double value,
                             double iou_threshold, int k);

void to_json(nlohmann::json& j, const Box& b);
void from_json(const nlohmann::json& j, Box& b);

}  // namespace fsdet

#pragma once

// The assembled detector: one shared extractor feeding, per support branch,
// an attention RPN and a multi-relation detector.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fsdet/data.hpp"
#include "fsdet/features.hpp"
#include "fsdet/geometry.hpp"
#include "fsdet/params.hpp"
#include "fsdet/relation.hpp"
#include "fsdet/rpn.hpp"

namespace fsdet {

struct ModelConfig {
  BackboneConfig backbone;
  AnchorConfig anchors;
  RpnConfig rpn;
  RelationConfig relation;
  QueryPrepConfig query;
  SupportPrepConfig support;
  int roi_sampling = 2;

  /// Checks the pieces and ties dependent fields (anchor stride, relation
  /// width) to the backbone. Throws std::invalid_argument.
  ModelConfig resolved() const;
};

/// Fused K-shot support representation for one category.
struct SupportEncoding {
  std::string category;
  ag::Var kernel;   // [1,C,1,1], averaged support map
  ag::Var feature;  // [1,C,7,7], object region of the support map
  int shots = 0;
};

/// Query features on the prepared (resized) image.
struct QueryEncoding {
  std::string image_id;
  ag::Var features;  // [1,C,h,w]
  int width = 0;     // prepared width in pixels
  int height = 0;
  double scale = 1.0;  // prepared / original
  int original_width = 0;
  int original_height = 0;
};

/// Everything one support branch produces for one query.
struct BranchOutput {
  RpnOutput rpn;
  std::vector<Proposal> proposals;  // RPN proposals, descending objectness
  std::vector<Box> boxes;           // proposals plus any appended boxes
  /// Undefined when boxes is empty.
  MultiRelationDetector::Output heads;
};

struct DetectOptions {
  double score_threshold = 0.05;
  double nms_threshold = 0.5;
  bool soft_nms = false;
  SoftNmsParams soft;
  int max_detections = 100;
  /// Proposals kept by the RPN before re-scoring.
  int proposals = 100;
};

/// Detections and the proposals they came from, both in original pixels.
struct DetectOutput {
  std::vector<DetectionResult> detections;
  std::vector<DetectionResult> proposals;
};

class FewShotModel {
 public:
  FewShotModel(const ModelConfig& cfg, std::uint64_t init_seed);
  // Modules hold handles into the parameter store; copies would alias it.
  FewShotModel(const FewShotModel&) = delete;
  FewShotModel& operator=(const FewShotModel&) = delete;

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }
  const Backbone& backbone() const noexcept { return backbone_; }
  const AttentionRpn& rpn() const noexcept { return rpn_; }
  const MultiRelationDetector& relation() const noexcept { return relation_; }

  void set_heads(HeadToggles heads) noexcept { relation_.set_heads(heads); }
  /// Switches between the attention RPN and the all-ones-kernel regular RPN.
  void set_attention(bool on);

  /// Resizes and runs the extractor. Records gradients when enabled.
  QueryEncoding encode_query(const Image& original, std::string image_id = {}) const;
  /// Extractor on an already prepared image with a known scale.
  QueryEncoding encode_prepared(const Image& prepared, double scale, std::string image_id = {}) const;

  /// Averages K support crops into one kernel and one region feature.
  SupportEncoding encode_support(std::span<const SupportCrop> crops, std::string category = {}) const;
  /// Crops (image, box) pairs and encodes them.
  SupportEncoding encode_support(std::span<const Image* const> images, std::span<const Box> boxes,
                                 std::string category = {}) const;

  /// Attention RPN, proposal selection, region features and relation heads.
  /// extra_boxes (prepared-image pixels) are appended to the proposals.
  BranchOutput run_branch(const QueryEncoding& query, const SupportEncoding& support, int post_nms_k,
                          std::span<const Box> extra_boxes = {}) const;

  /// Full inference for one category: sigmoid(fused) scores, patch-head box
  /// refinement, suppression, thresholding, and rescaling to original pixels.
  DetectOutput detect(const QueryEncoding& query, const SupportEncoding& support, const DetectOptions& opts) const;

  /// Anchors for a feature map of the given size.
  std::vector<Box> anchors_for(int fm_height, int fm_width) const;

 private:
  ModelConfig cfg_;
  ParamStore store_;
  Rng init_rng_;
  Backbone backbone_;
  AttentionRpn rpn_;
  MultiRelationDetector relation_;
};

}  // namespace fsdet

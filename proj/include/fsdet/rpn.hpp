#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "fsdet/autograd.hpp"
#include "fsdet/features.hpp"
#include "fsdet/geometry.hpp"
#include "fsdet/params.hpp"

namespace fsdet {

struct AnchorConfig {
  std::vector<double> scales{32.0, 64.0, 128.0};
  std::vector<double> aspect_ratios{0.5, 1.0, 2.0};
  int stride = 8;

  void validate() const;
  int anchors_per_cell() const { return static_cast<int>(scales.size() * aspect_ratios.size()); }
};

/// One anchor per (cell, scale, ratio), centred on cell centres; ordered
/// row-major over cells, then scale, then ratio. Ratio is width / height.
std::vector<Box> generate_anchors(const AnchorConfig& cfg, int fm_height, int fm_width);

using BoxDeltas = std::array<double, 4>;  // (tx, ty, tw, th)

/// tw/th are clamped to this before exponentiation in decode.
inline constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

BoxDeltas encode_box(const Box& anchor, const Box& target);
Box decode_box(const Box& anchor, const BoxDeltas& d);
std::vector<BoxDeltas> encode_boxes(std::span<const Box> anchors, std::span<const Box> targets);
/// Decodes then clips to [0,image_width] x [0,image_height].
std::vector<Box> decode_boxes(std::span<const Box> anchors, std::span<const BoxDeltas> deltas,
                              double image_width, double image_height);

struct RpnConfig {
  /// Width of the 3x3 conv on the attention map; 0 keeps the input width.
  int conv_channels = 0;
  double positive_iou = 0.7;
  double negative_iou = 0.3;
  int batch_anchors = 256;
  double positive_fraction = 0.5;
  int pre_nms_k = 1000;
  int post_nms_k = 100;
  double nms_threshold = 0.7;
  /// false realises the regular RPN: the correlation kernel is all ones.
  bool attention = true;
};

struct Proposal {
  Box box;
  double objectness = 0.0;
};

enum class AnchorLabel : std::int8_t { kIgnore = -1, kNegative = 0, kPositive = 1 };

struct RpnTargets {
  std::vector<AnchorLabel> labels;
  /// Regression targets, meaningful where labels == kPositive.
  std::vector<BoxDeltas> deltas;
  /// Anchors selected for the loss (positives and negatives only).
  std::vector<char> sampled;
  int num_positive = 0;
  int num_negative = 0;
};

/// Positive when IoU >= positive_iou with a ground truth or when the anchor is
/// the best match of some ground truth; negative when max IoU <= negative_iou;
/// otherwise ignored. Up to batch_anchors are then sampled, positives capped at
/// positive_fraction.
RpnTargets assign_rpn_targets(std::span<const Box> anchors, std::span<const Box> gt_boxes,
                              const RpnConfig& cfg, Rng& rng);

/// S = 1 kernel: the support map averaged over its spatial extent.
SupportKernel build_support_kernel(const FeatureMap& support);

/// Differentiable outputs of one attention-RPN pass.
struct RpnOutput {
  ag::Var attention;  // [1,C,H,W]
  ag::Var logits;     // [A,H,W]
  ag::Var deltas;     // [4A,H,W]
};

class AttentionRpn {
 public:
  AttentionRpn(const RpnConfig& cfg, int in_channels, int anchors_per_cell, ParamStore& store, Rng& rng);

  /// kernel [1,C,1,1], query [1,C,H,W]. The regular-RPN mode swaps the
  /// kernel for ones before correlating.
  RpnOutput forward(const ag::Var& kernel, const ag::Var& query) const;

  /// Heads applied to an arbitrary [1,C,H,W] map, skipping the correlation.
  RpnOutput heads(const ag::Var& attention) const;

  const RpnConfig& config() const noexcept { return cfg_; }
  void set_attention(bool on) noexcept { cfg_.attention = on; }
  int anchors_per_cell() const noexcept { return anchors_; }

 private:
  RpnConfig cfg_;
  int anchors_ = 0;
  ag::Var conv_w_, conv_b_, cls_w_, cls_b_, reg_w_, reg_b_;
};

/// Plain tensors of a forward pass: objectness logits [A,H,W], deltas [4A,H,W].
struct RpnMaps {
  Tensor logits;
  Tensor deltas;
};

RpnMaps attention_forward(const SupportKernel& kernel, const FeatureMap& query, const AttentionRpn& rpn);

/// Anchor-major views: logits [H*W*A], deltas [H*W*A, 4].
ag::Var anchor_logits(const ag::Var& logits_map);
ag::Var anchor_deltas(const ag::Var& deltas_map);

/// Sigmoid objectness, top pre_nms_k, decode, clip, NMS, top post_nms_k.
std::vector<Proposal> select_proposals(const Tensor& logits_map, const Tensor& deltas_map,
                                       std::span<const Box> anchors, int pre_nms_k, int post_nms_k,
                                       double nms_threshold, double image_width, double image_height);

struct RpnLoss {
  ag::Var objectness;  // [1]
  ag::Var regression;  // [1]
  /// Set when no anchor was sampled; both terms are then zero.
  bool empty_sample = false;
};

/// BCE over sampled anchors normalised by their count plus smooth-L1 over
/// positive anchors normalised by the positive count.
RpnLoss rpn_loss(const ag::Var& logits_map, const ag::Var& deltas_map, const RpnTargets& targets);

}  // namespace fsdet

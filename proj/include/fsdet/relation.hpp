#pragma once

#include <array>
#include <span>
#include <vector>

#include "fsdet/autograd.hpp"
#include "fsdet/features.hpp"
#include "fsdet/params.hpp"

namespace fsdet {

struct HeadToggles {
  bool global = true;
  bool local = true;
  bool patch = true;

  bool any() const noexcept { return global || local || patch; }
  friend bool operator==(const HeadToggles&, const HeadToggles&) = default;
};

struct RelationConfig {
  int channels = 64;
  /// Hidden widths of the global MLP; 0 means "same as channels".
  int global_hidden = 0;
  /// Patch module widths. Full-scale values are 512 and 2048.
  int patch_mid = 8;
  int patch_out = 32;
  HeadToggles heads;
};

/// Per-pair scores of the three heads. fused is their exact sum.
struct RelationScores {
  double global_logit = 0.0;
  double local_logit = 0.0;
  double patch_logit = 0.0;
  double fused_logit = 0.0;
  std::array<double, 4> patch_box_deltas{0, 0, 0, 0};
};

/// Spatial sizes observed while running the patch module.
struct PatchTrace {
  std::vector<int> spatial;
};

class MultiRelationDetector {
 public:
  MultiRelationDetector(const RelationConfig& cfg, ParamStore& store, Rng& rng);

  struct Output {
    ag::Var global;      // [P]
    ag::Var local;       // [P]
    ag::Var patch;       // [P]
    ag::Var fused;       // [P]
    ag::Var box_deltas;  // [P,4]
  };

  /// query [P,C,7,7] against one support [1,C,7,7]. Disabled heads
  /// contribute constant zeros.
  Output forward(const ag::Var& query, const ag::Var& support) const;

  ag::Var global_relation(const ag::Var& query, const ag::Var& support) const;
  ag::Var local_relation(const ag::Var& query, const ag::Var& support) const;
  /// Returns (logits [P], deltas [P,4]).
  std::pair<ag::Var, ag::Var> patch_relation(const ag::Var& query, const ag::Var& support,
                                             PatchTrace* trace = nullptr) const;

  const RelationConfig& config() const noexcept { return cfg_; }
  void set_heads(HeadToggles heads) noexcept { cfg_.heads = heads; }

 private:
  void check_inputs(const ag::Var& query, const ag::Var& support) const;

  RelationConfig cfg_;
  ag::Var g_fc1_w_, g_fc1_b_, g_fc2_w_, g_fc2_b_, g_fc3_w_, g_fc3_b_;
  ag::Var l_conv_w_, l_conv_b_, l_fc_w_, l_fc_b_;
  ag::Var p_conv1_w_, p_conv1_b_, p_conv2_w_, p_conv2_b_, p_conv3_w_, p_conv3_b_;
  ag::Var p_cls_w_, p_cls_b_, p_reg_w_, p_reg_b_;
};

/// Value-level scoring of one proposal feature against one support feature.
RelationScores score_pair(const MultiRelationDetector& det, const RegionFeature& query,
                          const RegionFeature& support);

double fuse_relation_scores(double global_logit, double local_logit, double patch_logit) noexcept;

/// Mean sigmoid-BCE over the selected pairs. Throws on an empty selection.
ag::Var matching_loss(const ag::Var& fused_logits, std::span<const double> labels,
                      std::span<const int> selected);

struct BoxLoss {
  ag::Var value;  // [1]
  bool no_foreground = false;
};

/// Smooth-L1 summed over coordinates, averaged over foreground rows.
BoxLoss detector_box_loss(const ag::Var& deltas, const Tensor& targets, std::span<const char> foreground);

}  // namespace fsdet

#pragma once

// Feature primitives shared by the proposal and matching stages.

#include <span>
#include <string>
#include <vector>

#include "fsdet/autograd.hpp"
#include "fsdet/geometry.hpp"
#include "fsdet/image.hpp"
#include "fsdet/params.hpp"

namespace fsdet {

/// Dense feature map, stored [C,H,W], with the pixel stride of one cell.
struct FeatureMap {
  Tensor data;
  int stride = 1;
  std::string source;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
  /// Element (h, w, c).
  double at(int h, int w, int c) const { return data.at(c, h, w); }
  void validate() const;
};

/// S x S x C correlation kernel, stored [C,S,S].
struct SupportKernel {
  Tensor data;
  int size() const { return data.dim(1); }
  int channels() const { return data.dim(0); }
};

/// (H-S+1) x (W-S+1) x C correlation output, stored [C,H',W'].
struct AttentionMap {
  Tensor data;
};

inline constexpr int kRegionSize = 7;

/// 7 x 7 x C pooled proposal feature, stored [C,7,7].
struct RegionFeature {
  Tensor data;
  Box source;
};

/// G(h,w,c) = sum_{i,j} X(i,j,c) * Y(h+i, w+j, c), valid positions only.
AttentionMap depthwise_cross_correlation(const SupportKernel& kernel, const FeatureMap& query);

/// Per-channel spatial mean, returned as a length-C vector.
Tensor global_average_pool(const FeatureMap& fm);

/// Bilinear region alignment of an image-space box onto a 7 x 7 grid.
/// image_width/height bound the box; a box entirely outside the image throws.
RegionFeature extract_region_feature(const FeatureMap& fm, const Box& box, double image_width,
                                     double image_height, int sampling_ratio = 2);

/// Elementwise mean of K >= 1 equally shaped features.
Tensor fuse_k_shot_features(std::span<const Tensor> features);

// ---- shared extractor ---------------------------------------------------

struct BackboneConfig {
  int in_channels = 3;
  std::vector<int> channels{16, 32, 64, 64};
  std::vector<int> strides{2, 2, 2, 1};
  std::vector<bool> frozen{true, false, false, false};
  /// Blocks run before the features are tapped (1-based, <= channels.size()).
  int feature_block = 4;

  void validate() const;
  int total_stride() const;
  int out_channels() const { return channels.at(static_cast<std::size_t>(feature_block) - 1); }
};

/// Stack of 3x3 conv + ReLU blocks. One instance serves every branch, so the
/// query and each support pass through identical weights.
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, ParamStore& store, Rng& rng);

  /// image [1,in,H,W] -> [1,C,h,w].
  ag::Var forward(const ag::Var& image) const;

  int stride() const noexcept { return stride_; }
  int out_channels() const noexcept { return cfg_.out_channels(); }
  const BackboneConfig& config() const noexcept { return cfg_; }

 private:
  BackboneConfig cfg_;
  std::vector<ag::Var> weights_;
  std::vector<ag::Var> biases_;
  int stride_ = 1;
};

ag::Var image_var(const Image& img);

/// Runs the extractor without recording gradients.
FeatureMap extract_features(const Image& image, const Backbone& backbone, std::string source = {});

}  // namespace fsdet

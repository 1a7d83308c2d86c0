#include "fsdet/features.hpp"

#include <cmath>

namespace fsdet {

void FeatureMap::validate() const {
  if (data.rank() != 3 || data.dim(0) < 1 || data.dim(1) < 1 || data.dim(2) < 1) {
    throw ShapeError("feature map must be a non-empty [C,H,W] tensor, got " + data.shape_string());
  }
  if (stride < 1) throw ShapeError("feature map stride must be >= 1");
  if (!data.all_finite()) throw ShapeError("feature map contains non-finite entries");
}

AttentionMap depthwise_cross_correlation(const SupportKernel& kernel, const FeatureMap& query) {
  query.validate();
  if (kernel.data.rank() != 3 || kernel.data.dim(1) != kernel.data.dim(2)) {
    throw ShapeError("support kernel must be [C,S,S]");
  }
  if (kernel.channels() != query.channels()) {
    throw ShapeError("support kernel has " + std::to_string(kernel.channels()) + " channels, query has " +
                     std::to_string(query.channels()));
  }
  if (kernel.size() > query.height() || kernel.size() > query.width()) {
    throw ShapeError("support kernel larger than query feature map");
  }
  ag::NoGradGuard guard;
  const int C = query.channels(), S = kernel.size();
  ag::Var k(kernel.data.reshaped({1, C, S, S}));
  ag::Var y(query.data.reshaped({1, C, query.height(), query.width()}));
  const Tensor g = ag::depthwise_xcorr(k, y).value();
  return {g.reshaped({C, g.dim(2), g.dim(3)})};
}

Tensor global_average_pool(const FeatureMap& fm) {
  fm.validate();
  ag::NoGradGuard guard;
  ag::Var x(fm.data.reshaped({1, fm.channels(), fm.height(), fm.width()}));
  return ag::global_avg_pool(x).value().reshaped({fm.channels()});
}

RegionFeature extract_region_feature(const FeatureMap& fm, const Box& box, double image_width,
                                     double image_height, int sampling_ratio) {
  fm.validate();
  if (!box.valid()) throw ShapeError("invalid region box");
  if (box.x2 <= 0.0 || box.y2 <= 0.0 || box.x1 >= image_width || box.y1 >= image_height) {
    throw ShapeError("region box lies entirely outside the image");
  }
  ag::NoGradGuard guard;
  const ag::RoiBox roi{box.x1, box.y1, box.x2, box.y2};
  const Tensor out = ag::roi_align(ag::Var(fm.data), std::span(&roi, 1), 1.0 / fm.stride, kRegionSize,
                                    sampling_ratio)
                          .value();
  return {out.reshaped({fm.channels(), kRegionSize, kRegionSize}), box};
}

Tensor fuse_k_shot_features(std::span<const Tensor> features) {
  if (features.empty()) throw ShapeError("fuse_k_shot_features: K must be >= 1");
  Tensor out = Tensor::zeros_like(features[0]);
  for (const auto& f : features) {
    if (!f.same_shape(out)) throw ShapeError("fuse_k_shot_features: shape mismatch");
    out += f;
  }
  out *= 1.0 / static_cast<double>(features.size());
  return out;
}

// ---- backbone -----------------------------------------------------------

void BackboneConfig::validate() const {
  if (channels.empty()) throw std::invalid_argument("backbone needs at least one block");
  if (strides.size() != channels.size() || frozen.size() != channels.size()) {
    throw std::invalid_argument("backbone channels/strides/frozen lists differ in length");
  }
  if (in_channels < 1) throw std::invalid_argument("backbone in_channels must be >= 1");
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] < 1 || strides[i] < 1) throw std::invalid_argument("backbone widths/strides must be >= 1");
  }
  if (feature_block < 1 || feature_block > static_cast<int>(channels.size())) {
    throw std::invalid_argument("backbone feature_block out of range");
  }
}

int BackboneConfig::total_stride() const {
  int s = 1;
  for (int i = 0; i < feature_block; ++i) s *= strides[static_cast<std::size_t>(i)];
  return s;
}

Backbone::Backbone(const BackboneConfig& cfg, ParamStore& store, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  int in = cfg_.in_channels;
  for (int i = 0; i < cfg_.feature_block; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const int out = cfg_.channels[idx];
    const std::string prefix = "backbone.block" + std::to_string(i + 1);
    weights_.push_back(store.add(prefix + ".weight", he_normal({out, in, 3, 3}, in * 9, rng), cfg_.frozen[idx]));
    biases_.push_back(store.add(prefix + ".bias", Tensor({out}), cfg_.frozen[idx]));
    in = out;
  }
  stride_ = cfg_.total_stride();
}

ag::Var Backbone::forward(const ag::Var& image) const {
  const auto& shape = image.shape();
  if (shape.size() != 4 || shape[1] != cfg_.in_channels) {
    throw ShapeError("backbone expects [1," + std::to_string(cfg_.in_channels) + ",H,W] input");
  }
  if (shape[2] < stride_ || shape[3] < stride_) throw ShapeError("image smaller than one feature stride");
  ag::Var x = image;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    x = ag::relu(ag::conv2d(x, weights_[i], biases_[i], cfg_.strides[i], 1));
  }
  return x;
}

ag::Var image_var(const Image& img) {
  return ag::Var(img.pixels.reshaped({1, img.channels(), img.height(), img.width()}));
}

FeatureMap extract_features(const Image& image, const Backbone& backbone, std::string source) {
  ag::NoGradGuard guard;
  const Tensor out = backbone.forward(image_var(image)).value();
  return {out.reshaped({out.dim(1), out.dim(2), out.dim(3)}), backbone.stride(), std::move(source)};
}

}  // namespace fsdet

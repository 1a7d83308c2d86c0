#include "fsdet/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fsdet {

ModelConfig ModelConfig::resolved() const {
  ModelConfig out = *this;
  out.backbone.validate();
  out.anchors.stride = out.backbone.total_stride();
  out.anchors.validate();
  out.relation.channels = out.backbone.out_channels();
  if (out.roi_sampling < 1) throw std::invalid_argument("roi_sampling must be >= 1");
  if (out.rpn.pre_nms_k < 1 || out.rpn.post_nms_k < 1) throw std::invalid_argument("RPN top-k values must be >= 1");
  if (!(out.rpn.nms_threshold > 0.0 && out.rpn.nms_threshold < 1.0)) {
    throw std::invalid_argument("RPN nms_threshold must lie in (0,1)");
  }
  if (out.query.short_side < 1 || out.query.long_cap < out.query.short_side) {
    throw std::invalid_argument("query sizes need 1 <= short_side <= long_cap");
  }
  if (out.support.size < out.backbone.total_stride() || out.support.context < 0) {
    throw std::invalid_argument("support crop smaller than one feature cell");
  }
  return out;
}

FewShotModel::FewShotModel(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg.resolved()),
      init_rng_(init_seed),
      backbone_(cfg_.backbone, store_, init_rng_),
      rpn_(cfg_.rpn, cfg_.backbone.out_channels(), cfg_.anchors.anchors_per_cell(), store_, init_rng_),
      relation_(cfg_.relation, store_, init_rng_) {}

void FewShotModel::set_attention(bool on) {
  cfg_.rpn.attention = on;
  rpn_.set_attention(on);
}

QueryEncoding FewShotModel::encode_prepared(const Image& prepared, double scale, std::string image_id) const {
  QueryEncoding q;
  q.image_id = std::move(image_id);
  q.features = backbone_.forward(image_var(prepared));
  q.width = prepared.width();
  q.height = prepared.height();
  q.scale = scale;
  q.original_width = static_cast<int>(std::lround(prepared.width() / scale));
  q.original_height = static_cast<int>(std::lround(prepared.height() / scale));
  return q;
}

QueryEncoding FewShotModel::encode_query(const Image& original, std::string image_id) const {
  const PreparedQuery p = prepare_query(original, cfg_.query);
  QueryEncoding q = encode_prepared(p.image, p.scale, std::move(image_id));
  q.original_width = original.width();
  q.original_height = original.height();
  return q;
}

SupportEncoding FewShotModel::encode_support(std::span<const SupportCrop> crops, std::string category) const {
  if (crops.empty()) throw std::invalid_argument("encode_support: at least one support crop is required");
  std::vector<ag::Var> kernels, features;
  kernels.reserve(crops.size());
  features.reserve(crops.size());
  const double spatial = 1.0 / backbone_.stride();
  for (const auto& crop : crops) {
    const ag::Var fm = backbone_.forward(image_var(crop.image));
    const auto& s = fm.shape();
    kernels.push_back(ag::reshape(ag::global_avg_pool(fm), {1, s[1], 1, 1}));
    const Box& b = crop.object_in_crop;
    const ag::RoiBox roi{b.x1, b.y1, b.x2, b.y2};
    features.push_back(
        ag::roi_align(ag::reshape(fm, {s[1], s[2], s[3]}), std::span(&roi, 1), spatial, kRegionSize, cfg_.roi_sampling));
  }
  SupportEncoding enc;
  enc.category = std::move(category);
  enc.shots = static_cast<int>(crops.size());
  enc.kernel = crops.size() == 1 ? kernels.front() : ag::mean_of(kernels);
  enc.feature = crops.size() == 1 ? features.front() : ag::mean_of(features);
  return enc;
}

SupportEncoding FewShotModel::encode_support(std::span<const Image* const> images, std::span<const Box> boxes,
                                             std::string category) const {
  if (images.size() != boxes.size()) throw std::invalid_argument("encode_support: one box per support image");
  std::vector<SupportCrop> crops;
  crops.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) crops.push_back(prepare_support(*images[i], boxes[i], cfg_.support));
  return encode_support(crops, std::move(category));
}

std::vector<Box> FewShotModel::anchors_for(int fm_height, int fm_width) const {
  return generate_anchors(cfg_.anchors, fm_height, fm_width);
}

BranchOutput FewShotModel::run_branch(const QueryEncoding& query, const SupportEncoding& support, int post_nms_k,
                                      std::span<const Box> extra_boxes) const {
  BranchOutput out;
  out.rpn = rpn_.forward(support.kernel, query.features);
  const auto& fs = query.features.shape();
  const auto anchors = anchors_for(fs[2], fs[3]);
  out.proposals = select_proposals(out.rpn.logits.value(), out.rpn.deltas.value(), anchors, cfg_.rpn.pre_nms_k,
                                   post_nms_k, cfg_.rpn.nms_threshold, query.width, query.height);
  out.boxes.reserve(out.proposals.size() + extra_boxes.size());
  for (const auto& p : out.proposals) out.boxes.push_back(p.box);
  for (const auto& b : extra_boxes) out.boxes.push_back(b);
  if (out.boxes.empty()) return out;

  std::vector<ag::RoiBox> rois;
  rois.reserve(out.boxes.size());
  for (const auto& b : out.boxes) rois.push_back({b.x1, b.y1, b.x2, b.y2});
  const ag::Var fm = ag::reshape(query.features, {fs[1], fs[2], fs[3]});
  const ag::Var regions = ag::roi_align(fm, rois, 1.0 / backbone_.stride(), kRegionSize, cfg_.roi_sampling);
  out.heads = relation_.forward(regions, support.feature);
  return out;
}

DetectOutput FewShotModel::detect(const QueryEncoding& query, const SupportEncoding& support,
                                  const DetectOptions& opts) const {
  ag::NoGradGuard guard;
  DetectOutput result;
  const BranchOutput branch = run_branch(query, support, opts.proposals);
  const double inv = 1.0 / query.scale;
  const double ow = query.original_width, oh = query.original_height;
  for (const auto& p : branch.proposals) {
    result.proposals.push_back({p.box.scaled(inv).clipped(ow, oh), p.objectness, support.category, query.image_id});
  }
  if (branch.boxes.empty()) return result;

  const Tensor& fused = branch.heads.fused.value();
  const Tensor& deltas = branch.heads.box_deltas.value();
  std::vector<DetectionResult> cands;
  cands.reserve(branch.boxes.size());
  for (std::size_t i = 0; i < branch.boxes.size(); ++i) {
    const BoxDeltas d{deltas[i * 4], deltas[i * 4 + 1], deltas[i * 4 + 2], deltas[i * 4 + 3]};
    const Box refined = decode_box(branch.boxes[i], d).clipped(query.width, query.height);
    if (!(refined.area() > 0.0)) continue;
    cands.push_back({refined, ag::sigmoid(fused[i]), support.category, query.image_id});
  }

  std::vector<DetectionResult> kept;
  if (opts.soft_nms) {
    kept = soft_nms(cands, opts.soft);
    std::stable_sort(kept.begin(), kept.end(),
                     [](const DetectionResult& a, const DetectionResult& b) { return a.score > b.score; });
  } else {
    for (int i : nms(cands, opts.nms_threshold)) kept.push_back(cands[static_cast<std::size_t>(i)]);
  }
  for (auto& d : kept) {
    if (d.score < opts.score_threshold) continue;
    if (static_cast<int>(result.detections.size()) >= opts.max_detections) break;
    d.box = d.box.scaled(inv).clipped(ow, oh);
    result.detections.push_back(std::move(d));
  }
  return result;
}

}  // namespace fsdet

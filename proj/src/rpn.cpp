#include "fsdet/rpn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fsdet {

void AnchorConfig::validate() const {
  if (scales.empty() || aspect_ratios.empty()) throw std::invalid_argument("anchor scales/ratios must be non-empty");
  for (double s : scales)
    if (!(s > 0.0)) throw std::invalid_argument("anchor scales must be positive");
  for (double r : aspect_ratios)
    if (!(r > 0.0)) throw std::invalid_argument("anchor aspect ratios must be positive");
  if (stride < 1) throw std::invalid_argument("anchor stride must be >= 1");
}

std::vector<Box> generate_anchors(const AnchorConfig& cfg, int fm_height, int fm_width) {
  cfg.validate();
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(fm_height) * fm_width * cfg.anchors_per_cell());
  for (int h = 0; h < fm_height; ++h)
    for (int w = 0; w < fm_width; ++w) {
      const double cx = (w + 0.5) * cfg.stride;
      const double cy = (h + 0.5) * cfg.stride;
      for (double s : cfg.scales)
        for (double r : cfg.aspect_ratios) {
          const double bw = s * std::sqrt(r);
          const double bh = s / std::sqrt(r);
          anchors.push_back({cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh});
        }
    }
  return anchors;
}

BoxDeltas encode_box(const Box& anchor, const Box& target) {
  const double wa = anchor.width(), ha = anchor.height();
  if (!(wa > 0.0) || !(ha > 0.0)) throw std::invalid_argument("encode_box: anchor must have positive size");
  const double w = target.width(), h = target.height();
  if (!(w > 0.0) || !(h > 0.0)) throw std::invalid_argument("encode_box: target must have positive size");
  return {(target.center_x() - anchor.center_x()) / wa, (target.center_y() - anchor.center_y()) / ha,
          std::log(w / wa), std::log(h / ha)};
}

Box decode_box(const Box& anchor, const BoxDeltas& d) {
  const double wa = anchor.width(), ha = anchor.height();
  if (!(wa > 0.0) || !(ha > 0.0)) throw std::invalid_argument("decode_box: anchor must have positive size");
  const double cx = anchor.center_x() + d[0] * wa;
  const double cy = anchor.center_y() + d[1] * ha;
  const double w = wa * std::exp(std::min(d[2], kMaxLogScale));
  const double h = ha * std::exp(std::min(d[3], kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<BoxDeltas> encode_boxes(std::span<const Box> anchors, std::span<const Box> targets) {
  if (anchors.size() != targets.size()) throw std::invalid_argument("encode_boxes: length mismatch");
  std::vector<BoxDeltas> out;
  out.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) out.push_back(encode_box(anchors[i], targets[i]));
  return out;
}

std::vector<Box> decode_boxes(std::span<const Box> anchors, std::span<const BoxDeltas> deltas,
                              double image_width, double image_height) {
  if (anchors.size() != deltas.size()) throw std::invalid_argument("decode_boxes: length mismatch");
  std::vector<Box> out;
  out.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    out.push_back(decode_box(anchors[i], deltas[i]).clipped(image_width, image_height));
  }
  return out;
}

RpnTargets assign_rpn_targets(std::span<const Box> anchors, std::span<const Box> gt_boxes,
                              const RpnConfig& cfg, Rng& rng) {
  const std::size_t M = anchors.size();
  RpnTargets t;
  t.labels.assign(M, AnchorLabel::kIgnore);
  t.deltas.assign(M, BoxDeltas{0, 0, 0, 0});
  t.sampled.assign(M, 0);

  std::vector<double> best_iou(M, 0.0);
  std::vector<int> best_gt(M, -1);
  std::vector<double> gt_best(gt_boxes.size(), 0.0);
  std::vector<double> overlaps(M * gt_boxes.size(), 0.0);
  for (std::size_t a = 0; a < M; ++a)
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double o = iou(anchors[a], gt_boxes[g]);
      overlaps[a * gt_boxes.size() + g] = o;
      if (o > best_iou[a]) {
        best_iou[a] = o;
        best_gt[a] = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], o);
    }

  for (std::size_t a = 0; a < M; ++a) {
    if (best_iou[a] <= cfg.negative_iou) t.labels[a] = AnchorLabel::kNegative;
    if (best_iou[a] >= cfg.positive_iou) t.labels[a] = AnchorLabel::kPositive;
  }
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    if (gt_best[g] <= 0.0) continue;
    for (std::size_t a = 0; a < M; ++a) {
      if (overlaps[a * gt_boxes.size() + g] == gt_best[g]) t.labels[a] = AnchorLabel::kPositive;
    }
  }

  std::vector<int> pos, neg;
  for (std::size_t a = 0; a < M; ++a) {
    if (t.labels[a] == AnchorLabel::kPositive) pos.push_back(static_cast<int>(a));
    if (t.labels[a] == AnchorLabel::kNegative) neg.push_back(static_cast<int>(a));
  }
  const auto max_pos = static_cast<std::size_t>(std::lround(cfg.batch_anchors * cfg.positive_fraction));
  if (pos.size() > max_pos) {
    std::shuffle(pos.begin(), pos.end(), rng);
    pos.resize(max_pos);
  }
  const std::size_t max_neg = static_cast<std::size_t>(cfg.batch_anchors) - pos.size();
  if (neg.size() > max_neg) {
    std::shuffle(neg.begin(), neg.end(), rng);
    neg.resize(max_neg);
  }
  for (int a : pos) {
    t.sampled[a] = 1;
    t.deltas[a] = encode_box(anchors[a], gt_boxes[best_gt[a]]);
  }
  for (int a : neg) t.sampled[a] = 1;
  t.num_positive = static_cast<int>(pos.size());
  t.num_negative = static_cast<int>(neg.size());
  return t;
}

SupportKernel build_support_kernel(const FeatureMap& support) {
  const Tensor pooled = global_average_pool(support);
  return {pooled.reshaped({support.channels(), 1, 1})};
}

AttentionRpn::AttentionRpn(const RpnConfig& cfg, int in_channels, int anchors_per_cell, ParamStore& store,
                           Rng& rng)
    : cfg_(cfg), anchors_(anchors_per_cell) {
  const int mid = cfg_.conv_channels > 0 ? cfg_.conv_channels : in_channels;
  conv_w_ = store.add("rpn.conv.weight", he_normal({mid, in_channels, 3, 3}, in_channels * 9, rng));
  conv_b_ = store.add("rpn.conv.bias", Tensor({mid}));
  cls_w_ = store.add("rpn.cls.weight", he_normal({anchors_, mid, 1, 1}, mid, rng, 0.1));
  cls_b_ = store.add("rpn.cls.bias", Tensor({anchors_}));
  reg_w_ = store.add("rpn.reg.weight", he_normal({4 * anchors_, mid, 1, 1}, mid, rng, 0.1));
  reg_b_ = store.add("rpn.reg.bias", Tensor({4 * anchors_}));
}

RpnOutput AttentionRpn::heads(const ag::Var& attention) const {
  const auto& s = attention.shape();
  ag::Var hidden = ag::relu(ag::conv2d(attention, conv_w_, conv_b_, 1, 1));
  ag::Var logits = ag::reshape(ag::conv2d(hidden, cls_w_, cls_b_, 1, 0), {anchors_, s[2], s[3]});
  ag::Var deltas = ag::reshape(ag::conv2d(hidden, reg_w_, reg_b_, 1, 0), {4 * anchors_, s[2], s[3]});
  return {attention, logits, deltas};
}

RpnOutput AttentionRpn::forward(const ag::Var& kernel, const ag::Var& query) const {
  const auto& q = query.shape();
  if (q.size() != 4 || q[0] != 1) throw ShapeError("attention RPN expects a [1,C,H,W] query map");
  if (kernel.shape().size() != 4 || kernel.shape()[1] != q[1]) {
    throw ShapeError("attention RPN kernel/query channel mismatch");
  }
  if (cfg_.attention) return heads(ag::depthwise_xcorr(kernel, query));
  const ag::Var ones(Tensor(kernel.shape(), 1.0));
  return heads(ag::depthwise_xcorr(ones, query));
}

RpnMaps attention_forward(const SupportKernel& kernel, const FeatureMap& query, const AttentionRpn& rpn) {
  query.validate();
  if (kernel.channels() != query.channels()) throw ShapeError("attention_forward: channel mismatch");
  if (kernel.size() != 1) throw ShapeError("attention_forward: kernel must be 1x1");
  ag::NoGradGuard guard;
  const int C = query.channels();
  const auto out = rpn.forward(ag::Var(kernel.data.reshaped({1, C, 1, 1})),
                               ag::Var(query.data.reshaped({1, C, query.height(), query.width()})));
  return {out.logits.value(), out.deltas.value()};
}

ag::Var anchor_logits(const ag::Var& logits_map) {
  const auto& s = logits_map.shape();
  return ag::reshape(ag::chw_to_hwc(logits_map), {s[0] * s[1] * s[2]});
}

ag::Var anchor_deltas(const ag::Var& deltas_map) {
  const auto& s = deltas_map.shape();
  return ag::reshape(ag::chw_to_hwc(deltas_map), {s[0] / 4 * s[1] * s[2], 4});
}

std::vector<Proposal> select_proposals(const Tensor& logits_map, const Tensor& deltas_map,
                                       std::span<const Box> anchors, int pre_nms_k, int post_nms_k,
                                       double nms_threshold, double image_width, double image_height) {
  const int A = logits_map.dim(0), H = logits_map.dim(1), W = logits_map.dim(2);
  const std::size_t M = static_cast<std::size_t>(A) * H * W;
  if (anchors.size() != M || deltas_map.size() != 4 * M) {
    throw ShapeError("select_proposals: maps and anchors disagree");
  }
  std::vector<double> score(M);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w)
      for (int a = 0; a < A; ++a) {
        score[(static_cast<std::size_t>(h) * W + w) * A + a] = ag::sigmoid(logits_map.at(a, h, w));
      }
  std::vector<int> order(M);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return score[x] > score[y]; });
  if (pre_nms_k > 0 && order.size() > static_cast<std::size_t>(pre_nms_k)) order.resize(pre_nms_k);

  std::vector<DetectionResult> cands;
  cands.reserve(order.size());
  for (int idx : order) {
    const int cell = idx / A, a = idx % A;
    const int h = cell / W, w = cell % W;
    const BoxDeltas d{deltas_map.at(4 * a, h, w), deltas_map.at(4 * a + 1, h, w), deltas_map.at(4 * a + 2, h, w),
                      deltas_map.at(4 * a + 3, h, w)};
    const Box b = decode_box(anchors[idx], d).clipped(image_width, image_height);
    if (!(b.width() > 0.0) || !(b.height() > 0.0)) continue;
    cands.push_back({b, score[idx], {}, {}});
  }
  const auto kept = nms(cands, nms_threshold);
  std::vector<Proposal> out;
  for (int k : kept) {
    if (static_cast<int>(out.size()) >= post_nms_k) break;
    out.push_back({cands[k].box, cands[k].score});
  }
  return out;
}

RpnLoss rpn_loss(const ag::Var& logits_map, const ag::Var& deltas_map, const RpnTargets& targets) {
  RpnLoss loss;
  const int sampled = targets.num_positive + targets.num_negative;
  if (sampled == 0) {
    loss.objectness = ag::Var(Tensor({1}));
    loss.regression = ag::Var(Tensor({1}));
    loss.empty_sample = true;
    return loss;
  }
  const std::size_t M = targets.labels.size();
  std::vector<double> labels(M), weights(M), reg_weights(M);
  Tensor reg_target({static_cast<int>(M), 4});
  for (std::size_t a = 0; a < M; ++a) {
    const bool pos = targets.labels[a] == AnchorLabel::kPositive;
    labels[a] = pos ? 1.0 : 0.0;
    weights[a] = targets.sampled[a] ? 1.0 : 0.0;
    reg_weights[a] = (pos && targets.sampled[a]) ? 1.0 : 0.0;
    for (int k = 0; k < 4; ++k) reg_target[a * 4 + k] = targets.deltas[a][static_cast<std::size_t>(k)];
  }
  loss.objectness = ag::bce_with_logits(anchor_logits(logits_map), labels, weights, sampled);
  if (targets.num_positive > 0) {
    loss.regression = ag::smooth_l1(anchor_deltas(deltas_map), reg_target, reg_weights, targets.num_positive);
  } else {
    loss.regression = ag::Var(Tensor({1}));
  }
  return loss;
}

}  // namespace fsdet

#include "fsdet/relation.hpp"

#include <stdexcept>

namespace fsdet {

MultiRelationDetector::MultiRelationDetector(const RelationConfig& cfg, ParamStore& store, Rng& rng)
    : cfg_(cfg) {
  const int C = cfg_.channels;
  const int hidden = cfg_.global_hidden > 0 ? cfg_.global_hidden : C;
  if (C < 1 || cfg_.patch_mid < 1 || cfg_.patch_out < 1) throw std::invalid_argument("relation widths must be >= 1");

  g_fc1_w_ = store.add("relation.global.fc1.weight", he_normal({hidden, 2 * C}, 2 * C, rng));
  g_fc1_b_ = store.add("relation.global.fc1.bias", Tensor({hidden}));
  g_fc2_w_ = store.add("relation.global.fc2.weight", he_normal({hidden, hidden}, hidden, rng));
  g_fc2_b_ = store.add("relation.global.fc2.bias", Tensor({hidden}));
  g_fc3_w_ = store.add("relation.global.fc3.weight", he_normal({1, hidden}, hidden, rng, 0.1));
  g_fc3_b_ = store.add("relation.global.fc3.bias", Tensor({1}));

  l_conv_w_ = store.add("relation.local.conv.weight", he_normal({C, C, 1, 1}, C, rng, 0.5));
  l_conv_b_ = store.add("relation.local.conv.bias", Tensor({C}));
  l_fc_w_ = store.add("relation.local.fc.weight", he_normal({1, C}, C, rng, 0.1));
  l_fc_b_ = store.add("relation.local.fc.bias", Tensor({1}));

  const int mid = cfg_.patch_mid, out = cfg_.patch_out;
  p_conv1_w_ = store.add("relation.patch.conv1.weight", he_normal({mid, 2 * C, 1, 1}, 2 * C, rng));
  p_conv1_b_ = store.add("relation.patch.conv1.bias", Tensor({mid}));
  p_conv2_w_ = store.add("relation.patch.conv2.weight", he_normal({mid, mid, 3, 3}, mid * 9, rng));
  p_conv2_b_ = store.add("relation.patch.conv2.bias", Tensor({mid}));
  p_conv3_w_ = store.add("relation.patch.conv3.weight", he_normal({out, mid, 1, 1}, mid, rng));
  p_conv3_b_ = store.add("relation.patch.conv3.bias", Tensor({out}));
  p_cls_w_ = store.add("relation.patch.cls.weight", he_normal({1, out}, out, rng, 0.1));
  p_cls_b_ = store.add("relation.patch.cls.bias", Tensor({1}));
  p_reg_w_ = store.add("relation.patch.reg.weight", he_normal({4, out}, out, rng, 0.1));
  p_reg_b_ = store.add("relation.patch.reg.bias", Tensor({4}));
}

void MultiRelationDetector::check_inputs(const ag::Var& query, const ag::Var& support) const {
  const auto& q = query.shape();
  const auto& s = support.shape();
  if (q.size() != 4 || s.size() != 4 || s[0] != 1 || q[1] != cfg_.channels || s[1] != cfg_.channels ||
      q[2] != kRegionSize || q[3] != kRegionSize || s[2] != kRegionSize || s[3] != kRegionSize) {
    throw ShapeError("relation heads expect query [P,C,7,7] and support [1,C,7,7] with C=" +
                     std::to_string(cfg_.channels));
  }
}

ag::Var MultiRelationDetector::global_relation(const ag::Var& query, const ag::Var& support) const {
  check_inputs(query, support);
  const int P = query.shape()[0];
  // Pooling is per channel, so pooling before the concat is identical and
  // pools the shared support only once.
  const int C = cfg_.channels;
  ag::Var pooled = ag::reshape(ag::concat_channels(ag::reshape(ag::global_avg_pool(query), {P, C, 1, 1}),
                                                   ag::reshape(ag::global_avg_pool(support), {1, C, 1, 1})),
                               {P, 2 * C});
  ag::Var h = ag::relu(ag::linear(pooled, g_fc1_w_, g_fc1_b_));
  h = ag::relu(ag::linear(h, g_fc2_w_, g_fc2_b_));
  return ag::reshape(ag::linear(h, g_fc3_w_, g_fc3_b_), {P});
}

ag::Var MultiRelationDetector::local_relation(const ag::Var& query, const ag::Var& support) const {
  check_inputs(query, support);
  const int P = query.shape()[0];
  ag::Var q = ag::conv2d(query, l_conv_w_, l_conv_b_, 1, 0);
  ag::Var s = ag::conv2d(support, l_conv_w_, l_conv_b_, 1, 0);
  // S = H = W = 7: a single valid position per channel.
  ag::Var corr = ag::reshape(ag::depthwise_xcorr(s, q), {P, cfg_.channels});
  return ag::reshape(ag::linear(corr, l_fc_w_, l_fc_b_), {P});
}

std::pair<ag::Var, ag::Var> MultiRelationDetector::patch_relation(const ag::Var& query, const ag::Var& support,
                                                                  PatchTrace* trace) const {
  check_inputs(query, support);
  const int P = query.shape()[0];
  auto record = [trace](const ag::Var& v) {
    if (trace) trace->spatial.push_back(v.shape()[2]);
  };
  record(query);
  // Same reasoning as the global head: pool each side, then concatenate.
  ag::Var x = ag::concat_channels(ag::avg_pool2d(query, 3), ag::avg_pool2d(support, 3));
  record(x);
  x = ag::relu(ag::conv2d(x, p_conv1_w_, p_conv1_b_, 1, 0));
  record(x);
  x = ag::relu(ag::conv2d(x, p_conv2_w_, p_conv2_b_, 1, 0));
  record(x);
  x = ag::relu(ag::conv2d(x, p_conv3_w_, p_conv3_b_, 1, 0));
  record(x);
  x = ag::avg_pool2d(x, 3);
  record(x);
  ag::Var flat = ag::reshape(x, {P, cfg_.patch_out});
  return {ag::reshape(ag::linear(flat, p_cls_w_, p_cls_b_), {P}), ag::linear(flat, p_reg_w_, p_reg_b_)};
}

MultiRelationDetector::Output MultiRelationDetector::forward(const ag::Var& query, const ag::Var& support) const {
  check_inputs(query, support);
  const int P = query.shape()[0];
  Output out;
  out.global = cfg_.heads.global ? global_relation(query, support) : ag::Var(Tensor({P}));
  out.local = cfg_.heads.local ? local_relation(query, support) : ag::Var(Tensor({P}));
  if (cfg_.heads.patch) {
    auto [logit, deltas] = patch_relation(query, support);
    out.patch = logit;
    out.box_deltas = deltas;
  } else {
    out.patch = ag::Var(Tensor({P}));
    out.box_deltas = ag::Var(Tensor({P, 4}));
  }
  out.fused = ag::add(ag::add(out.global, out.local), out.patch);
  return out;
}

RelationScores score_pair(const MultiRelationDetector& det, const RegionFeature& query,
                          const RegionFeature& support) {
  ag::NoGradGuard guard;
  const int C = det.config().channels;
  const ag::Var q(query.data.reshaped({1, C, kRegionSize, kRegionSize}));
  const ag::Var s(support.data.reshaped({1, C, kRegionSize, kRegionSize}));
  const auto out = det.forward(q, s);
  RelationScores r;
  r.global_logit = out.global.value()[0];
  r.local_logit = out.local.value()[0];
  r.patch_logit = out.patch.value()[0];
  r.fused_logit = fuse_relation_scores(r.global_logit, r.local_logit, r.patch_logit);
  for (int k = 0; k < 4; ++k) r.patch_box_deltas[static_cast<std::size_t>(k)] = out.box_deltas.value()[k];
  return r;
}

double fuse_relation_scores(double global_logit, double local_logit, double patch_logit) noexcept {
  return (global_logit + local_logit) + patch_logit;
}

ag::Var matching_loss(const ag::Var& fused_logits, std::span<const double> labels, std::span<const int> selected) {
  if (selected.empty()) throw std::invalid_argument("matching_loss: empty pair selection");
  const std::size_t P = fused_logits.value().size();
  if (labels.size() != P) throw ShapeError("matching_loss: label count mismatch");
  std::vector<double> weights(P, 0.0);
  for (int i : selected) {
    if (i < 0 || static_cast<std::size_t>(i) >= P) throw std::out_of_range("matching_loss: bad pair index");
    weights[static_cast<std::size_t>(i)] += 1.0;
  }
  return ag::bce_with_logits(fused_logits, labels, weights, static_cast<double>(selected.size()));
}

BoxLoss detector_box_loss(const ag::Var& deltas, const Tensor& targets, std::span<const char> foreground) {
  const auto& s = deltas.shape();
  if (s.size() != 2 || s[1] != 4 || foreground.size() != static_cast<std::size_t>(s[0])) {
    throw ShapeError("detector_box_loss: expects deltas [P,4] and one flag per row");
  }
  std::vector<double> weights(foreground.size());
  int count = 0;
  for (std::size_t i = 0; i < foreground.size(); ++i) {
    weights[i] = foreground[i] ? 1.0 : 0.0;
    count += foreground[i] ? 1 : 0;
  }
  if (count == 0) return {ag::Var(Tensor({1})), true};
  return {ag::smooth_l1(deltas, targets, weights, count), false};
}

}  // namespace fsdet

#include <gtest/gtest.h>

#include <cmath>

#include "fsdet/rpn.hpp"
#include "test_util.hpp"

using namespace fsdet;
using namespace fsdet::testing;

namespace {

AnchorConfig small_anchors() {
  AnchorConfig a;
  a.scales = {16, 32};
  a.aspect_ratios = {0.5, 1.0, 2.0};
  a.stride = 8;
  return a;
}

}  // namespace

TEST(Anchors, CountCentresAndShapes) {
  const auto cfg = small_anchors();
  const auto anchors = generate_anchors(cfg, 3, 4);
  ASSERT_EQ(anchors.size(), 3u * 4u * 6u);
  // Cell (h=1, w=2), scale 32, ratio 2.
  const Box& a = anchors[(1 * 4 + 2) * 6 + 1 * 3 + 2];
  EXPECT_DOUBLE_EQ(a.center_x(), 20.0);
  EXPECT_DOUBLE_EQ(a.center_y(), 12.0);
  EXPECT_NEAR(a.width() / a.height(), 2.0, 1e-12);
  EXPECT_NEAR(a.area(), 32.0 * 32.0, 1e-9);
}

TEST(Anchors, InvalidConfigThrows) {
  AnchorConfig cfg;
  cfg.scales = {};
  EXPECT_THROW(generate_anchors(cfg, 2, 2), std::invalid_argument);
  cfg = {};
  cfg.aspect_ratios = {-1.0};
  EXPECT_THROW(generate_anchors(cfg, 2, 2), std::invalid_argument);
}

TEST(BoxCoding, EncodeMatchesDefinition) {
  const Box anchor{0, 0, 10, 20}, target{5, 5, 25, 25};
  const auto d = encode_box(anchor, target);
  EXPECT_NEAR(d[0], (15.0 - 5.0) / 10.0, 1e-12);
  EXPECT_NEAR(d[1], (15.0 - 10.0) / 20.0, 1e-12);
  EXPECT_NEAR(d[2], std::log(2.0), 1e-12);
  EXPECT_NEAR(d[3], std::log(1.0), 1e-12);
}

TEST(BoxCoding, DecodeInvertsEncode) {
  Rng rng(1);
  for (int t = 0; t < 500; ++t) {
    const Box anchor = random_box(rng, 100, 100, 2), target = random_box(rng, 100, 100, 2);
    const Box back = decode_box(anchor, encode_box(anchor, target));
    EXPECT_NEAR(back.x1, target.x1, 1e-9);
    EXPECT_NEAR(back.y1, target.y1, 1e-9);
    EXPECT_NEAR(back.x2, target.x2, 1e-9);
    EXPECT_NEAR(back.y2, target.y2, 1e-9);
  }
}

TEST(BoxCoding, EncodeInvertsDecode) {
  Rng rng(2);
  for (int t = 0; t < 500; ++t) {
    const Box anchor = random_box(rng, 100, 100, 2);
    const BoxDeltas d{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -2, 2), uniform(rng, -2, 2)};
    const auto back = encode_box(anchor, decode_box(anchor, d));
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(back[k], d[k], 1e-9);
  }
}

TEST(BoxCoding, DecodedBoxesAreClippedAndScalesClamped) {
  const std::vector<Box> anchors{{90, 90, 110, 110}};
  const std::vector<BoxDeltas> deltas{{0, 0, 50, 50}};
  const auto out = decode_boxes(anchors, deltas, 100, 100);
  EXPECT_LE(out[0].x2, 100.0);
  EXPECT_GE(out[0].x1, 0.0);
  EXPECT_TRUE(std::isfinite(decode_box(anchors[0], deltas[0]).x2));
}

TEST(BoxCoding, DegenerateBoxesAreRejected) {
  EXPECT_THROW(encode_box({0, 0, 0, 5}, {0, 0, 5, 5}), std::invalid_argument);
  EXPECT_THROW(encode_box({0, 0, 5, 5}, {1, 1, 1, 5}), std::invalid_argument);
}

TEST(RpnTargets, LabelsFollowIouThresholds) {
  RpnConfig cfg;
  cfg.batch_anchors = 1000;
  Rng rng(3);
  const std::vector<Box> anchors{{0, 0, 10, 10}, {1, 0, 11, 10}, {5, 0, 15, 10}, {50, 50, 60, 60}};
  const std::vector<Box> gt{{0, 0, 10, 10}};
  const auto t = assign_rpn_targets(anchors, gt, cfg, rng);
  EXPECT_EQ(t.labels[0], AnchorLabel::kPositive);  // IoU 1
  EXPECT_EQ(t.labels[1], AnchorLabel::kPositive);  // IoU 0.818
  EXPECT_EQ(t.labels[2], AnchorLabel::kIgnore);    // IoU 1/3
  EXPECT_EQ(t.labels[3], AnchorLabel::kNegative);
  EXPECT_EQ(t.num_positive, 2);
  EXPECT_EQ(t.num_negative, 1);
  const auto d = encode_box(anchors[1], gt[0]);
  for (int k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(t.deltas[1][k], d[k]);
}

TEST(RpnTargets, BestAnchorOfEachGroundTruthIsPositive) {
  RpnConfig cfg;
  Rng rng(4);
  const std::vector<Box> anchors{{0, 0, 10, 10}, {40, 40, 50, 50}};
  const std::vector<Box> gt{{4, 4, 14, 14}};  // IoU 0.22 with the first anchor only
  const auto t = assign_rpn_targets(anchors, gt, cfg, rng);
  EXPECT_EQ(t.labels[0], AnchorLabel::kPositive);
  EXPECT_EQ(t.labels[1], AnchorLabel::kNegative);
}

TEST(RpnTargets, SamplingRespectsBatchAndFraction) {
  RpnConfig cfg;
  cfg.batch_anchors = 32;
  cfg.positive_fraction = 0.25;
  AnchorConfig ac = small_anchors();
  const auto anchors = generate_anchors(ac, 12, 12);
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    std::vector<Box> gt;
    for (int g = 0; g < uniform_int(rng, 0, 6); ++g) gt.push_back(random_box(rng, 96, 96, 12));
    const auto tg = assign_rpn_targets(anchors, gt, cfg, rng);
    EXPECT_LE(tg.num_positive, 8);
    EXPECT_LE(tg.num_positive + tg.num_negative, 32);
    int sampled = 0;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      if (!tg.sampled[a]) continue;
      ++sampled;
      EXPECT_NE(tg.labels[a], AnchorLabel::kIgnore);
    }
    EXPECT_EQ(sampled, tg.num_positive + tg.num_negative);
    if (gt.empty()) EXPECT_EQ(tg.num_positive, 0);
  }
}

TEST(AttentionRpn, ForwardEqualsHeadsOnCorrelatedMap) {
  ParamStore store;
  Rng rng(6);
  const AttentionRpn rpn(RpnConfig{}, 4, 3, store, rng);
  const SupportKernel k{random_tensor({4, 1, 1}, rng)};
  const FeatureMap q{random_tensor({4, 5, 6}, rng), 8, ""};
  const RpnMaps maps = attention_forward(k, q, rpn);
  EXPECT_EQ(maps.logits.shape(), (std::vector<int>{3, 5, 6}));
  EXPECT_EQ(maps.deltas.shape(), (std::vector<int>{12, 5, 6}));
  const Tensor corr = xcorr_oracle(k.data, q.data);
  const RpnOutput ref = rpn.heads(ag::Var(corr.reshaped({1, 4, 5, 6})));
  for (std::size_t i = 0; i < maps.logits.size(); ++i) EXPECT_NEAR(maps.logits[i], ref.logits.value()[i], 1e-12);
  for (std::size_t i = 0; i < maps.deltas.size(); ++i) EXPECT_NEAR(maps.deltas[i], ref.deltas.value()[i], 1e-12);
}

TEST(AttentionRpn, RegularModeIgnoresTheSupport) {
  ParamStore store;
  Rng rng(7);
  RpnConfig cfg;
  cfg.attention = false;
  const AttentionRpn rpn(cfg, 4, 2, store, rng);
  const FeatureMap q{random_tensor({4, 5, 5}, rng), 8, ""};
  const RpnMaps a = attention_forward({random_tensor({4, 1, 1}, rng)}, q, rpn);
  const RpnMaps b = attention_forward({random_tensor({4, 1, 1}, rng)}, q, rpn);
  EXPECT_EQ(a.logits.storage(), b.logits.storage());
}

TEST(AttentionRpn, KernelMustBeOneByOne) {
  ParamStore store;
  Rng rng(8);
  const AttentionRpn rpn(RpnConfig{}, 2, 1, store, rng);
  EXPECT_THROW(attention_forward({Tensor({2, 2, 2})}, {Tensor({2, 5, 5}), 8, ""}, rpn), ShapeError);
}

TEST(AttentionRpn, SupportKernelIsSpatialMean) {
  Tensor s({2, 2, 2}, std::vector<double>{1, 2, 3, 4, 0, 0, 0, 8});
  const SupportKernel k = build_support_kernel({s, 8, ""});
  EXPECT_EQ(k.size(), 1);
  EXPECT_DOUBLE_EQ(k.data[0], 2.5);
  EXPECT_DOUBLE_EQ(k.data[1], 2.0);
}

TEST(Proposals, SortedBoundedAndSuppressed) {
  Rng rng(9);
  const auto ac = small_anchors();
  const auto anchors = generate_anchors(ac, 6, 6);
  for (int t = 0; t < 20; ++t) {
    const Tensor logits = random_tensor({6, 6, 6}, rng, -3, 3);
    const Tensor deltas = random_tensor({24, 6, 6}, rng, -0.3, 0.3);
    const auto props = select_proposals(logits, deltas, anchors, 100, 20, 0.7, 48, 48);
    EXPECT_LE(props.size(), 20u);
    for (std::size_t i = 0; i < props.size(); ++i) {
      EXPECT_GE(props[i].box.x1, 0.0);
      EXPECT_LE(props[i].box.x2, 48.0);
      EXPECT_GT(props[i].box.width(), 0.0);
      if (i > 0) EXPECT_LE(props[i].objectness, props[i - 1].objectness);
      for (std::size_t j = 0; j < i; ++j) EXPECT_LE(iou(props[i].box, props[j].box), 0.7);
    }
  }
}

TEST(Proposals, TopScoreComesFirst) {
  const AnchorConfig ac = small_anchors();
  const auto anchors = generate_anchors(ac, 2, 2);
  Tensor logits({6, 2, 2}, -5.0);
  logits.at(4, 1, 0) = 5.0;
  const auto props = select_proposals(logits, Tensor({24, 2, 2}), anchors, 10, 5, 0.7, 16, 16);
  ASSERT_FALSE(props.empty());
  EXPECT_EQ(props[0].box, anchors[(1 * 2 + 0) * 6 + 4].clipped(16, 16));
  EXPECT_NEAR(props[0].objectness, 1.0 / (1.0 + std::exp(-5.0)), 1e-12);
}

TEST(RpnLoss, MatchesDirectComputation) {
  Rng rng(10);
  const AnchorConfig ac = small_anchors();
  const auto anchors = generate_anchors(ac, 4, 4);
  RpnConfig cfg;
  cfg.batch_anchors = 40;
  const std::vector<Box> gt{{4, 4, 20, 20}, {10, 12, 30, 28}};
  const auto targets = assign_rpn_targets(anchors, gt, cfg, rng);
  const Tensor logits = random_tensor({6, 4, 4}, rng), deltas = random_tensor({24, 4, 4}, rng);
  const RpnLoss loss = rpn_loss(ag::Var(logits), ag::Var(deltas), targets);

  double bce = 0.0, reg = 0.0;
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 4; ++w)
      for (int a = 0; a < 6; ++a) {
        const std::size_t idx = (static_cast<std::size_t>(h) * 4 + w) * 6 + a;
        if (!targets.sampled[idx]) continue;
        const bool pos = targets.labels[idx] == AnchorLabel::kPositive;
        bce += ag::bce_value(logits.at(a, h, w), pos ? 1.0 : 0.0);
        if (pos)
          for (int k = 0; k < 4; ++k) reg += ag::smooth_l1_value(deltas.at(4 * a + k, h, w) - targets.deltas[idx][k]);
      }
  EXPECT_NEAR(loss.objectness.value()[0], bce / (targets.num_positive + targets.num_negative), 1e-12);
  EXPECT_NEAR(loss.regression.value()[0], reg / targets.num_positive, 1e-12);
}

TEST(RpnLoss, EmptySampleIsZeroAndFlagged) {
  RpnTargets t;
  t.labels.assign(6, AnchorLabel::kIgnore);
  t.deltas.assign(6, {0, 0, 0, 0});
  t.sampled.assign(6, 0);
  const RpnLoss l = rpn_loss(ag::Var(Tensor({6, 1, 1})), ag::Var(Tensor({24, 1, 1})), t);
  EXPECT_TRUE(l.empty_sample);
  EXPECT_EQ(l.objectness.value()[0], 0.0);
}

TEST(AttentionRpnGrad, ForwardWithRespectToKernelAndQuery) {
  ParamStore store;
  Rng rng(11);
  const AttentionRpn rpn(RpnConfig{}, 3, 2, store, rng);
  Rng wr(12);
  const Tensor w = random_tensor({1, 2 * 4 * 4 + 8 * 4 * 4}, wr);
  Rng ir(13);
  int checked = 0;
  for (int attempt = 0; attempt < 200 && checked < 5; ++attempt) {
    const std::vector<Tensor> in{random_tensor({1, 3, 1, 1}, ir), random_tensor({1, 3, 4, 4}, ir)};
    const auto r = grad_check(
        [&](const std::vector<ag::Var>& v) {
          const RpnOutput o = rpn.forward(v[0], v[1]);
          const int n = 2 * 16, m = 8 * 16;
          const ag::Var flat =
              ag::concat_channels(ag::reshape(o.logits, {1, n, 1, 1}), ag::reshape(o.deltas, {1, m, 1, 1}));
          return project_to_scalar(flat, w);
        },
        in);
    if (r.relu_margin < 1e-2) continue;
    EXPECT_LE(r.relative_error, 1e-4);
    ++checked;
  }
  EXPECT_EQ(checked, 5);
}

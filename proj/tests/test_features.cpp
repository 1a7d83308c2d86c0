#include <gtest/gtest.h>

#include "fsdet/features.hpp"
#include "test_util.hpp"

using namespace fsdet;
using namespace fsdet::testing;

namespace {

/// Bilinear read with the same border rules as the aligned region pooling.
double bilinear(const Tensor& map, int c, double y, double x) {
  const int h = map.dim(1), w = map.dim(2);
  if (y < -1.0 || y > h || x < -1.0 || x > w) return 0.0;
  y = std::clamp(y, 0.0, double(h - 1));
  x = std::clamp(x, 0.0, double(w - 1));
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double ly = y - y0, lx = x - x0;
  return (1 - ly) * (1 - lx) * map.at(c, y0, x0) + (1 - ly) * lx * map.at(c, y0, x1) +
         ly * (1 - lx) * map.at(c, y1, x0) + ly * lx * map.at(c, y1, x1);
}

/// Region pooling written from its definition: each of the 7x7 bins averages
/// ratio^2 evenly spaced bilinear samples, coordinates shifted by half a cell.
Tensor region_oracle(const Tensor& map, int stride, const Box& b, int ratio) {
  const int c = map.dim(0);
  Tensor out({c, 7, 7});
  const double s = 1.0 / stride;
  const double bw = (b.x2 - b.x1) * s / 7, bh = (b.y2 - b.y1) * s / 7;
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 7; ++j) {
        double acc = 0.0;
        for (int a = 0; a < ratio; ++a)
          for (int d = 0; d < ratio; ++d)
            acc += bilinear(map, ch, b.y1 * s - 0.5 + (i + (a + 0.5) / ratio) * bh,
                            b.x1 * s - 0.5 + (j + (d + 0.5) / ratio) * bw);
        out.at(ch, i, j) = acc / (ratio * ratio);
      }
  return out;
}

/// Direct convolution with zero padding.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0), k = w.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor out({n, co, ho, wo});
  for (int in = 0; in < n; ++in)
    for (int o = 0; o < co; ++o)
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx) {
          double acc = b[static_cast<std::size_t>(o)];
          for (int c = 0; c < ci; ++c)
            for (int i = 0; i < k; ++i)
              for (int j = 0; j < k; ++j) {
                const int sy = y * stride - pad + i, sx = xx * stride - pad + j;
                if (sy >= 0 && sy < h && sx >= 0 && sx < wd) acc += w.at(o, c, i, j) * x.at(in, c, sy, sx);
              }
          out.at(in, o, y, xx) = acc;
        }
  return out;
}

}  // namespace

TEST(CrossCorrelation, MatchesTripleLoopOracle) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const int c = uniform_int(rng, 1, 4), s = uniform_int(rng, 1, 7);
    const int h = uniform_int(rng, s, 9), w = uniform_int(rng, s, 9);
    const SupportKernel k{random_tensor({c, s, s}, rng)};
    const FeatureMap q{random_tensor({c, h, w}, rng), 8, "q"};
    const Tensor got = depthwise_cross_correlation(k, q).data;
    const Tensor want = xcorr_oracle(k.data, q.data);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(CrossCorrelation, OneByOneKernelScalesChannels) {
  const SupportKernel k{Tensor({2, 1, 1}, std::vector<double>{2.0, -1.0})};
  Rng rng(2);
  const FeatureMap q{random_tensor({2, 3, 3}, rng), 1, ""};
  const Tensor g = depthwise_cross_correlation(k, q).data;
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      EXPECT_DOUBLE_EQ(g.at(0, y, x), 2.0 * q.data.at(0, y, x));
      EXPECT_DOUBLE_EQ(g.at(1, y, x), -q.data.at(1, y, x));
    }
}

TEST(CrossCorrelation, ChannelsNeverMix) {
  Rng rng(3);
  const SupportKernel k{random_tensor({3, 2, 2}, rng)};
  FeatureMap q{random_tensor({3, 5, 5}, rng), 1, ""};
  const Tensor before = depthwise_cross_correlation(k, q).data;
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) q.data.at(2, y, x) += 10.0;
  const Tensor after = depthwise_cross_correlation(k, q).data;
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) EXPECT_EQ(before.at(c, y, x), after.at(c, y, x));
}

TEST(CrossCorrelation, RejectsKernelLargerThanMapOrChannelMismatch) {
  EXPECT_THROW(depthwise_cross_correlation({Tensor({1, 4, 4})}, {Tensor({1, 3, 3}), 1, ""}), ShapeError);
  EXPECT_THROW(depthwise_cross_correlation({Tensor({2, 1, 1})}, {Tensor({3, 3, 3}), 1, ""}), ShapeError);
}

TEST(GlobalAveragePool, PerChannelMean) {
  Tensor t({2, 2, 2}, std::vector<double>{1, 2, 3, 4, -1, -1, -1, 3});
  const Tensor g = global_average_pool({t, 1, ""});
  EXPECT_DOUBLE_EQ(g[0], 2.5);
  EXPECT_DOUBLE_EQ(g[1], 0.0);
}

TEST(RegionFeature, AlignedBoxWithUnitSamplingReadsCellsExactly) {
  Rng rng(4);
  const FeatureMap fm{random_tensor({3, 12, 12}, rng), 8, ""};
  const int a = 2, b = 4;  // top-left cell (x, y)
  const Box box{a * 8.0, b * 8.0, (a + 7) * 8.0, (b + 7) * 8.0};
  const RegionFeature r = extract_region_feature(fm, box, 96, 96, 1);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 7; ++j) EXPECT_NEAR(r.data.at(c, i, j), fm.data.at(c, b + i, a + j), 1e-12);
}

TEST(RegionFeature, MatchesBilinearOracle) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const FeatureMap fm{random_tensor({2, 9, 11}, rng), 8, ""};
    const Box box = random_box(rng, 88, 72, 4);
    const int ratio = uniform_int(rng, 1, 3);
    const Tensor got = extract_region_feature(fm, box, 88, 72, ratio).data;
    const Tensor want = region_oracle(fm.data, 8, box, ratio);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(RegionFeature, ConstantMapGivesConstantFeature) {
  const FeatureMap fm{Tensor({1, 6, 6}, 0.7), 4, ""};
  const RegionFeature r = extract_region_feature(fm, {1.3, 2.2, 17.9, 20.1}, 24, 24);
  for (double v : r.data.values()) EXPECT_NEAR(v, 0.7, 1e-12);
}

TEST(RegionFeature, BoxOutsideImageThrows) {
  const FeatureMap fm{Tensor({1, 6, 6}), 4, ""};
  EXPECT_THROW(extract_region_feature(fm, {30, 30, 40, 40}, 24, 24), ShapeError);
  EXPECT_THROW(extract_region_feature(fm, {5, 5, 2, 9}, 24, 24), ShapeError);
}

TEST(KShotFusion, MeanOfSupports) {
  const std::vector<Tensor> fs = {Tensor({2}, 1.0), Tensor({2}, 3.0)};
  const Tensor m = fuse_k_shot_features(fs);
  EXPECT_EQ(m[0], 2.0);
  EXPECT_THROW(fuse_k_shot_features({}), ShapeError);
  const std::vector<Tensor> single = {Tensor({2}, 5.0)};
  EXPECT_EQ(fuse_k_shot_features(single).storage(), single[0].storage());
}

TEST(Conv2d, MatchesDirectLoops) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const int stride = uniform_int(rng, 1, 2), pad = uniform_int(rng, 0, 1);
    const Tensor x = random_tensor({1, 3, uniform_int(rng, 3, 9), uniform_int(rng, 3, 9)}, rng);
    const Tensor w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    const Tensor got = ag::conv2d(ag::Var(x), ag::Var(w), ag::Var(b), stride, pad).value();
    const Tensor want = conv_oracle(x, w, b, stride, pad);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10);
  }
}

TEST(Backbone, OutputShapeFollowsStrides) {
  ParamStore store;
  Rng rng(7);
  const Backbone bb(BackboneConfig{}, store, rng);
  EXPECT_EQ(bb.stride(), 8);
  Rng ir(8);
  const FeatureMap fm = extract_features(Image(random_tensor({3, 96, 80}, ir, 0, 1)), bb);
  EXPECT_EQ(fm.channels(), 64);
  EXPECT_EQ(fm.height(), 12);
  EXPECT_EQ(fm.width(), 10);
  EXPECT_EQ(fm.stride, 8);
}

TEST(Backbone, FrozenBlockGetsNoGradient) {
  ParamStore store;
  Rng rng(9);
  const Backbone bb(BackboneConfig{}, store, rng);
  Rng ir(10);
  ag::backward(ag::sum_all(bb.forward(image_var(Image(random_tensor({3, 32, 32}, ir, 0, 1))))));
  EXPECT_TRUE(store.get("backbone.block1.weight").grad().empty());
  EXPECT_FALSE(store.get("backbone.block2.weight").grad().empty());
}

TEST(Backbone, FeatureBlockTapsEarlierOutput) {
  BackboneConfig cfg;
  cfg.feature_block = 2;
  ParamStore store;
  Rng rng(11);
  const Backbone bb(cfg, store, rng);
  EXPECT_EQ(bb.out_channels(), 32);
  EXPECT_EQ(bb.stride(), 4);
  EXPECT_FALSE(store.contains("backbone.block3.weight"));
}

TEST(Backbone, InvalidConfigsAreRejected) {
  BackboneConfig cfg;
  cfg.strides = {2, 2};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.feature_block = 5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

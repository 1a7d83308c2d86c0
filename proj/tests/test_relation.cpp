#include <gtest/gtest.h>

#include <cmath>

#include "fsdet/relation.hpp"
#include "test_util.hpp"

using namespace fsdet;
using namespace fsdet::testing;

namespace {

RelationConfig toy_config() {
  RelationConfig cfg;
  cfg.channels = 3;
  cfg.global_hidden = 4;
  cfg.patch_mid = 2;
  cfg.patch_out = 3;
  return cfg;
}

double relu(double v) { return v > 0 ? v : 0.0; }

/// Rows of w [O,I] applied to x, plus b.
std::vector<double> dense(const Tensor& w, const Tensor& b, const std::vector<double>& x) {
  std::vector<double> out(static_cast<std::size_t>(w.dim(0)));
  for (int o = 0; o < w.dim(0); ++o) {
    double acc = b[static_cast<std::size_t>(o)];
    for (int i = 0; i < w.dim(1); ++i) acc += w[static_cast<std::size_t>(o * w.dim(1) + i)] * x[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(o)] = acc;
  }
  return out;
}

/// Global head from its definition: concatenate along channels, average
/// pool the whole 7x7 map, three dense layers.
double global_oracle(const ParamStore& st, const Tensor& q, const Tensor& s, int c) {
  std::vector<double> pooled(static_cast<std::size_t>(2 * c), 0.0);
  for (int ch = 0; ch < 2 * c; ++ch)
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 7; ++j)
        pooled[static_cast<std::size_t>(ch)] += (ch < c ? q.at(0, ch, i, j) : s.at(0, ch - c, i, j)) / 49.0;
  auto p = [&](const char* n) { return st.get(std::string("relation.global.") + n).value(); };
  auto h = dense(p("fc1.weight"), p("fc1.bias"), pooled);
  for (auto& v : h) v = relu(v);
  h = dense(p("fc2.weight"), p("fc2.bias"), h);
  for (auto& v : h) v = relu(v);
  return dense(p("fc3.weight"), p("fc3.bias"), h)[0];
}

/// Local head: shared 1x1 conv on both sides, then the 7x7 depth-wise
/// correlation collapses each channel to one number.
double local_oracle(const ParamStore& st, const Tensor& q, const Tensor& s, int c) {
  const Tensor& w = st.get("relation.local.conv.weight").value();
  const Tensor& b = st.get("relation.local.conv.bias").value();
  std::vector<double> corr(static_cast<std::size_t>(c), 0.0);
  for (int o = 0; o < c; ++o)
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 7; ++j) {
        double qv = b[static_cast<std::size_t>(o)], sv = b[static_cast<std::size_t>(o)];
        for (int k = 0; k < c; ++k) {
          qv += w.at(o, k, 0, 0) * q.at(0, k, i, j);
          sv += w.at(o, k, 0, 0) * s.at(0, k, i, j);
        }
        corr[static_cast<std::size_t>(o)] += qv * sv;
      }
  return dense(st.get("relation.local.fc.weight").value(), st.get("relation.local.fc.bias").value(), corr)[0];
}

template <typename F>
void check_head_gradients(F head, std::uint64_t seed, int pairs = 2) {
  ParamStore store;
  Rng rng(seed);
  const MultiRelationDetector det(toy_config(), store, rng);
  // Zero biases leave dead units sitting exactly on the ReLU kink.
  for (auto& p : store.entries())
    if (p.name.ends_with(".bias"))
      for (double& v : p.var.mutable_value().values()) v = uniform(rng, -0.2, 0.2);
  Rng wr(seed + 100);
  const Tensor w = random_tensor({1, pairs}, wr);
  Rng ir(seed + 200);
  int done = 0;
  for (int attempt = 0; attempt < 2000 && done < 20; ++attempt) {
    const std::vector<Tensor> in{random_tensor({pairs, 3, 7, 7}, ir), random_tensor({1, 3, 7, 7}, ir)};
    const auto r = grad_check([&](const std::vector<ag::Var>& v) { return project_to_scalar(head(det, v), w); }, in);
    if (r.relu_margin < 1e-3) continue;
    EXPECT_LE(r.relative_error, 1e-4) << "margin " << r.relu_margin;
    ++done;
  }
  EXPECT_EQ(done, 20);
}

}  // namespace

TEST(PatchRelation, SpatialTraceIsSevenFiveFiveThreeThreeOne) {
  ParamStore store;
  Rng rng(1);
  const MultiRelationDetector det(toy_config(), store, rng);
  PatchTrace trace;
  det.patch_relation(ag::Var(random_tensor({2, 3, 7, 7}, rng)), ag::Var(random_tensor({1, 3, 7, 7}, rng)), &trace);
  EXPECT_EQ(trace.spatial, (std::vector<int>{7, 5, 5, 3, 3, 1}));
}

TEST(PatchRelation, OutputsOneLogitAndFourDeltasPerPair) {
  ParamStore store;
  Rng rng(2);
  const MultiRelationDetector det(toy_config(), store, rng);
  const auto [logits, deltas] =
      det.patch_relation(ag::Var(random_tensor({5, 3, 7, 7}, rng)), ag::Var(random_tensor({1, 3, 7, 7}, rng)));
  EXPECT_EQ(logits.shape(), (std::vector<int>{5}));
  EXPECT_EQ(deltas.shape(), (std::vector<int>{5, 4}));
}

TEST(GlobalRelation, MatchesConcatThenPoolOracle) {
  ParamStore store;
  Rng rng(3);
  const MultiRelationDetector det(toy_config(), store, rng);
  for (int t = 0; t < 20; ++t) {
    const Tensor q = random_tensor({1, 3, 7, 7}, rng), s = random_tensor({1, 3, 7, 7}, rng);
    EXPECT_NEAR(det.global_relation(ag::Var(q), ag::Var(s)).value()[0], global_oracle(store, q, s, 3), 1e-12);
  }
}

TEST(LocalRelation, MatchesChannelCorrelationOracle) {
  ParamStore store;
  Rng rng(4);
  const MultiRelationDetector det(toy_config(), store, rng);
  for (int t = 0; t < 20; ++t) {
    const Tensor q = random_tensor({1, 3, 7, 7}, rng), s = random_tensor({1, 3, 7, 7}, rng);
    EXPECT_NEAR(det.local_relation(ag::Var(q), ag::Var(s)).value()[0], local_oracle(store, q, s, 3), 1e-10);
  }
}

TEST(RelationDetector, FusedLogitIsSumOfHeads) {
  ParamStore store;
  Rng rng(5);
  const MultiRelationDetector det(toy_config(), store, rng);
  const auto out = det.forward(ag::Var(random_tensor({4, 3, 7, 7}, rng)), ag::Var(random_tensor({1, 3, 7, 7}, rng)));
  for (int i = 0; i < 4; ++i)
    EXPECT_DOUBLE_EQ(out.fused.value()[i],
                     fuse_relation_scores(out.global.value()[i], out.local.value()[i], out.patch.value()[i]));
}

TEST(RelationDetector, DisabledHeadsGiveZeroLogits) {
  ParamStore store;
  Rng rng(6);
  MultiRelationDetector det(toy_config(), store, rng);
  const ag::Var q(random_tensor({3, 3, 7, 7}, rng)), s(random_tensor({1, 3, 7, 7}, rng));
  for (int mask = 1; mask < 8; ++mask) {
    const HeadToggles h{(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0};
    det.set_heads(h);
    const auto out = det.forward(q, s);
    for (int i = 0; i < 3; ++i) {
      if (!h.global) EXPECT_EQ(out.global.value()[i], 0.0);
      if (!h.local) EXPECT_EQ(out.local.value()[i], 0.0);
      if (!h.patch) EXPECT_EQ(out.patch.value()[i], 0.0);
      if (!h.global) EXPECT_NE(out.local.value()[i] + out.patch.value()[i], 0.0);
    }
    if (!h.patch)
      for (double v : out.box_deltas.value().values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(RelationDetector, RejectsWrongShapes) {
  ParamStore store;
  Rng rng(7);
  const MultiRelationDetector det(toy_config(), store, rng);
  EXPECT_THROW(det.forward(ag::Var(Tensor({1, 3, 5, 5})), ag::Var(Tensor({1, 3, 7, 7}))), ShapeError);
  EXPECT_THROW(det.forward(ag::Var(Tensor({1, 3, 7, 7})), ag::Var(Tensor({2, 3, 7, 7}))), ShapeError);
  EXPECT_THROW(det.forward(ag::Var(Tensor({1, 4, 7, 7})), ag::Var(Tensor({1, 4, 7, 7}))), ShapeError);
}

TEST(RelationDetector, ScorePairAgreesWithBatchedForward) {
  ParamStore store;
  Rng rng(8);
  const MultiRelationDetector det(toy_config(), store, rng);
  const Tensor q = random_tensor({3, 7, 7}, rng), s = random_tensor({3, 7, 7}, rng);
  const RelationScores r = score_pair(det, {q, {}}, {s, {}});
  const auto out = det.forward(ag::Var(q.reshaped({1, 3, 7, 7})), ag::Var(s.reshaped({1, 3, 7, 7})));
  EXPECT_DOUBLE_EQ(r.fused_logit, out.fused.value()[0]);
  EXPECT_DOUBLE_EQ(r.patch_box_deltas[2], out.box_deltas.value()[2]);
}

TEST(RelationGrad, GlobalHead) {
  check_head_gradients([](const MultiRelationDetector& d, const auto& v) { return d.global_relation(v[0], v[1]); },
                       10);
}

TEST(RelationGrad, LocalHead) {
  check_head_gradients([](const MultiRelationDetector& d, const auto& v) { return d.local_relation(v[0], v[1]); },
                       20);
}

TEST(RelationGrad, PatchHeadLogits) {
  check_head_gradients(
      [](const MultiRelationDetector& d, const auto& v) { return d.patch_relation(v[0], v[1]).first; }, 30);
}

TEST(MatchingLoss, MeanBceOverSelectedPairs) {
  const ag::Var logits(Tensor({3}, std::vector<double>{0.5, -1.0, 2.0}));
  const std::vector<double> labels{1, 0, 0};
  const std::vector<int> sel{0, 2};
  const double want = (ag::bce_value(0.5, 1) + ag::bce_value(2.0, 0)) / 2.0;
  EXPECT_NEAR(matching_loss(logits, labels, sel).value()[0], want, 1e-12);
  EXPECT_THROW(matching_loss(logits, labels, std::vector<int>{}), std::invalid_argument);
  EXPECT_THROW(matching_loss(logits, labels, std::vector<int>{3}), std::out_of_range);
}

TEST(MatchingLoss, GradientCheck) {
  Rng rng(40);
  const std::vector<double> labels{1, 0, 0, 1, 0};
  const std::vector<int> sel{0, 1, 3, 4, 4};
  for (int t = 0; t < 20; ++t) {
    const auto r = grad_check([&](const auto& v) { return matching_loss(v[0], labels, sel); },
                              {random_tensor({5}, rng, -3, 3)});
    EXPECT_LE(r.relative_error, 1e-4);
  }
}

TEST(BoxLoss, AveragesOverForegroundRows) {
  const ag::Var d(Tensor({2, 4}, std::vector<double>{0.5, 0, 0, 0, 9, 9, 9, 9}));
  const Tensor target({2, 4});
  const std::vector<char> fg{1, 0};
  const BoxLoss l = detector_box_loss(d, target, fg);
  EXPECT_FALSE(l.no_foreground);
  EXPECT_NEAR(l.value.value()[0], 0.125, 1e-12);
  const BoxLoss none = detector_box_loss(d, target, std::vector<char>{0, 0});
  EXPECT_TRUE(none.no_foreground);
  EXPECT_EQ(none.value.value()[0], 0.0);
}

TEST(BoxLoss, GradientCheck) {
  Rng rng(50);
  const std::vector<char> fg{1, 0, 1};
  for (int t = 0; t < 20; ++t) {
    const Tensor target = random_tensor({3, 4}, rng);
    Tensor p = random_tensor({3, 4}, rng, -2.5, 2.5);
    for (std::size_t i = 0; i < p.size(); ++i)
      if (std::abs(std::abs(p[i] - target[i]) - 1.0) < 0.05) p[i] += 0.2;
    const auto r = grad_check([&](const auto& v) { return detector_box_loss(v[0], target, fg).value; }, {p});
    EXPECT_LE(r.relative_error, 1e-4);
  }
}

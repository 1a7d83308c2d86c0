#include <gtest/gtest.h>

#include <set>

#include "fsdet/eval.hpp"
#include "test_util.hpp"

using namespace fsdet;
using namespace fsdet::testing;

namespace {

/// Answers with the ground truth of the asked category, score 1.
class OracleDetector : public EpisodeDetector {
 public:
  explicit OracleDetector(const DatasetManifest& m) : m_(&m) {}
  void set_supports(const std::string& c, std::span<const InstanceRef> s) override { installed[c] = s.size(); }
  BranchResult detect(std::size_t q, const std::string& c) override {
    BranchResult r;
    for (const auto& b : m_->records[q].boxes)
      if (b.category == c) r.detections.push_back({b.box, 1.0, c, m_->records[q].image});
    r.proposals = r.detections;
    return r;
  }
  std::map<std::string, std::size_t> installed;

 private:
  const DatasetManifest* m_;
};

class EmptyDetector : public EpisodeDetector {
 public:
  void set_supports(const std::string&, std::span<const InstanceRef>) override {}
  BranchResult detect(std::size_t, const std::string&) override { return {}; }
};

/// Fires on every box in the image whatever the category: full recall,
/// precision equal to the category's share of the boxes.
class ConfusedDetector : public EpisodeDetector {
 public:
  explicit ConfusedDetector(const DatasetManifest& m) : m_(&m) {}
  void set_supports(const std::string&, std::span<const InstanceRef>) override {}
  BranchResult detect(std::size_t q, const std::string& c) override {
    BranchResult r;
    for (const auto& b : m_->records[q].boxes) r.detections.push_back({b.box, 1.0, c, m_->records[q].image});
    r.proposals = r.detections;
    return r;
  }

 private:
  const DatasetManifest* m_;
};

DatasetManifest base_manifest() {
  SynthSpec spec;
  spec.train_images = 300;
  spec.test_images = 4;
  return generate_synthetic_dataset(spec, 3).train;
}

}  // namespace

TEST(Episodes, FiveWayFiveShotCountsAndDisjointness) {
  const DatasetManifest m = base_manifest();
  Rng rng(1);
  const auto eps = sample_episodes(m, 5, 5, 100, rng, 10);
  ASSERT_EQ(eps.size(), 100u);
  for (const auto& e : eps) {
    EXPECT_EQ(e.support_count(), 25u);
    EXPECT_EQ(e.query_count(), 50u);
    EXPECT_EQ(std::set<std::string>(e.categories.begin(), e.categories.end()).size(), 5u);
    std::set<std::size_t> support_images, query_images;
    for (std::size_t i = 0; i < 5; ++i) {
      for (const auto& s : e.supports[i]) {
        EXPECT_EQ(m.records[s.record].boxes[s.box].category, e.categories[i]);
        support_images.insert(s.record);
      }
      for (std::size_t q : e.queries[i]) {
        EXPECT_TRUE(m.records[q].has_category(e.categories[i]));
        EXPECT_TRUE(query_images.insert(q).second) << "query repeated within an episode";
        EXPECT_EQ(support_images.count(q), 0u);
      }
    }
  }
}

TEST(Episodes, SameSeedSameEpisodes) {
  const DatasetManifest m = base_manifest();
  Rng a(7), b(7);
  EXPECT_EQ(sample_episodes(m, 3, 2, 20, a, 4), sample_episodes(m, 3, 2, 20, b, 4));
}

TEST(Episodes, TooFewCategoriesNamesTheDeficit) {
  const DatasetManifest m = base_manifest();
  Rng rng(2);
  EXPECT_THROW(sample_episodes(m, 7, 1, 1, rng), DataError);
  EXPECT_THROW(sample_episodes(m, 2, 1, 1, rng, 10000), DataError);
  EXPECT_THROW(sample_episodes(m, 0, 1, 1, rng), std::invalid_argument);
}

TEST(EpisodeEval, OracleScoresOneEmptyScoresZero) {
  const DatasetManifest m = base_manifest();
  Rng rng(3);
  const auto eps = sample_episodes(m, 3, 2, 5, rng, 4);
  OracleDetector oracle(m);
  const EvalReport r = evaluate_episodes(oracle, m, eps);
  EXPECT_DOUBLE_EQ(r.ap50.mean, 1.0);
  EXPECT_DOUBLE_EQ(r.ap.mean, 1.0);
  EXPECT_DOUBLE_EQ(r.recall100.mean, 1.0);
  EXPECT_DOUBLE_EQ(r.abo.mean, 1.0);
  EXPECT_EQ(r.episodes, 5);
  for (const auto& [c, k] : oracle.installed) EXPECT_EQ(k, 2u);

  EmptyDetector empty;
  const EvalReport z = evaluate_episodes(empty, m, eps);
  EXPECT_EQ(z.ap50.mean, 0.0);
  EXPECT_EQ(z.recall100.mean, 0.0);
}

TEST(EpisodeEval, CategoryBlindDetectorIsPenalised) {
  const DatasetManifest m = base_manifest();
  Rng rng(4);
  const auto eps = sample_episodes(m, 3, 1, 5, rng, 4);
  ConfusedDetector det(m);
  const EvalReport r = evaluate_episodes(det, m, eps);
  EXPECT_DOUBLE_EQ(r.recall100.mean, 1.0);
  EXPECT_LT(r.ap50.mean, 0.9);
  EXPECT_GT(r.ap50.mean, 0.0);
}

TEST(Aggregate, MeansAndPopulationStd) {
  std::vector<EpisodeMetrics> eps(2);
  eps[0].ap50 = 0.2;
  eps[1].ap50 = 0.6;
  const EvalReport r = aggregate(eps);
  EXPECT_DOUBLE_EQ(r.ap50.mean, 0.4);
  EXPECT_NEAR(r.ap50.std, 0.2, 1e-15);
  EXPECT_DOUBLE_EQ(r.ap50.min, 0.2);
  EXPECT_DOUBLE_EQ(r.ap50.max, 0.6);
  EXPECT_THROW(aggregate(std::vector<EpisodeMetrics>{}), std::invalid_argument);
}

TEST(FullWay, EveryCategoryAgainstEveryImage) {
  DatasetManifest m = base_manifest();
  m.records.resize(40);
  m.records[0].boxes.push_back({{0, 0, 4, 4}, "lonely"});
  OracleDetector oracle(m);
  Rng rng(5);
  const EvalReport r = full_way_evaluate(oracle, m, 2, rng);
  EXPECT_EQ(r.protocol, "fullway");
  EXPECT_EQ(r.excluded, (std::vector<std::string>{"lonely"}));
  EXPECT_EQ(r.ways, 6);
  EXPECT_DOUBLE_EQ(r.ap50.mean, 1.0);
}

TEST(Report, JsonCarriesSummaryAndOptionalEpisodes) {
  std::vector<EpisodeMetrics> eps(3);
  eps[1].ap50 = 0.3;
  EvalReport r = aggregate(eps);
  r.ways = 2;
  r.shots = 1;
  const auto j = report_to_json(r);
  EXPECT_EQ(j.at("ways"), 2);
  EXPECT_FALSE(j.contains("per_episode"));
  EXPECT_EQ(report_to_json(r, true).at("per_episode").size(), 3u);
  EXPECT_NE(report_table(r).find("AP50"), std::string::npos);
}

#include "fsdet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace fsdet {

std::size_t EpisodeSpec::support_count() const {
  std::size_t n = 0;
  for (const auto& s : supports) n += s.size();
  return n;
}

std::size_t EpisodeSpec::query_count() const {
  std::size_t n = 0;
  for (const auto& q : queries) n += q.size();
  return n;
}

namespace {

template <class T>
void partial_shuffle(std::vector<T>& v, std::size_t k, Rng& rng) {
  for (std::size_t i = 0; i < k && i < v.size(); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, v.size() - 1);
    std::swap(v[i], v[pick(rng)]);
  }
}

}  // namespace

std::vector<EpisodeSpec> sample_episodes(const DatasetManifest& manifest, int ways, int shots, int n_episodes,
                                         Rng& rng, int queries_per_category) {
  if (ways < 1 || shots < 1 || n_episodes < 0 || queries_per_category < 1) {
    throw std::invalid_argument("sample_episodes: ways, shots and queries must be >= 1");
  }
  std::map<std::string, std::vector<InstanceRef>> instances;
  std::map<std::string, std::vector<std::size_t>> images;
  for (std::size_t r = 0; r < manifest.records.size(); ++r) {
    std::set<std::string> present;
    for (std::size_t b = 0; b < manifest.records[r].boxes.size(); ++b) {
      const auto& cat = manifest.records[r].boxes[b].category;
      instances[cat].push_back({r, b});
      present.insert(cat);
    }
    for (const auto& c : present) images[c].push_back(r);
  }
  std::vector<std::string> eligible;
  std::vector<std::string> deficient;
  for (const auto& [cat, inst] : instances) {
    if (static_cast<int>(inst.size()) >= shots && static_cast<int>(images[cat].size()) >= queries_per_category + 1) {
      eligible.push_back(cat);
    } else {
      deficient.push_back(cat);
    }
  }
  if (static_cast<int>(eligible.size()) < ways) {
    std::string names;
    for (const auto& d : deficient) names += (names.empty() ? "" : ", ") + d;
    throw DataError("sample_episodes: only " + std::to_string(eligible.size()) + " categories can supply " +
                    std::to_string(shots) + " supports and " + std::to_string(queries_per_category) +
                    " queries; deficient: " + (names.empty() ? "(none, too few categories)" : names));
  }

  std::vector<EpisodeSpec> episodes;
  episodes.reserve(static_cast<std::size_t>(n_episodes));
  for (int e = 0; e < n_episodes; ++e) {
    EpisodeSpec ep;
    ep.ways = ways;
    ep.shots = shots;
    std::vector<std::string> cats = eligible;
    partial_shuffle(cats, static_cast<std::size_t>(ways), rng);
    ep.categories.assign(cats.begin(), cats.begin() + ways);
    std::set<std::size_t> used;
    for (const auto& c : ep.categories) {
      std::vector<InstanceRef> pool = instances[c];
      partial_shuffle(pool, static_cast<std::size_t>(shots), rng);
      pool.resize(static_cast<std::size_t>(shots));
      for (const auto& ref : pool) used.insert(ref.record);
      ep.supports.push_back(std::move(pool));
    }
    for (const auto& c : ep.categories) {
      std::vector<std::size_t> pool;
      for (std::size_t r : images[c])
        if (!used.count(r)) pool.push_back(r);
      if (static_cast<int>(pool.size()) < queries_per_category) {
        throw DataError("sample_episodes: category '" + c + "' has too few query images left after supports");
      }
      partial_shuffle(pool, static_cast<std::size_t>(queries_per_category), rng);
      pool.resize(static_cast<std::size_t>(queries_per_category));
      for (std::size_t r : pool) used.insert(r);
      ep.queries.push_back(std::move(pool));
    }
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

namespace {

struct CategoryScore {
  double ap = 0.0, ap50 = 0.0, ap75 = 0.0, recall = 0.0, abo = 0.0;
};

CategoryScore score_category(EpisodeDetector& detector, const DatasetManifest& manifest,
                             std::span<const std::size_t> queries, const std::string& category) {
  std::vector<DetectionResult> dets, props;
  GroundTruthSet gts;
  for (std::size_t q : queries) {
    const auto& rec = manifest.records.at(q);
    gts.push_back({rec.image, {}});
    for (const auto& b : rec.boxes)
      if (b.category == category) gts.back().boxes.push_back(b);
    BranchResult r = detector.detect(q, category);
    for (auto& d : r.detections) {
      d.category = category;
      d.image_id = rec.image;
      dets.push_back(std::move(d));
    }
    for (auto& p : r.proposals) {
      p.category = category;
      p.image_id = rec.image;
      props.push_back(std::move(p));
    }
  }
  CategoryScore s;
  s.ap50 = average_precision(dets, gts, category, 0.5).value;
  s.ap75 = average_precision(dets, gts, category, 0.75).value;
  s.ap = coco_average_precision(dets, gts, category);
  s.recall = recall_at_k(props, gts, 100, 0.5, category);
  bool any_gt = false;
  for (const auto& g : gts) any_gt = any_gt || !g.boxes.empty();
  s.abo = any_gt ? average_best_overlap(props, gts, category) : 1.0;
  return s;
}

}  // namespace

EpisodeMetrics evaluate_episode(EpisodeDetector& detector, const DatasetManifest& manifest, const EpisodeSpec& episode) {
  if (episode.categories.empty()) throw std::invalid_argument("evaluate_episode: episode has no categories");
  std::vector<std::size_t> queries;
  for (const auto& q : episode.queries) queries.insert(queries.end(), q.begin(), q.end());
  EpisodeMetrics m;
  const double inv = 1.0 / static_cast<double>(episode.categories.size());
  for (std::size_t i = 0; i < episode.categories.size(); ++i) {
    const auto& c = episode.categories[i];
    detector.set_supports(c, episode.supports.at(i));
    const CategoryScore s = score_category(detector, manifest, queries, c);
    m.category_ap50[c] = s.ap50;
    m.ap += s.ap * inv;
    m.ap50 += s.ap50 * inv;
    m.ap75 += s.ap75 * inv;
    m.recall100 += s.recall * inv;
    m.abo += s.abo * inv;
  }
  return m;
}

namespace {

MetricSummary summarize(std::span<const EpisodeMetrics> eps, double EpisodeMetrics::*field) {
  MetricSummary s;
  double sum = 0.0;
  s.min = s.max = eps.front().*field;
  for (const auto& e : eps) {
    sum += e.*field;
    s.min = std::min(s.min, e.*field);
    s.max = std::max(s.max, e.*field);
  }
  s.mean = sum / static_cast<double>(eps.size());
  double var = 0.0;
  for (const auto& e : eps) var += (e.*field - s.mean) * (e.*field - s.mean);
  s.std = std::sqrt(var / static_cast<double>(eps.size()));
  return s;
}

}  // namespace

EvalReport aggregate(std::span<const EpisodeMetrics> episodes) {
  if (episodes.empty()) throw std::invalid_argument("aggregate: no episode reports");
  EvalReport r;
  r.episodes = static_cast<int>(episodes.size());
  r.per_episode.assign(episodes.begin(), episodes.end());
  r.ap = summarize(episodes, &EpisodeMetrics::ap);
  r.ap50 = summarize(episodes, &EpisodeMetrics::ap50);
  r.ap75 = summarize(episodes, &EpisodeMetrics::ap75);
  r.recall100 = summarize(episodes, &EpisodeMetrics::recall100);
  r.abo = summarize(episodes, &EpisodeMetrics::abo);
  return r;
}

EvalReport evaluate_episodes(EpisodeDetector& detector, const DatasetManifest& manifest,
                             std::span<const EpisodeSpec> episodes) {
  std::vector<EpisodeMetrics> metrics;
  metrics.reserve(episodes.size());
  for (const auto& ep : episodes) metrics.push_back(evaluate_episode(detector, manifest, ep));
  EvalReport r = aggregate(metrics);
  if (!episodes.empty()) {
    r.ways = episodes.front().ways;
    r.shots = episodes.front().shots;
  }
  return r;
}

EvalReport full_way_evaluate(EpisodeDetector& detector, const DatasetManifest& manifest, int shots, Rng& rng) {
  if (shots < 1) throw std::invalid_argument("full_way_evaluate: shots must be >= 1");
  std::map<std::string, std::vector<InstanceRef>> instances;
  for (std::size_t r = 0; r < manifest.records.size(); ++r)
    for (std::size_t b = 0; b < manifest.records[r].boxes.size(); ++b) {
      instances[manifest.records[r].boxes[b].category].push_back({r, b});
    }
  std::vector<std::size_t> all(manifest.records.size());
  std::iota(all.begin(), all.end(), 0);
  EvalReport report;
  EpisodeMetrics m;
  std::vector<CategoryScore> scores;
  std::vector<std::string> names;
  for (auto& [cat, pool] : instances) {
    if (static_cast<int>(pool.size()) < shots) {
      report.excluded.push_back(cat);
      continue;
    }
    partial_shuffle(pool, static_cast<std::size_t>(shots), rng);
    detector.set_supports(cat, std::span(pool).first(static_cast<std::size_t>(shots)));
    scores.push_back(score_category(detector, manifest, all, cat));
    names.push_back(cat);
  }
  if (scores.empty()) throw DataError("full_way_evaluate: no category has enough supports");
  const double inv = 1.0 / static_cast<double>(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    m.category_ap50[names[i]] = scores[i].ap50;
    m.ap += scores[i].ap * inv;
    m.ap50 += scores[i].ap50 * inv;
    m.ap75 += scores[i].ap75 * inv;
    m.recall100 += scores[i].recall * inv;
    m.abo += scores[i].abo * inv;
  }
  const std::vector<EpisodeMetrics> one{m};
  EvalReport agg = aggregate(one);
  agg.protocol = "fullway";
  agg.ways = static_cast<int>(scores.size());
  agg.shots = shots;
  agg.excluded = std::move(report.excluded);
  return agg;
}

nlohmann::json report_to_json(const EvalReport& r, bool include_episodes) {
  auto summary = [](const MetricSummary& s) {
    return nlohmann::json{{"mean", s.mean}, {"std", s.std}, {"min", s.min}, {"max", s.max}};
  };
  nlohmann::json j{{"protocol", r.protocol}, {"ways", r.ways},          {"shots", r.shots},
                   {"seed", r.seed},         {"episodes", r.episodes},  {"AP", summary(r.ap)},
                   {"AP50", summary(r.ap50)}, {"AP75", summary(r.ap75)}, {"recall@100", summary(r.recall100)},
                   {"ABO", summary(r.abo)},  {"excluded", r.excluded}};
  if (include_episodes) {
    nlohmann::json eps = nlohmann::json::array();
    for (const auto& e : r.per_episode) {
      eps.push_back({{"AP", e.ap},
                     {"AP50", e.ap50},
                     {"AP75", e.ap75},
                     {"recall@100", e.recall100},
                     {"ABO", e.abo},
                     {"category_AP50", e.category_ap50}});
    }
    j["per_episode"] = eps;
  }
  return j;
}

std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  os << r.protocol << ' ' << r.ways << "-way " << r.shots << "-shot, " << r.episodes << " episode(s), seed " << r.seed
     << '\n';
  os << std::left << std::setw(12) << "metric" << std::setw(10) << "mean" << std::setw(10) << "std" << std::setw(10)
     << "min" << "max\n";
  auto row = [&](const char* name, const MetricSummary& s) {
    os << std::left << std::setw(12) << name << std::fixed << std::setprecision(4) << std::setw(10) << s.mean
       << std::setw(10) << s.std << std::setw(10) << s.min << s.max << '\n';
  };
  row("AP", r.ap);
  row("AP50", r.ap50);
  row("AP75", r.ap75);
  row("recall@100", r.recall100);
  row("ABO", r.abo);
  if (!r.excluded.empty()) {
    os << "excluded:";
    for (const auto& c : r.excluded) os << ' ' << c;
    os << '\n';
  }
  return os.str();
}

// ---- model adapter ------------------------------------------------------

ModelDetector::ModelDetector(const FewShotModel& model, const DatasetManifest& manifest, ImageStore& images,
                             DetectOptions opts)
    : model_(&model), manifest_(&manifest), images_(&images), opts_(opts) {}

void ModelDetector::set_supports(const std::string& category, std::span<const InstanceRef> supports) {
  if (supports.empty()) throw std::invalid_argument("set_supports: category '" + category + "' has no supports");
  ag::NoGradGuard guard;
  std::vector<SupportCrop> crops;
  for (const auto& ref : supports) {
    const auto& rec = manifest_->records.at(ref.record);
    crops.push_back(prepare_support(images_->get(rec.image), rec.boxes.at(ref.box).box, model_->config().support));
  }
  supports_.insert_or_assign(category, model_->encode_support(crops, category));
}

BranchResult ModelDetector::detect(std::size_t query_record, const std::string& category) {
  const auto sit = supports_.find(category);
  if (sit == supports_.end()) throw std::invalid_argument("detect: no supports installed for '" + category + "'");
  ag::NoGradGuard guard;
  auto qit = queries_.find(query_record);
  if (qit == queries_.end()) {
    const auto& rec = manifest_->records.at(query_record);
    qit = queries_.emplace(query_record, model_->encode_query(images_->get(rec.image), rec.image)).first;
  }
  DetectOutput out = model_->detect(qit->second, sit->second, opts_);
  return {std::move(out.detections), std::move(out.proposals)};
}

}  // namespace fsdet

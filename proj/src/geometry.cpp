#include "fsdet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace fsdet {

bool Box::valid() const noexcept {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x2 >= x1 &&
         y2 >= y1;
}

Box Box::clipped(double image_width, double image_height) const noexcept {
  auto clamp = [](double v, double hi) { return std::clamp(v, 0.0, hi); };
  return {clamp(x1, image_width), clamp(y1, image_height), clamp(x2, image_width), clamp(y2, image_height)};
}

double iou(const Box& a, const Box& b) noexcept {
  const double area_a = a.area();
  const double area_b = b.area();
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (area_a + area_b - inter);
}

namespace {

std::vector<int> score_order(std::span<const DetectionResult> dets) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[a].score > dets[b].score; });
  return order;
}

}  // namespace

std::vector<int> nms(std::span<const DetectionResult> dets, double iou_threshold) {
  std::vector<int> kept;
  std::vector<char> suppressed(dets.size(), 0);
  const auto order = score_order(dets);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int cur = order[i];
    if (suppressed[cur]) continue;
    kept.push_back(cur);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const int other = order[j];
      if (!suppressed[other] && iou(dets[cur].box, dets[other].box) > iou_threshold) suppressed[other] = 1;
    }
  }
  return kept;
}

std::vector<DetectionResult> soft_nms(std::span<const DetectionResult> dets, SoftNmsParams params) {
  if (!(params.sigma > 0.0)) throw std::invalid_argument("soft_nms: sigma must be positive");
  std::vector<DetectionResult> pool(dets.begin(), dets.end());
  std::vector<int> index(pool.size());
  std::iota(index.begin(), index.end(), 0);
  std::vector<DetectionResult> out;
  out.reserve(pool.size());
  while (!pool.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i) {
      if (pool[i].score > pool[best].score ||
          (pool[i].score == pool[best].score && index[i] < index[best])) {
        best = i;
      }
    }
    DetectionResult top = pool[best];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(best));
    index.erase(index.begin() + static_cast<std::ptrdiff_t>(best));
    if (top.score < params.score_floor) break;  // every remaining score is lower
    for (auto& d : pool) {
      const double o = iou(top.box, d.box);
      d.score *= std::exp(-(o * o) / params.sigma);
    }
    out.push_back(std::move(top));
  }
  return out;
}

double interpolated_ap(std::span<const double> precision, std::span<const double> recall) {
  const std::size_t n = precision.size();
  std::vector<double> envelope(precision.begin(), precision.end());
  for (std::size_t i = n; i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
  double acc = 0.0;
  for (int t = 0; t <= 100; ++t) {
    const double r = t / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    const auto idx = static_cast<std::size_t>(it - recall.begin());
    acc += idx < n ? envelope[idx] : 0.0;
  }
  return acc / 101.0;
}

ApResult average_precision(std::span<const DetectionResult> dets, const GroundTruthSet& gts,
                           const std::string& category, double iou_threshold) {
  std::map<std::string, std::vector<Box>> truth;
  int num_gt = 0;
  for (const auto& img : gts) {
    auto& boxes = truth[img.image_id];
    for (const auto& g : img.boxes) {
      if (g.category == category) {
        boxes.push_back(g.box);
        ++num_gt;
      }
    }
  }
  std::vector<DetectionResult> mine;
  for (const auto& d : dets) {
    if (d.category == category) mine.push_back(d);
  }
  ApResult result;
  result.num_ground_truth = num_gt;
  result.num_detections = static_cast<int>(mine.size());
  if (num_gt == 0) {
    result.missing_ground_truth = !mine.empty();
    return result;
  }
  if (mine.empty()) return result;

  std::map<std::string, std::vector<char>> used;
  for (const auto& [id, boxes] : truth) used[id].assign(boxes.size(), 0);

  const auto order = score_order(mine);
  std::vector<double> precision, recall;
  precision.reserve(order.size());
  recall.reserve(order.size());
  int tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const auto& d = mine[order[rank]];
    const auto it = truth.find(d.image_id);
    if (it != truth.end()) {
      auto& taken = used[d.image_id];
      int best = -1;
      double best_iou = iou_threshold;
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (taken[g]) continue;
        const double o = iou(d.box, it->second[g]);
        if (o >= best_iou && (best < 0 || o > best_iou)) {
          best = static_cast<int>(g);
          best_iou = o;
        }
      }
      if (best >= 0) {
        taken[best] = 1;
        ++tp;
      }
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
    recall.push_back(static_cast<double>(tp) / num_gt);
  }
  result.value = interpolated_ap(precision, recall);
  return result;
}

double coco_average_precision(std::span<const DetectionResult> dets, const GroundTruthSet& gts,
                              const std::string& category) {
  double acc = 0.0;
  for (int t = 0; t < 10; ++t) acc += average_precision(dets, gts, category, 0.5 + 0.05 * t).value;
  return acc / 10.0;
}

namespace {

std::map<std::string, std::vector<const DetectionResult*>> group_by_image(
    std::span<const DetectionResult> proposals, const std::string& category) {
  std::map<std::string, std::vector<const DetectionResult*>> grouped;
  for (const auto& p : proposals) {
    if (category.empty() || p.category.empty() || p.category == category) grouped[p.image_id].push_back(&p);
  }
  for (auto& [id, list] : grouped) {
    std::stable_sort(list.begin(), list.end(),
                     [](const DetectionResult* a, const DetectionResult* b) { return a->score > b->score; });
  }
  return grouped;
}

}  // namespace

double recall_at_k(std::span<const DetectionResult> proposals, const GroundTruthSet& gts, int k,
                   double iou_threshold, const std::string& category) {
  if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
  const auto grouped = group_by_image(proposals, category);
  int total = 0, hit = 0;
  for (const auto& img : gts) {
    const auto it = grouped.find(img.image_id);
    for (const auto& g : img.boxes) {
      if (!category.empty() && g.category != category) continue;
      ++total;
      if (it == grouped.end()) continue;
      const std::size_t limit = std::min<std::size_t>(it->second.size(), static_cast<std::size_t>(k));
      for (std::size_t i = 0; i < limit; ++i) {
        if (iou(it->second[i]->box, g.box) >= iou_threshold) {
          ++hit;
          break;
        }
      }
    }
  }
  return total == 0 ? 1.0 : static_cast<double>(hit) / total;
}

double average_best_overlap(std::span<const DetectionResult> proposals, const GroundTruthSet& gts,
                            const std::string& category) {
  const auto grouped = group_by_image(proposals, category);
  int total = 0;
  double acc = 0.0;
  for (const auto& img : gts) {
    const auto it = grouped.find(img.image_id);
    for (const auto& g : img.boxes) {
      if (!category.empty() && g.category != category) continue;
      ++total;
      if (it == grouped.end()) continue;
      double best = 0.0;
      for (const auto* p : it->second) best = std::max(best, iou(p->box, g.box));
      acc += best;
    }
  }
  if (total == 0) throw std::invalid_argument("average_best_overlap: empty ground truth");
  return acc / total;
}

nlohmann::json metric_record(const std::string& metric, const std::string& category, double value,
                             double iou_threshold, int k) {
  return {{"metric", metric}, {"category", category}, {"value", value}, {"iou_threshold", iou_threshold},
          {"k", k}};
}

void to_json(nlohmann::json& j, const Box& b) { j = nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }

void from_json(const nlohmann::json& j, Box& b) {
  b = {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

}  // namespace fsdet

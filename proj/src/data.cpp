#include "fsdet/data.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace fsdet {

// ---- records ------------------------------------------------------------

bool ImageRecord::has_category(const std::string& category) const {
  return std::any_of(boxes.begin(), boxes.end(), [&](const GroundTruthBox& b) { return b.category == category; });
}

std::vector<Box> ImageRecord::boxes_of(const std::string& category) const {
  std::vector<Box> out;
  for (const auto& b : boxes)
    if (b.category == category) out.push_back(b.box);
  return out;
}

std::vector<std::string> DatasetManifest::categories() const {
  std::set<std::string> names;
  for (const auto& r : records)
    for (const auto& b : r.boxes) names.insert(b.category);
  return {names.begin(), names.end()};
}

void DatasetManifest::validate() const {
  for (const auto& r : records) {
    if (r.width < 1 || r.height < 1) throw DataError("record " + r.image + " has non-positive size");
    for (const auto& b : r.boxes) {
      if (!b.box.valid() || b.box.x1 < 0 || b.box.y1 < 0 || b.box.x2 > r.width || b.box.y2 > r.height) {
        throw DataError("record " + r.image + " has a box outside the image");
      }
      if (b.category.empty()) throw DataError("record " + r.image + " has an unlabeled box");
    }
  }
}

GroundTruthSet DatasetManifest::ground_truth() const {
  GroundTruthSet gts;
  gts.reserve(records.size());
  for (const auto& r : records) gts.push_back({r.image, r.boxes});
  return gts;
}

nlohmann::json record_to_json(const ImageRecord& rec) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : rec.boxes) {
    boxes.push_back({{"x1", b.box.x1}, {"y1", b.box.y1}, {"x2", b.box.x2}, {"y2", b.box.y2}, {"category", b.category}});
  }
  return {{"image", rec.image}, {"width", rec.width}, {"height", rec.height}, {"boxes", boxes}};
}

ImageRecord record_from_json(const nlohmann::json& j) {
  ImageRecord rec;
  rec.image = j.at("image").get<std::string>();
  rec.width = j.at("width").get<int>();
  rec.height = j.at("height").get<int>();
  for (const auto& b : j.at("boxes")) {
    rec.boxes.push_back({{b.at("x1").get<double>(), b.at("y1").get<double>(), b.at("x2").get<double>(),
                          b.at("y2").get<double>()},
                         b.at("category").get<std::string>()});
  }
  return rec;
}

DatasetManifest read_manifest(const std::filesystem::path& path, std::string split) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.split = std::move(split);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      m.records.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  m.validate();
  return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& r : manifest.records) out << record_to_json(r).dump() << '\n';
}

DatasetManifest convert_coco(const nlohmann::json& coco, const std::map<std::string, std::string>& aliases) {
  std::map<long long, std::string> cat_names;
  for (const auto& c : coco.at("categories")) {
    std::string name = c.at("name").get<std::string>();
    if (const auto it = aliases.find(name); it != aliases.end()) name = it->second;
    cat_names[c.at("id").get<long long>()] = name;
  }
  DatasetManifest m;
  std::map<long long, std::size_t> by_id;
  for (const auto& img : coco.at("images")) {
    ImageRecord rec;
    rec.image = img.at("file_name").get<std::string>();
    rec.width = img.at("width").get<int>();
    rec.height = img.at("height").get<int>();
    by_id[img.at("id").get<long long>()] = m.records.size();
    m.records.push_back(std::move(rec));
  }
  for (const auto& a : coco.at("annotations")) {
    if (a.value("iscrowd", 0) != 0) continue;
    const auto img = by_id.find(a.at("image_id").get<long long>());
    const auto cat = cat_names.find(a.at("category_id").get<long long>());
    if (img == by_id.end() || cat == cat_names.end()) throw DataError("annotation references unknown image/category");
    const auto& bb = a.at("bbox");
    auto& rec = m.records[img->second];
    const double x = bb.at(0).get<double>(), y = bb.at(1).get<double>();
    Box box{x, y, x + bb.at(2).get<double>(), y + bb.at(3).get<double>()};
    rec.boxes.push_back({box.clipped(rec.width, rec.height), cat->second});
  }
  m.validate();
  return m;
}

// ---- preprocessing ------------------------------------------------------

std::pair<int, int> prepared_size(int width, int height, const QueryPrepConfig& cfg, double* scale_out) {
  if (width < 1 || height < 1) throw DataError("prepare_query: degenerate image");
  if (cfg.short_side < 1 || cfg.long_cap < cfg.short_side) throw DataError("prepare_query: bad target sizes");
  const double short_px = std::min(width, height);
  const double long_px = std::max(width, height);
  const double scale = std::min(cfg.short_side / short_px, cfg.long_cap / long_px);
  if (scale_out) *scale_out = scale;
  const int w = std::max(1, static_cast<int>(std::lround(width * scale)));
  const int h = std::max(1, static_cast<int>(std::lround(height * scale)));
  return {w, h};
}

PreparedQuery prepare_query(const Image& image, const QueryPrepConfig& cfg) {
  double scale = 1.0;
  const auto [w, h] = prepared_size(image.width(), image.height(), cfg, &scale);
  return {resize_bilinear(image, w, h), scale};
}

SupportCrop prepare_support(const Image& image, const Box& box, const SupportPrepConfig& cfg) {
  const int W = image.width(), H = image.height();
  if (!box.valid() || box.x1 < 0 || box.y1 < 0 || box.x2 > W || box.y2 > H || box.area() <= 0.0) {
    throw DataError("prepare_support: box outside the image");
  }
  if (cfg.size < 1 || cfg.context < 0) throw DataError("prepare_support: bad crop configuration");
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x1)) - cfg.context);
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y1)) - cfg.context);
  const int x1 = std::min(W, static_cast<int>(std::ceil(box.x2)) + cfg.context);
  const int y1 = std::min(H, static_cast<int>(std::ceil(box.y2)) + cfg.context);
  const int cw = x1 - x0, ch = y1 - y0;
  const int side = std::max(cw, ch);

  SupportCrop crop;
  crop.source = box;
  crop.crop_region = {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1),
                      static_cast<double>(y1)};
  crop.padding.top = (side - ch) / 2;
  crop.padding.bottom = side - ch - crop.padding.top;
  crop.padding.left = (side - cw) / 2;
  crop.padding.right = side - cw - crop.padding.left;

  const int C = image.channels();
  Image region(C, ch, cw);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) region.at(c, y, x) = image.at(c, y0 + y, x0 + x);

  // Content is resized first and then padded so padded pixels stay exactly 0.
  const double s = static_cast<double>(cfg.size) / side;
  const int rw = std::clamp(static_cast<int>(std::lround(cw * s)), 1, cfg.size);
  const int rh = std::clamp(static_cast<int>(std::lround(ch * s)), 1, cfg.size);
  const Image resized = resize_bilinear(region, rw, rh);
  crop.output_padding.top = (cfg.size - rh) / 2;
  crop.output_padding.bottom = cfg.size - rh - crop.output_padding.top;
  crop.output_padding.left = (cfg.size - rw) / 2;
  crop.output_padding.right = cfg.size - rw - crop.output_padding.left;
  crop.image = Image(C, cfg.size, cfg.size, 0.0);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < rh; ++y)
      for (int x = 0; x < rw; ++x)
        crop.image.at(c, crop.output_padding.top + y, crop.output_padding.left + x) = resized.at(c, y, x);

  const double ox = crop.output_padding.left - x0 * (static_cast<double>(rw) / cw);
  const double oy = crop.output_padding.top - y0 * (static_cast<double>(rh) / ch);
  crop.object_in_crop = {ox + box.x1 * rw / cw, oy + box.y1 * rh / ch, ox + box.x2 * rw / cw,
                         oy + box.y2 * rh / ch};
  return crop;
}

// ---- construction -------------------------------------------------------

FilterReport filter_small_boxes(const DatasetManifest& manifest, double min_ratio) {
  FilterReport report;
  report.manifest.split = manifest.split;
  for (const auto& r : manifest.records) {
    const double image_area = static_cast<double>(r.width) * r.height;
    const bool small = std::any_of(r.boxes.begin(), r.boxes.end(), [&](const GroundTruthBox& b) {
      return b.box.area() / image_area < min_ratio;
    });
    if (small) {
      ++report.removed_images;
      report.removed_boxes += static_cast<int>(r.boxes.size());
    } else {
      ++report.kept_images;
      report.manifest.records.push_back(r);
    }
  }
  return report;
}

std::vector<std::string> Taxonomy::nodes() const {
  std::set<std::string> names;
  if (!root.empty()) names.insert(root);
  for (const auto& [p, c] : edges) {
    names.insert(p);
    names.insert(c);
  }
  return {names.begin(), names.end()};
}

namespace {

std::map<std::string, std::vector<std::string>> undirected(const Taxonomy& t) {
  std::map<std::string, std::vector<std::string>> adj;
  for (const auto& n : t.nodes()) adj[n];
  for (const auto& [p, c] : t.edges) {
    adj[p].push_back(c);
    adj[c].push_back(p);
  }
  for (auto& [n, list] : adj) std::sort(list.begin(), list.end());
  return adj;
}

}  // namespace

void Taxonomy::validate() const {
  const auto names = nodes();
  if (names.empty()) throw DataError("empty taxonomy");
  // Acyclic: Kahn's algorithm on the directed edges.
  std::map<std::string, int> indegree;
  std::map<std::string, std::vector<std::string>> children;
  for (const auto& n : names) indegree[n] = 0;
  for (const auto& [p, c] : edges) {
    children[p].push_back(c);
    ++indegree[c];
  }
  std::deque<std::string> ready;
  for (const auto& [n, d] : indegree)
    if (d == 0) ready.push_back(n);
  std::size_t visited = 0;
  while (!ready.empty()) {
    const std::string n = ready.front();
    ready.pop_front();
    ++visited;
    for (const auto& c : children[n])
      if (--indegree[c] == 0) ready.push_back(c);
  }
  if (visited != names.size()) throw DataError("taxonomy contains a cycle");
  const auto adj = undirected(*this);
  std::set<std::string> seen{names.front()};
  std::deque<std::string> queue{names.front()};
  while (!queue.empty()) {
    const std::string n = queue.front();
    queue.pop_front();
    for (const auto& m : adj.at(n))
      if (seen.insert(m).second) queue.push_back(m);
  }
  if (seen.size() != names.size()) throw DataError("taxonomy is not connected");
}

Taxonomy Taxonomy::from_json(const nlohmann::json& j) {
  Taxonomy t;
  t.root = j.value("root", std::string{});
  for (const auto& e : j.at("edges")) t.edges.emplace_back(e.at(0).get<std::string>(), e.at(1).get<std::string>());
  return t;
}

nlohmann::json Taxonomy::to_json() const {
  nlohmann::json e = nlohmann::json::array();
  for (const auto& [p, c] : edges) e.push_back({p, c});
  return {{"root", root}, {"edges", e}};
}

TaxonomySplit taxonomy_split(const std::vector<std::string>& categories, const Taxonomy& taxonomy,
                             const std::vector<std::string>& train_pool, int n_test) {
  taxonomy.validate();
  const auto adj = undirected(taxonomy);
  for (const auto& c : categories)
    if (!adj.count(c)) throw DataError("category '" + c + "' missing from taxonomy");
  if (n_test < 0 || n_test >= static_cast<int>(categories.size())) {
    throw DataError("taxonomy_split: n_test must be in [0, number of categories)");
  }
  // Multi-source BFS from the pool.
  std::map<std::string, int> dist;
  std::deque<std::string> queue;
  for (const auto& p : train_pool) {
    if (!adj.count(p)) throw DataError("pool category '" + p + "' missing from taxonomy");
    if (dist.emplace(p, 0).second) queue.push_back(p);
  }
  while (!queue.empty()) {
    const std::string n = queue.front();
    queue.pop_front();
    for (const auto& m : adj.at(n)) {
      if (!dist.count(m)) {
        dist[m] = dist[n] + 1;
        queue.push_back(m);
      }
    }
  }
  TaxonomySplit split;
  std::vector<std::string> order(categories.begin(), categories.end());
  std::sort(order.begin(), order.end());
  order.erase(std::unique(order.begin(), order.end()), order.end());
  for (const auto& c : order) {
    // An empty pool leaves every category at the same (maximal) distance.
    split.distance[c] = dist.count(c) ? dist[c] : std::numeric_limits<int>::max();
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](const std::string& a, const std::string& b) { return split.distance[a] > split.distance[b]; });
  const auto cut = static_cast<std::size_t>(n_test);
  split.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end());
  std::sort(split.test.begin(), split.test.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

std::pair<DatasetManifest, DatasetManifest> apply_split(const DatasetManifest& manifest, const TaxonomySplit& split) {
  const std::set<std::string> test(split.test.begin(), split.test.end());
  const std::set<std::string> train(split.train.begin(), split.train.end());
  DatasetManifest tr, te;
  tr.split = "train";
  te.split = "test";
  for (const auto& r : manifest.records) {
    ImageRecord test_part = r, train_part = r;
    test_part.boxes.clear();
    train_part.boxes.clear();
    for (const auto& b : r.boxes) {
      if (test.count(b.category)) test_part.boxes.push_back(b);
      else if (train.count(b.category)) train_part.boxes.push_back(b);
    }
    if (!test_part.boxes.empty()) te.records.push_back(std::move(test_part));
    else if (!train_part.boxes.empty()) tr.records.push_back(std::move(train_part));
  }
  return {tr, te};
}

DatasetStats dataset_stats(const DatasetManifest& manifest) {
  DatasetStats s;
  std::map<std::string, int> images_per_class;
  bool first = true;
  for (const auto& r : manifest.records) {
    ++s.num_images;
    std::set<std::string> present;
    for (const auto& b : r.boxes) {
      ++s.num_boxes;
      present.insert(b.category);
      const double size = std::sqrt(b.box.area());
      const double ratio = b.box.area() / (static_cast<double>(r.width) * r.height);
      const double aspect = b.box.height() > 0 ? b.box.width() / b.box.height() : 0.0;
      if (first) {
        s.min_box_size = s.max_box_size = size;
        s.min_area_ratio = s.max_area_ratio = ratio;
        s.min_aspect = s.max_aspect = aspect;
        first = false;
      }
      s.min_box_size = std::min(s.min_box_size, size);
      s.max_box_size = std::max(s.max_box_size, size);
      s.min_area_ratio = std::min(s.min_area_ratio, ratio);
      s.max_area_ratio = std::max(s.max_area_ratio, ratio);
      s.min_aspect = std::min(s.min_aspect, aspect);
      s.max_aspect = std::max(s.max_aspect, aspect);
    }
    for (const auto& c : present) ++images_per_class[c];
  }
  s.num_classes = static_cast<int>(images_per_class.size());
  s.avg_boxes_per_image = s.num_images ? static_cast<double>(s.num_boxes) / s.num_images : 0.0;
  if (!images_per_class.empty()) {
    s.min_images_per_class = std::numeric_limits<int>::max();
    int total = 0;
    for (const auto& [c, n] : images_per_class) {
      s.min_images_per_class = std::min(s.min_images_per_class, n);
      s.max_images_per_class = std::max(s.max_images_per_class, n);
      total += n;
    }
    s.avg_images_per_class = static_cast<double>(total) / s.num_classes;
  }
  return s;
}

nlohmann::json stats_to_json(const DatasetStats& s) {
  return {{"num_classes", s.num_classes},
          {"num_images", s.num_images},
          {"num_boxes", s.num_boxes},
          {"avg_boxes_per_image", s.avg_boxes_per_image},
          {"min_images_per_class", s.min_images_per_class},
          {"max_images_per_class", s.max_images_per_class},
          {"avg_images_per_class", s.avg_images_per_class},
          {"box_size", {s.min_box_size, s.max_box_size}},
          {"box_area_ratio", {s.min_area_ratio, s.max_area_ratio}},
          {"box_wh_ratio", {s.min_aspect, s.max_aspect}}};
}

std::string stats_table(const std::vector<std::pair<std::string, DatasetStats>>& columns) {
  std::ostringstream os;
  auto row = [&](const std::string& label, const std::function<std::string(const DatasetStats&)>& cell) {
    os << std::left << std::setw(22) << label;
    for (const auto& [name, s] : columns) os << std::setw(20) << cell(s);
    os << '\n';
  };
  auto num = [](double v, int prec) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(prec) << v;
    return o.str();
  };
  auto range = [&](double a, double b, int prec) { return "[" + num(a, prec) + ", " + num(b, prec) + "]"; };
  os << std::left << std::setw(22) << "";
  for (const auto& [name, s] : columns) os << std::setw(20) << name;
  os << '\n';
  row("No. Class", [](const DatasetStats& s) { return std::to_string(s.num_classes); });
  row("No. Image", [](const DatasetStats& s) { return std::to_string(s.num_images); });
  row("No. Box", [](const DatasetStats& s) { return std::to_string(s.num_boxes); });
  row("Avg No. Box / Img", [&](const DatasetStats& s) { return num(s.avg_boxes_per_image, 2); });
  row("Min No. Img / Cls", [](const DatasetStats& s) { return std::to_string(s.min_images_per_class); });
  row("Max No. Img / Cls", [](const DatasetStats& s) { return std::to_string(s.max_images_per_class); });
  row("Avg No. Img / Cls", [&](const DatasetStats& s) { return num(s.avg_images_per_class, 2); });
  row("Box Size", [&](const DatasetStats& s) { return range(s.min_box_size, s.max_box_size, 0); });
  row("Box Area Ratio", [&](const DatasetStats& s) { return range(s.min_area_ratio, s.max_area_ratio, 4); });
  row("Box W/H Ratio", [&](const DatasetStats& s) { return range(s.min_aspect, s.max_aspect, 4); });
  return os.str();
}

// ---- synthetic ----------------------------------------------------------

namespace {

using ShapeTest = bool (*)(double u, double v);

bool in_square(double u, double v) { return std::max(std::abs(u), std::abs(v)) <= 1.0; }
bool in_disc(double u, double v) { return u * u + v * v <= 1.0; }
bool in_triangle(double u, double v) { return v <= 1.0 && std::abs(u) <= (v + 1.0) * 0.5; }
bool in_cross(double u, double v) { return in_square(u, v) && (std::abs(u) <= 0.34 || std::abs(v) <= 0.34); }
bool in_ring(double u, double v) {
  const double r2 = u * u + v * v;
  return r2 <= 1.0 && r2 >= 0.36;
}
bool in_diamond(double u, double v) { return std::abs(u) + std::abs(v) <= 1.0; }
bool in_frame(double u, double v) {
  const double m = std::max(std::abs(u), std::abs(v));
  return m <= 1.0 && m >= 0.62;
}
bool in_star(double u, double v) {
  const double k = 0.866 / 1.5;
  const bool up = v <= 0.5 && std::abs(u) <= (v + 1.0) * k;
  const bool down = v >= -0.5 && std::abs(u) <= (1.0 - v) * k;
  return up || down;
}
bool in_ellipse(double u, double v) { return u * u + (v * v) / 0.36 <= 1.0; }
bool in_tee(double u, double v) { return in_square(u, v) && (v <= -0.45 || std::abs(u) <= 0.3); }

struct ShapeDef {
  const char* name;
  ShapeTest inside;
};

const ShapeDef kShapes[] = {{"square", in_square}, {"disc", in_disc},       {"triangle", in_triangle},
                            {"cross", in_cross},   {"ring", in_ring},       {"diamond", in_diamond},
                            {"frame", in_frame},   {"star", in_star},       {"ellipse", in_ellipse},
                            {"tee", in_tee}};

int shape_index(const std::string& name) {
  for (std::size_t i = 0; i < std::size(kShapes); ++i)
    if (name == kShapes[i].name) return static_cast<int>(i);
  return -1;
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(hh);
  const double f = hh - sector;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Category colour: hues spread by the golden ratio over the shape table.
std::array<double, 3> category_colour(int index) {
  return hsv_to_rgb(std::fmod(0.07 + index * 0.618033988749895, 1.0), 0.75, 0.95);
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

struct Placed {
  Box box;
};

// Renders one image; returns the records' boxes.
std::vector<GroundTruthBox> render_image(Image& img, const std::vector<std::string>& categories, const SynthSpec& spec,
                                         Rng& rng) {
  const int S = spec.image_size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.03);
  const double base = 0.25 + 0.2 * unit(rng);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double n = noise(rng);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = base + n;
    }
  for (int k = 0; k < spec.clutter; ++k) {
    const auto col = hsv_to_rgb(unit(rng), 0.5 * unit(rng), 0.4 + 0.5 * unit(rng));
    const int w = 2 + static_cast<int>(unit(rng) * 4), h = 2 + static_cast<int>(unit(rng) * 4);
    const int x0 = static_cast<int>(unit(rng) * (S - w)), y0 = static_cast<int>(unit(rng) * (S - h));
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x)
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[static_cast<std::size_t>(c)];
  }

  std::uniform_int_distribution<int> count_dist(spec.min_objects, spec.max_objects);
  std::uniform_int_distribution<std::size_t> cat_dist(0, categories.size() - 1);
  const int count = count_dist(rng);
  std::vector<Box> occupied;
  std::vector<GroundTruthBox> boxes;
  for (int obj = 0; obj < count; ++obj) {
    const std::string& cat = categories[cat_dist(rng)];
    const int shape = shape_index(cat);
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double size = spec.min_object_size + unit(rng) * (spec.max_object_size - spec.min_object_size);
      const double x0 = unit(rng) * (S - size), y0 = unit(rng) * (S - size);
      const Box frame{x0, y0, x0 + size, y0 + size};
      const Box margin{x0 - 3, y0 - 3, x0 + size + 3, y0 + size + 3};
      if (std::any_of(occupied.begin(), occupied.end(), [&](const Box& b) { return iou(b, margin) > 0.0; })) continue;
      occupied.push_back(frame);
      auto colour = category_colour(shape);
      for (auto& ch : colour) ch = std::clamp(ch + (unit(rng) - 0.5) * 0.12, 0.0, 1.0);
      int mx0 = S, my0 = S, mx1 = -1, my1 = -1;
      const int px0 = std::max(0, static_cast<int>(std::floor(x0))), px1 = std::min(S, static_cast<int>(std::ceil(x0 + size)));
      const int py0 = std::max(0, static_cast<int>(std::floor(y0))), py1 = std::min(S, static_cast<int>(std::ceil(y0 + size)));
      for (int y = py0; y < py1; ++y)
        for (int x = px0; x < px1; ++x) {
          int hits = 0;
          for (int sy = 0; sy < 2; ++sy)
            for (int sx = 0; sx < 2; ++sx) {
              const double u = 2.0 * ((x + 0.25 + 0.5 * sx) - x0) / size - 1.0;
              const double v = 2.0 * ((y + 0.25 + 0.5 * sy) - y0) / size - 1.0;
              hits += kShapes[shape].inside(u, v) ? 1 : 0;
            }
          if (hits == 0) continue;
          const double a = hits / 4.0;
          for (int c = 0; c < 3; ++c) {
            img.at(c, y, x) = (1 - a) * img.at(c, y, x) + a * colour[static_cast<std::size_t>(c)];
          }
          mx0 = std::min(mx0, x);
          my0 = std::min(my0, y);
          mx1 = std::max(mx1, x);
          my1 = std::max(my1, y);
        }
      if (mx1 >= mx0 && my1 >= my0) {
        boxes.push_back({{static_cast<double>(mx0), static_cast<double>(my0), static_cast<double>(mx1 + 1),
                          static_cast<double>(my1 + 1)},
                         cat});
      }
      break;
    }
  }
  for (double& v : img.pixels.values()) v = quantize(v);
  return boxes;
}

}  // namespace

const std::vector<std::string>& synthetic_shapes() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& s : kShapes) n.emplace_back(s.name);
    return n;
  }();
  return names;
}

SyntheticDataset generate_synthetic_dataset(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.test_categories.size() < 2) throw DataError("synthetic dataset needs at least 2 test categories");
  if (spec.train_categories.empty()) throw DataError("synthetic dataset needs training categories");
  for (const auto& c : spec.train_categories) {
    if (shape_index(c) < 0) throw DataError("unknown synthetic shape '" + c + "'");
    if (std::find(spec.test_categories.begin(), spec.test_categories.end(), c) != spec.test_categories.end()) {
      throw DataError("category '" + c + "' is in both train and test sets");
    }
  }
  for (const auto& c : spec.test_categories)
    if (shape_index(c) < 0) throw DataError("unknown synthetic shape '" + c + "'");
  if (spec.image_size < 16 || spec.min_objects < 1 || spec.max_objects < spec.min_objects ||
      spec.min_object_size < 2 || spec.max_object_size < spec.min_object_size ||
      spec.max_object_size >= spec.image_size) {
    throw DataError("invalid synthetic dataset geometry");
  }

  SyntheticDataset out;
  out.train.split = "train";
  out.test.split = "test";
  Rng rng(seed);
  auto make = [&](DatasetManifest& m, const std::vector<std::string>& cats, int n, const std::string& dir) {
    for (int i = 0; i < n; ++i) {
      Image img(3, spec.image_size, spec.image_size);
      ImageRecord rec;
      std::ostringstream name;
      name << dir << '/' << std::setw(6) << std::setfill('0') << i << ".ppm";
      rec.image = name.str();
      rec.width = rec.height = spec.image_size;
      rec.boxes = render_image(img, cats, spec, rng);
      out.images.emplace(rec.image, std::move(img));
      m.records.push_back(std::move(rec));
    }
  };
  make(out.train, spec.train_categories, spec.train_images, "train");
  make(out.test, spec.test_categories, spec.test_images, "test");
  return out;
}

void write_synthetic_dataset(const SyntheticDataset& data, const std::filesystem::path& root) {
  std::filesystem::create_directories(root / "train");
  std::filesystem::create_directories(root / "test");
  for (const auto& [path, img] : data.images) write_ppm(root / path, img);
  write_manifest(root / "train.jsonl", data.train);
  write_manifest(root / "test.jsonl", data.test);
}

// ---- image store --------------------------------------------------------

void ImageStore::insert(const std::string& key, Image image) { cache_.insert_or_assign(key, std::move(image)); }

const Image& ImageStore::get(const std::string& key) {
  if (const auto it = cache_.find(key); it != cache_.end()) return it->second;
  return cache_.emplace(key, read_pnm(root_ / key)).first->second;
}

}  // namespace fsdet

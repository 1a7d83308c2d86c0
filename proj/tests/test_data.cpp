#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "fsdet/data.hpp"
#include "oracles.hpp"

using namespace fsdet;
using namespace fsdet::testing;
namespace fs = std::filesystem;

namespace {

ImageRecord record(std::string name, int w, int h, std::vector<GroundTruthBox> boxes) {
  return {std::move(name), w, h, std::move(boxes)};
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Manifest, JsonLinesRoundTrip) {
  DatasetManifest m;
  m.records.push_back(record("a.ppm", 40, 30, {{{1, 2, 10.5, 20}, "cat"}, {{0, 0, 40, 30}, "dog"}}));
  m.records.push_back(record("b.ppm", 10, 10, {}));
  const fs::path dir = temp_dir("fsdet_manifest");
  write_manifest(dir / "m.jsonl", m);
  const DatasetManifest back = read_manifest(dir / "m.jsonl", "train");
  ASSERT_EQ(back.records.size(), 2u);
  EXPECT_EQ(back.split, "train");
  EXPECT_EQ(back.records[0].boxes[0].box, m.records[0].boxes[0].box);
  EXPECT_EQ(back.records[0].boxes[1].category, "dog");
  EXPECT_EQ(back.categories(), (std::vector<std::string>{"cat", "dog"}));
  fs::remove_all(dir);
}

TEST(Manifest, MalformedLineNamesTheLine) {
  const fs::path dir = temp_dir("fsdet_manifest_bad");
  {
    std::ofstream out(dir / "m.jsonl");
    out << R"({"image":"a","width":4,"height":4,"boxes":[]})" << "\n{oops\n";
  }
  try {
    read_manifest(dir / "m.jsonl");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
  EXPECT_THROW(read_manifest(dir / "missing.jsonl"), DataError);
  fs::remove_all(dir);
}

TEST(Manifest, ValidateRejectsBoxesOutsideTheImage) {
  DatasetManifest m;
  m.records.push_back(record("a", 10, 10, {{{0, 0, 11, 5}, "c"}}));
  EXPECT_THROW(m.validate(), DataError);
  m.records[0].boxes[0].box.x2 = 10;
  EXPECT_NO_THROW(m.validate());
}

TEST(CocoConversion, BoxesAliasesAndCrowds) {
  const auto coco = nlohmann::json::parse(R"({
    "images": [{"id": 7, "file_name": "x.jpg", "width": 50, "height": 40}],
    "categories": [{"id": 1, "name": "motorbike"}, {"id": 2, "name": "person"}],
    "annotations": [
      {"image_id": 7, "category_id": 1, "bbox": [5, 6, 10, 20]},
      {"image_id": 7, "category_id": 2, "bbox": [45, 0, 10, 10]},
      {"image_id": 7, "category_id": 2, "bbox": [0, 0, 5, 5], "iscrowd": 1}
    ]})");
  const DatasetManifest m = convert_coco(coco, {{"motorbike", "motorcycle"}});
  ASSERT_EQ(m.records.size(), 1u);
  ASSERT_EQ(m.records[0].boxes.size(), 2u);
  EXPECT_EQ(m.records[0].boxes[0].category, "motorcycle");
  EXPECT_EQ(m.records[0].boxes[0].box, (Box{5, 6, 15, 26}));
  EXPECT_EQ(m.records[0].boxes[1].box, (Box{45, 0, 50, 10}));  // clipped
}

TEST(QueryPrep, ShortSideOrLongCapDecides) {
  double s = 0;
  EXPECT_EQ(prepared_size(800, 600, {600, 1000}, &s), (std::pair<int, int>{800, 600}));
  EXPECT_DOUBLE_EQ(s, 1.0);
  EXPECT_EQ(prepared_size(400, 300, {600, 1000}, &s), (std::pair<int, int>{800, 600}));
  EXPECT_DOUBLE_EQ(s, 2.0);
  // A panorama would exceed the long cap at short side 600.
  EXPECT_EQ(prepared_size(2000, 500, {600, 1000}, &s), (std::pair<int, int>{1000, 250}));
  EXPECT_THROW(prepared_size(0, 5, {600, 1000}), DataError);
}

TEST(QueryPrep, ScaleMapsBoxesBackToOriginalPixels) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const int w = uniform_int(rng, 20, 300), h = uniform_int(rng, 20, 300);
    const Image img(random_tensor({3, h, w}, rng, 0, 1));
    const PreparedQuery q = prepare_query(img, {64, 100});
    EXPECT_LE(std::max(q.image.width(), q.image.height()), 100);
    EXPECT_NEAR(q.image.width() / q.scale, w, 1.0 / q.scale);
    EXPECT_NEAR(q.image.height() / q.scale, h, 1.0 / q.scale);
  }
}

TEST(SupportPrep, SquareOutputZeroPaddingAndObjectLocation) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const int w = uniform_int(rng, 20, 80), h = uniform_int(rng, 20, 80);
    const Image img(random_tensor({3, h, w}, rng, 0.1, 1));
    const Box b = random_box(rng, w, h, 3);
    const SupportCrop c = prepare_support(img, b, {32, 4});
    EXPECT_EQ(c.image.width(), 32);
    EXPECT_EQ(c.image.height(), 32);
    const auto& p = c.output_padding;
    EXPECT_EQ(p.top + p.bottom == 0 || p.left + p.right == 0, true);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const bool pad = y < p.top || y >= 32 - p.bottom || x < p.left || x >= 32 - p.right;
        if (pad) EXPECT_EQ(c.image.at(0, y, x), 0.0);
        else EXPECT_GT(c.image.at(0, y, x), 0.0);
      }
    EXPECT_GE(c.object_in_crop.x1, p.left - 1e-9);
    EXPECT_LE(c.object_in_crop.x2, 32 - p.right + 1e-9);
    // The object keeps its aspect ratio up to rounding of the resized content.
    EXPECT_NEAR(c.object_in_crop.width() / c.object_in_crop.height(), b.width() / b.height(),
                0.1 * b.width() / b.height());
  }
  EXPECT_THROW(prepare_support(Image(3, 10, 10), {5, 5, 12, 8}), DataError);
}

TEST(FilterSmallBoxes, BoundaryAtFiveTenThousandths) {
  // 100 x 100 image: area ratio = box area / 10000.
  DatasetManifest m;
  m.records.push_back(record("keep", 100, 100, {{{0, 0, 3, 3}, "a"}}));         // 0.0009
  m.records.push_back(record("edge", 100, 100, {{{0, 0, 5, 1}, "a"}}));         // 0.0005
  m.records.push_back(record("drop", 100, 100, {{{0, 0, 4.9, 1}, "a"}, {{10, 10, 50, 50}, "b"}}));  // 0.00049
  const FilterReport r = filter_small_boxes(m);
  ASSERT_EQ(r.manifest.records.size(), 2u);
  EXPECT_EQ(r.manifest.records[0].image, "keep");
  EXPECT_EQ(r.manifest.records[1].image, "edge");
  EXPECT_EQ(r.removed_images, 1);
  EXPECT_EQ(r.removed_boxes, 2);
}

TEST(FilterSmallBoxes, IdempotentAndNoSmallBoxSurvives) {
  Rng rng(3);
  DatasetManifest m;
  for (int i = 0; i < 200; ++i) {
    std::vector<GroundTruthBox> boxes;
    for (int k = 0; k < uniform_int(rng, 1, 3); ++k) boxes.push_back({random_box(rng, 200, 150, 0.5), "c"});
    m.records.push_back(record("i" + std::to_string(i), 200, 150, boxes));
  }
  const auto once = filter_small_boxes(m, 0.002);
  const auto twice = filter_small_boxes(once.manifest, 0.002);
  EXPECT_EQ(twice.removed_images, 0);
  EXPECT_EQ(once.kept_images + once.removed_images, 200);
  for (const auto& r : once.manifest.records)
    for (const auto& b : r.boxes) EXPECT_GE(b.box.area() / (200.0 * 150.0), 0.002);
}

TEST(TaxonomySplit, MatchesBruteForceOnRandomTaxonomies) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const SplitInstance in = random_split_instance(rng);
    const auto& cats = in.categories;
    const TaxonomySplit s = taxonomy_split(cats, in.taxonomy, in.pool, in.n_test);
    EXPECT_EQ(s.test, split_oracle(in.taxonomy, cats, in.pool, in.n_test)) << "taxonomy " << t;
    std::set<std::string> all(s.train.begin(), s.train.end());
    for (const auto& c : s.test) EXPECT_TRUE(all.insert(c).second) << "splits overlap on " << c;
    EXPECT_EQ(all.size(), cats.size());
  }
}

TEST(TaxonomySplit, InvalidTaxonomiesAreDataErrors) {
  Taxonomy cyc{"a", {{"a", "b"}, {"b", "c"}, {"c", "b"}}};
  EXPECT_THROW(cyc.validate(), DataError);
  Taxonomy split{"a", {{"a", "b"}, {"c", "d"}}};
  EXPECT_THROW(split.validate(), DataError);
  Taxonomy ok{"a", {{"a", "b"}, {"a", "c"}}};
  EXPECT_THROW(taxonomy_split({"b", "x"}, ok, {"b"}, 1), DataError);
  EXPECT_THROW(taxonomy_split({"b", "c"}, ok, {"b"}, 2), DataError);
  EXPECT_EQ(Taxonomy::from_json(ok.to_json()).edges, ok.edges);
}

TEST(ApplySplit, MixedImagesGoToTestWithTestBoxesOnly) {
  DatasetManifest m;
  m.records.push_back(record("tr", 10, 10, {{{0, 0, 5, 5}, "a"}}));
  m.records.push_back(record("mix", 10, 10, {{{0, 0, 5, 5}, "a"}, {{5, 5, 9, 9}, "z"}}));
  m.records.push_back(record("none", 10, 10, {{{0, 0, 5, 5}, "q"}}));
  TaxonomySplit s;
  s.train = {"a"};
  s.test = {"z"};
  const auto [tr, te] = apply_split(m, s);
  ASSERT_EQ(tr.records.size(), 1u);
  ASSERT_EQ(te.records.size(), 1u);
  EXPECT_EQ(te.records[0].image, "mix");
  ASSERT_EQ(te.records[0].boxes.size(), 1u);
  EXPECT_EQ(te.records[0].boxes[0].category, "z");
}

TEST(Synthetic, DisjointCategoriesAndBoxesInsideImages) {
  SynthSpec spec;
  spec.train_images = 30;
  spec.test_images = 10;
  const SyntheticDataset d = generate_synthetic_dataset(spec, 5);
  EXPECT_EQ(d.train.categories(), (std::vector<std::string>{"cross", "diamond", "disc", "ring", "square", "triangle"}));
  EXPECT_EQ(d.test.categories(), (std::vector<std::string>{"frame", "star"}));
  EXPECT_EQ(d.train.records.size(), 30u);
  for (const auto* m : {&d.train, &d.test}) {
    EXPECT_NO_THROW(m->validate());
    for (const auto& r : m->records) {
      EXPECT_TRUE(d.images.count(r.image));
      EXPECT_GE(r.boxes.size(), 1u);
      EXPECT_LE(r.boxes.size(), 3u);
      for (const auto& b : r.boxes) {
        // Boxes are tight around the drawn mask, inside a frame of the drawn size.
        EXPECT_GT(b.box.area(), 0.0);
        EXPECT_LE(b.box.width(), spec.max_object_size + 2.0);
        EXPECT_LE(b.box.height(), spec.max_object_size + 2.0);
        EXPECT_GE(std::max(b.box.width(), b.box.height()), 0.5 * spec.min_object_size);
      }
    }
  }
}

TEST(Synthetic, SameSeedSameData) {
  SynthSpec spec;
  spec.train_images = 5;
  spec.test_images = 3;
  const auto a = generate_synthetic_dataset(spec, 9), b = generate_synthetic_dataset(spec, 9);
  for (const auto& [k, img] : a.images) EXPECT_EQ(img.pixels.storage(), b.images.at(k).pixels.storage());
  const auto c = generate_synthetic_dataset(spec, 10);
  EXPECT_NE(a.images.begin()->second.pixels.storage(), c.images.begin()->second.pixels.storage());
}

TEST(Synthetic, BadSpecsAreDataErrors) {
  SynthSpec spec;
  spec.test_categories = {"frame"};
  EXPECT_THROW(generate_synthetic_dataset(spec, 1), DataError);
  spec.test_categories = {"frame", "square"};
  EXPECT_THROW(generate_synthetic_dataset(spec, 1), DataError);
  spec.test_categories = {"frame", "hexagon"};
  EXPECT_THROW(generate_synthetic_dataset(spec, 1), DataError);
}

TEST(Synthetic, WrittenDatasetReadsBack) {
  SynthSpec spec;
  spec.train_images = 3;
  spec.test_images = 2;
  spec.image_size = 32;
  spec.min_object_size = 8;
  spec.max_object_size = 12;
  const auto d = generate_synthetic_dataset(spec, 2);
  const fs::path dir = temp_dir("fsdet_synth");
  write_synthetic_dataset(d, dir);
  const auto train = read_manifest(dir / "train.jsonl");
  ImageStore store(dir);
  const Image& img = store.get(train.records[0].image);
  const Image& orig = d.images.at(train.records[0].image);
  ASSERT_EQ(img.pixels.shape(), orig.pixels.shape());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(img.pixels[i], orig.pixels[i], 1e-12);
  fs::remove_all(dir);
}

TEST(Stats, CountsAndExtremes) {
  DatasetManifest m;
  m.records.push_back(record("a", 100, 100, {{{0, 0, 10, 40}, "x"}, {{0, 0, 20, 20}, "y"}}));
  m.records.push_back(record("b", 100, 100, {{{0, 0, 30, 30}, "x"}}));
  const DatasetStats s = dataset_stats(m);
  EXPECT_EQ(s.num_classes, 2);
  EXPECT_EQ(s.num_images, 2);
  EXPECT_EQ(s.num_boxes, 3);
  EXPECT_DOUBLE_EQ(s.avg_boxes_per_image, 1.5);
  EXPECT_EQ(s.min_images_per_class, 1);
  EXPECT_EQ(s.max_images_per_class, 2);
  EXPECT_DOUBLE_EQ(s.min_box_size, 20.0);
  EXPECT_DOUBLE_EQ(s.max_box_size, 30.0);
  EXPECT_DOUBLE_EQ(s.min_aspect, 0.25);
  EXPECT_DOUBLE_EQ(s.max_area_ratio, 0.09);
  EXPECT_EQ(stats_to_json(s).at("num_boxes"), 3);
}

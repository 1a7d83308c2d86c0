// Command-line front end: train, evaluate, detect, ablation and the dataset
// tools. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fsdet/config.hpp"
#include "fsdet/experiment.hpp"

namespace fs = std::filesystem;
using namespace fsdet;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::string output_dir;
  std::string data_dir;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_path, "Experiment configuration file");
  cmd->add_option("--set", o.sets, "Override a key, e.g. --set training.base_lr=0.004");
  cmd->add_option("--output-dir", o.output_dir, "Directory for run artifacts");
  cmd->add_option("--data-dir", o.data_dir, "Dataset directory with train.jsonl / test.jsonl");
  cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  cmd->add_option("--seed", o.seed, "Set every seed to this value");
}

/// Base configuration, then the file, --set overrides, environment and flags.
ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig cfg = o.config_path.empty() ? desk_config() : load_config(o.config_path);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    const auto dot = s.rfind('.', eq);
    if (eq == std::string::npos || dot == std::string::npos) {
      throw ConfigError("--set expects section.key=value, got '" + s + "'");
    }
    cfg = parse_config("[" + s.substr(0, dot) + "]\n" + s.substr(dot + 1, eq - dot - 1) + " = " + s.substr(eq + 1), cfg);
  }
  apply_env_overrides(cfg);
  if (!o.output_dir.empty()) cfg.paths.output_dir = o.output_dir;
  if (!o.data_dir.empty()) cfg.paths.data_dir = o.data_dir;
  if (!o.checkpoint.empty()) cfg.paths.checkpoint = o.checkpoint;
  if (o.seed) cfg.seeds = {*o.seed, *o.seed, *o.seed, *o.seed};
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

Box parse_box(const std::string& text) {
  Box b;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream is(text);
  if (!(is >> b.x1 >> c1 >> b.y1 >> c2 >> b.x2 >> c3 >> b.y2) || c1 != ',' || c2 != ',' || c3 != ',') {
    throw ConfigError("box must be x1,y1,x2,y2: '" + text + "'");
  }
  return b;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot object detection with an attention RPN and a multi-relation detector"};
  app.require_subcommand(1);

  // train
  CommonOptions train_o;
  bool resume = false;
  std::optional<int> train_iterations;
  double time_budget = 0.0;
  auto* train = app.add_subcommand("train", "Contrastive training; writes checkpoint, loss trace and resolved config");
  add_common(train, train_o);
  train->add_flag("--resume", resume, "Continue from --checkpoint");
  train->add_option("--iterations", train_iterations, "Total iteration count");
  train->add_option("--time-budget", time_budget, "Stop after this many seconds");

  // evaluate
  CommonOptions eval_o;
  std::optional<std::string> protocol;
  std::optional<int> ways, shots, episodes;
  std::string report_path;
  bool report_episodes = false;
  auto* evaluate = app.add_subcommand("evaluate", "Episodic or full-way evaluation of a checkpoint");
  add_common(evaluate, eval_o);
  evaluate->add_option("--protocol", protocol, "episodic | fullway")->check(CLI::IsMember({"episodic", "fullway"}));
  evaluate->add_option("--ways", ways, "Categories per episode");
  evaluate->add_option("--shots", shots, "Supports per category");
  evaluate->add_option("--episodes", episodes, "Number of episodes");
  evaluate->add_option("--report", report_path, "EvalReport JSON path (default <output-dir>/report.json)");
  evaluate->add_flag("--per-episode", report_episodes, "Include per-episode metrics in the JSON");

  // detect
  CommonOptions det_o;
  std::string det_category = "novel";
  std::vector<std::string> det_supports;
  std::string det_queries, det_out = "detections.jsonl", det_overlays;
  auto* detect = app.add_subcommand("detect", "Detect a category in a directory of images from K supports");
  add_common(detect, det_o);
  detect->add_option("--category", det_category, "Name written to the output");
  detect->add_option("--support", det_supports, "Support as image.ppm:x1,y1,x2,y2 (repeat for K shots)")->required();
  detect->add_option("--queries", det_queries, "Query directory or image")->required();
  detect->add_option("--out", det_out, "JSON-lines output");
  detect->add_option("--overlay-dir", det_overlays, "Write annotated copies of the queries here");

  // ablation
  CommonOptions abl_o;
  std::string preset;
  std::optional<int> abl_iterations, abl_episodes;
  auto* ablation = app.add_subcommand("ablation", "Train and evaluate an ablation grid");
  add_common(ablation, abl_o);
  ablation->add_option("preset", preset, "relation-heads | training-strategy")
      ->required()
      ->check(CLI::IsMember({"relation-heads", "training-strategy"}));
  ablation->add_option("--iterations", abl_iterations, "Training iterations per row");
  ablation->add_option("--episodes", abl_episodes, "Evaluation episodes per row");

  // build-dataset
  std::string bd_manifest, bd_taxonomy, bd_pool, bd_out;
  int bd_test = 0;
  double bd_ratio = kMinBoxAreaRatio;
  auto* build = app.add_subcommand("build-dataset", "Filter small boxes, split by taxonomy distance, report statistics");
  build->add_option("--manifest", bd_manifest, "Input manifest (JSON lines)")->required();
  build->add_option("--taxonomy", bd_taxonomy, "Taxonomy JSON {root, edges:[[parent, child]]}")->required();
  build->add_option("--train-pool", bd_pool, "Comma-separated categories seeding the training side")->required();
  build->add_option("--test-categories", bd_test, "Number of test categories")->required();
  build->add_option("--min-area-ratio", bd_ratio, "Images with a smaller box are dropped");
  build->add_option("--out-dir", bd_out, "Output directory")->required();

  // convert
  std::string cv_coco, cv_aliases, cv_out;
  auto* convert = app.add_subcommand("convert", "COCO-style annotations to a manifest");
  convert->add_option("--coco", cv_coco, "COCO-style annotation JSON")->required();
  convert->add_option("--aliases", cv_aliases, "JSON object mapping names to canonical names");
  convert->add_option("--out", cv_out, "Output manifest")->required();

  // synth
  CommonOptions syn_o;
  std::string syn_out;
  auto* synth = app.add_subcommand("synth", "Render the synthetic shape dataset to disk");
  add_common(synth, syn_o);
  synth->add_option("--out-dir", syn_out, "Output directory")->required();

  // stats
  std::vector<std::string> st_manifests;
  std::string st_json;
  auto* stats = app.add_subcommand("stats", "Dataset statistics as JSON and a text table");
  stats->add_option("manifests", st_manifests, "Manifests (one table column each)")->required();
  stats->add_option("--json", st_json, "Write the JSON here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) {
      ExperimentConfig cfg = resolve(train_o);
      if (train_iterations) {
        cfg.training.schedule.total_iterations = *train_iterations;
        cfg.validate();
      }
      ExperimentData data = load_experiment_data(cfg);
      auto model = make_model(cfg);
      TrainOptions opts;
      opts.resume = resume;
      opts.time_budget_seconds = time_budget;
      opts.on_step = [](const LossBundle& b) {
        if ((b.iteration + 1) % 100 == 0) std::cerr << loss_trace_row(b) << '\n';
      };
      const TrainOutcome out = run_train(cfg, *model, data, opts);
      std::cout << "iterations " << out.start_iteration << " -> " << out.end_iteration << " in " << out.seconds
                << " s\ncheckpoint " << out.checkpoint.string() << "\nloss trace " << out.loss_trace.string()
                << "\nconfig " << out.resolved_config.string() << '\n';
    } else if (*evaluate) {
      ExperimentConfig cfg = resolve(eval_o);
      if (protocol) cfg.eval.protocol = *protocol;
      if (ways) cfg.eval.ways = *ways;
      if (shots) cfg.eval.shots = *shots;
      if (episodes) cfg.eval.episodes = *episodes;
      cfg.validate();
      ExperimentData data = load_experiment_data(cfg);
      auto model = make_model(cfg);
      load_model_weights(*model, cfg.paths.checkpoint);
      const EvalReport report = run_evaluate(cfg, *model, data);
      const fs::path path = report_path.empty() ? fs::path(cfg.paths.output_dir) / "report.json" : fs::path(report_path);
      write_file(path, report_to_json(report, report_episodes).dump(2) + "\n");
      std::cout << report_table(report) << "report " << path.string() << '\n';
    } else if (*detect) {
      const ExperimentConfig cfg = resolve(det_o);
      auto model = make_model(cfg);
      load_model_weights(*model, cfg.paths.checkpoint);
      DetectRequest req;
      req.category = det_category;
      for (const auto& s : det_supports) {
        const auto colon = s.rfind(':');
        if (colon == std::string::npos) throw ConfigError("--support expects image:x1,y1,x2,y2, got '" + s + "'");
        req.supports.push_back({s.substr(0, colon), parse_box(s.substr(colon + 1))});
      }
      req.queries = det_queries;
      req.output = det_out;
      if (!det_overlays.empty()) req.overlay_dir = fs::path(det_overlays);
      const std::size_t n = run_detect(cfg, *model, req);
      std::cout << n << " detections written to " << det_out << '\n';
    } else if (*ablation) {
      ExperimentConfig cfg = resolve(abl_o);
      if (abl_iterations) {
        cfg.training.schedule.total_iterations = *abl_iterations;
        cfg.training.schedule.decay_step = std::min(cfg.training.schedule.decay_step, *abl_iterations);
      }
      if (abl_episodes) cfg.eval.episodes = *abl_episodes;
      // Ablation rows evaluate 5-way 5-shot, capped to the available categories.
      cfg.eval.ways = 5;
      cfg.eval.shots = 5;
      cfg.validate();
      const auto rows = run_ablation(cfg, preset, &std::cerr);
      const std::string table = ablation_table(preset, rows);
      write_file(fs::path(cfg.paths.output_dir) / (preset + ".json"), ablation_to_json(preset, rows).dump(2) + "\n");
      write_file(fs::path(cfg.paths.output_dir) / (preset + ".txt"), table);
      std::cout << table;
    } else if (*build) {
      const DatasetManifest manifest = read_manifest(bd_manifest);
      manifest.validate();
      const FilterReport filtered = filter_small_boxes(manifest, bd_ratio);
      const Taxonomy taxonomy = Taxonomy::from_json(read_json(bd_taxonomy));
      const TaxonomySplit split =
          taxonomy_split(filtered.manifest.categories(), taxonomy, split_list(bd_pool), bd_test);
      auto [train_m, test_m] = apply_split(filtered.manifest, split);
      const fs::path out = bd_out;
      fs::create_directories(out);
      write_manifest(out / "train.jsonl", train_m);
      write_manifest(out / "test.jsonl", test_m);
      const DatasetStats tr = dataset_stats(train_m), te = dataset_stats(test_m);
      const nlohmann::json j = {{"filter",
                                 {{"kept_images", filtered.kept_images},
                                  {"removed_images", filtered.removed_images},
                                  {"removed_boxes", filtered.removed_boxes}}},
                                {"split", {{"train", split.train}, {"test", split.test}}},
                                {"train", stats_to_json(tr)},
                                {"test", stats_to_json(te)}};
      write_file(out / "stats.json", j.dump(2) + "\n");
      std::cout << stats_table({{"Train", tr}, {"Test", te}});
    } else if (*convert) {
      std::map<std::string, std::string> aliases;
      if (!cv_aliases.empty()) aliases = read_json(cv_aliases).get<std::map<std::string, std::string>>();
      const DatasetManifest m = convert_coco(read_json(cv_coco), aliases);
      write_manifest(cv_out, m);
      std::cout << m.records.size() << " images written to " << cv_out << '\n';
    } else if (*synth) {
      const ExperimentConfig cfg = resolve(syn_o);
      const SyntheticDataset data = generate_synthetic_dataset(cfg.synthetic, cfg.seeds.data);
      write_synthetic_dataset(data, syn_out);
      std::cout << data.train.records.size() << " train and " << data.test.records.size() << " test images written to "
                << syn_out << '\n';
    } else if (*stats) {
      std::vector<std::pair<std::string, DatasetStats>> cols;
      nlohmann::json j = nlohmann::json::object();
      for (const auto& path : st_manifests) {
        const DatasetManifest m = read_manifest(path);
        const std::string name = fs::path(path).stem().string();
        cols.emplace_back(name, dataset_stats(m));
        j[name] = stats_to_json(cols.back().second);
      }
      if (st_json.empty()) {
        std::cout << j.dump(2) << '\n';
      } else {
        write_file(st_json, j.dump(2) + "\n");
      }
      std::cout << stats_table(cols);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

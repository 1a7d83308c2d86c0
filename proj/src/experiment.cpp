#include "fsdet/experiment.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace fsdet {

namespace fs = std::filesystem;

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData data;
  if (cfg.paths.data_dir.empty()) {
    SyntheticDataset synth = generate_synthetic_dataset(cfg.synthetic, cfg.seeds.data);
    data.train = std::move(synth.train);
    data.test = std::move(synth.test);
    for (auto& [key, img] : synth.images) data.images.insert(key, std::move(img));
    return data;
  }
  const fs::path root = cfg.paths.data_dir;
  for (const char* name : {"train.jsonl", "test.jsonl"}) {
    if (!fs::exists(root / name)) throw DataError("dataset directory " + root.string() + " has no " + name);
  }
  data.train = read_manifest(root / "train.jsonl", "train");
  data.test = read_manifest(root / "test.jsonl", "test");
  data.train.validate();
  data.test.validate();
  data.images = ImageStore(root);
  return data;
}

std::unique_ptr<FewShotModel> make_model(const ExperimentConfig& cfg) {
  return std::make_unique<FewShotModel>(cfg.model, cfg.seeds.init);
}

namespace {

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

void load_model_weights(FewShotModel& model, const fs::path& checkpoint) {
  if (checkpoint.empty()) throw DataError("no checkpoint given");
  if (!fs::exists(checkpoint)) throw DataError("checkpoint not found: " + checkpoint.string());
  restore(model.params(), load_checkpoint(checkpoint));
}

TrainOutcome run_train(const ExperimentConfig& cfg, FewShotModel& model, ExperimentData& data,
                       const TrainOptions& opts) {
  cfg.validate();
  TrainingData tdata(data.train, data.images, model.config());
  Trainer trainer(model, cfg.training, tdata, cfg.seeds.train);
  model.set_attention(cfg.model.rpn.attention);
  model.set_heads(cfg.model.relation.heads);

  TrainOutcome out;
  const fs::path dir = cfg.paths.output_dir;
  if (opts.write_artifacts) {
    fs::create_directories(dir);
    out.checkpoint = dir / kCheckpointFile;
    out.loss_trace = dir / kLossTraceFile;
    out.resolved_config = dir / kResolvedConfigFile;
    write_text(out.resolved_config, resolved_config_text(cfg));
  }

  if (opts.resume) {
    if (cfg.paths.checkpoint.empty()) throw ConfigError("resume requested without paths.checkpoint");
    if (!fs::exists(cfg.paths.checkpoint)) throw DataError("checkpoint not found: " + cfg.paths.checkpoint);
    const Checkpoint ckpt = load_checkpoint(cfg.paths.checkpoint);
    trainer.set_iteration(restore_training(model, &trainer.optimizer(), ckpt));
    if (!ckpt.metadata.empty()) {
      const auto meta = nlohmann::json::parse(ckpt.metadata, nullptr, false);
      if (meta.is_object() && meta.contains("rng")) {
        std::istringstream is(meta["rng"].get<std::string>());
        is >> trainer.rng();
      }
    }
  }
  out.start_iteration = trainer.iteration();

  const auto t0 = std::chrono::steady_clock::now();
  out.trace = trainer.run([&](const LossBundle& b) {
    if (opts.on_step) opts.on_step(b);
    if (opts.time_budget_seconds > 0.0) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (s >= opts.time_budget_seconds) {
        out.stopped_by_budget = trainer.iteration() < cfg.training.schedule.total_iterations;
        return false;
      }
    }
    return true;
  });
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.end_iteration = trainer.iteration();

  if (opts.write_artifacts) {
    const nlohmann::json meta = {{"name", cfg.name}, {"rng", rng_state(trainer.rng())}};
    save_checkpoint(out.checkpoint, training_checkpoint(model, trainer.optimizer(), out.end_iteration, meta.dump()));
    write_loss_trace(out.loss_trace, out.trace, opts.resume && fs::exists(out.loss_trace));
  }
  return out;
}

EvalReport run_evaluate(const ExperimentConfig& cfg, const FewShotModel& model, ExperimentData& data) {
  Rng rng(cfg.seeds.eval);
  ModelDetector detector(model, data.test, data.images, cfg.eval.detect);
  EvalReport report;
  if (cfg.eval.protocol == "fullway") {
    report = full_way_evaluate(detector, data.test, cfg.eval.shots, rng);
  } else {
    int ways = cfg.eval.ways;
    const int available = static_cast<int>(data.test.categories().size());
    if (cfg.eval.cap_ways) ways = std::min(ways, available);
    const auto episodes =
        sample_episodes(data.test, ways, cfg.eval.shots, cfg.eval.episodes, rng, cfg.eval.queries_per_category);
    report = evaluate_episodes(detector, data.test, episodes);
  }
  report.seed = cfg.seeds.eval;
  return report;
}

// ---- detection ----------------------------------------------------------

namespace {

std::vector<fs::path> list_queries(const fs::path& where) {
  std::vector<fs::path> out;
  if (fs::is_regular_file(where)) {
    out.push_back(where);
    return out;
  }
  if (!fs::is_directory(where)) throw DataError("query path not found: " + where.string());
  for (const auto& e : fs::directory_iterator(where)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension().string();
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void draw_box(Image& img, const Box& b, std::array<double, 3> color) {
  const int x1 = std::clamp(static_cast<int>(std::floor(b.x1)), 0, img.width() - 1);
  const int x2 = std::clamp(static_cast<int>(std::ceil(b.x2)) - 1, 0, img.width() - 1);
  const int y1 = std::clamp(static_cast<int>(std::floor(b.y1)), 0, img.height() - 1);
  const int y2 = std::clamp(static_cast<int>(std::ceil(b.y2)) - 1, 0, img.height() - 1);
  auto put = [&](int y, int x) {
    for (int c = 0; c < img.channels(); ++c) img.at(c, y, x) = color[static_cast<std::size_t>(std::min(c, 2))];
  };
  for (int x = x1; x <= x2; ++x) {
    put(y1, x);
    put(y2, x);
  }
  for (int y = y1; y <= y2; ++y) {
    put(y, x1);
    put(y, x2);
  }
}

}  // namespace

std::size_t run_detect(const ExperimentConfig& cfg, const FewShotModel& model, const DetectRequest& request) {
  if (request.supports.empty()) throw DataError("detect needs at least one support");
  std::vector<SupportCrop> crops;
  for (const auto& s : request.supports) {
    const Image img = read_pnm(s.image);
    if (!(s.box.x2 > s.box.x1 && s.box.y2 > s.box.y1) || s.box.x1 < 0 || s.box.y1 < 0 ||
        s.box.x2 > img.width() || s.box.y2 > img.height()) {
      throw DataError("support box outside " + s.image.string());
    }
    crops.push_back(prepare_support(img, s.box, cfg.model.support));
  }
  const SupportEncoding support = [&] {
    ag::NoGradGuard guard;
    return model.encode_support(crops, request.category);
  }();

  const auto queries = list_queries(request.queries);
  if (!request.output.parent_path().empty()) fs::create_directories(request.output.parent_path());
  std::ofstream out(request.output);
  if (!out) throw DataError("cannot write " + request.output.string());
  if (request.overlay_dir) fs::create_directories(*request.overlay_dir);

  std::size_t written = 0;
  for (const auto& path : queries) {
    Image img = read_pnm(path);
    DetectOutput det;
    {
      ag::NoGradGuard guard;
      det = model.detect(model.encode_query(img, path.filename().string()), support, cfg.eval.detect);
    }
    for (const auto& d : det.detections) {
      const nlohmann::json j = {{"image", path.filename().string()},
                                {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}},
                                {"score", d.score},
                                {"category", request.category}};
      out << j.dump() << '\n';
      ++written;
    }
    if (request.overlay_dir) {
      for (const auto& d : det.detections) draw_box(img, d.box, {1.0, 0.1, 0.1});
      write_ppm(*request.overlay_dir / (path.stem().string() + ".ppm"), img);
    }
  }
  return written;
}

// ---- ablations ----------------------------------------------------------

std::vector<AblationRow> ablation_preset(const std::string& preset) {
  std::vector<AblationRow> rows;
  if (preset == "relation-heads") {
    const std::vector<std::pair<std::string, HeadToggles>> combos = {
        {"G", {true, false, false}},    {"L", {false, true, false}},   {"P", {false, false, true}},
        {"G+P", {true, false, true}},   {"L+P", {false, true, true}},  {"G+L", {true, true, false}},
        {"G+L+P", {true, true, true}},
    };
    for (const auto& [label, heads] : combos) rows.push_back({label, heads, 1, 1, false, std::nullopt});
  } else if (preset == "training-strategy") {
    const HeadToggles all{};
    rows.push_back({"1-way 1-shot", all, 1, 1, false, std::nullopt});
    rows.push_back({"1-way 1-shot", all, 1, 1, true, std::nullopt});
    rows.push_back({"2-way 1-shot", all, 2, 1, false, std::nullopt});
    rows.push_back({"2-way 5-shot", all, 2, 5, false, std::nullopt});
    rows.push_back({"2-way 5-shot", all, 2, 5, true, std::nullopt});
    rows.push_back({"5-way 5-shot", all, 5, 5, true, std::nullopt});
  } else {
    throw ConfigError("unknown ablation preset '" + preset + "' (relation-heads | training-strategy)");
  }
  return rows;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const std::string& preset, std::ostream* log) {
  auto rows = ablation_preset(preset);
  ExperimentData data = load_experiment_data(cfg);
  const int train_categories = static_cast<int>(data.train.categories().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& row = rows[i];
    ExperimentConfig run = cfg;
    run.model.relation.heads = row.heads;
    run.model.rpn.attention = row.attention;
    run.training.ways = std::min(row.train_ways, train_categories);
    run.training.shots = row.train_shots;
    run.paths.output_dir = (fs::path(cfg.paths.output_dir) / (preset + "-" + std::to_string(i))).string();
    if (log) *log << "[" << (i + 1) << "/" << rows.size() << "] " << row.label
                  << (row.attention ? " +attention" : "") << '\n' << std::flush;
    auto model = make_model(run);
    run_train(run, *model, data, {});
    row.report = run_evaluate(run, *model, data);
  }
  return rows;
}

namespace {

std::string mark(bool on) { return on ? "x" : " "; }

}  // namespace

std::string ablation_table(const std::string& preset, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  auto metric = [](const AblationRow& r, bool ap75) -> std::string {
    if (!r.report) return "   -";
    std::ostringstream m;
    m << std::fixed << std::setprecision(1) << 100.0 * (ap75 ? r.report->ap75.mean : r.report->ap50.mean);
    return m.str();
  };
  if (preset == "relation-heads") {
    os << "Global R | Local R | Patch R |  AP50 |  AP75\n";
    os << "---------+---------+---------+-------+------\n";
    for (const auto& r : rows) {
      os << "    " << mark(r.heads.global) << "    |    " << mark(r.heads.local) << "    |    " << mark(r.heads.patch)
         << "    | " << std::setw(5) << metric(r, false) << " | " << std::setw(5)
         << metric(r, true) << '\n';
    }
  } else {
    os << "Training Strategy | Attention RPN |  AP50 |  AP75\n";
    os << "------------------+---------------+-------+------\n";
    for (const auto& r : rows) {
      os << std::left << std::setw(17) << r.label << std::right << " |       " << mark(r.attention) << "       | "
         << std::setw(5) << metric(r, false) << " | " << std::setw(5)
         << metric(r, true) << '\n';
    }
  }
  return os.str();
}

nlohmann::json ablation_to_json(const std::string& preset, const std::vector<AblationRow>& rows) {
  nlohmann::json j = {{"preset", preset}, {"rows", nlohmann::json::array()}};
  for (const auto& r : rows) {
    nlohmann::json row = {{"label", r.label},
                          {"global", r.heads.global},
                          {"local", r.heads.local},
                          {"patch", r.heads.patch},
                          {"train_ways", r.train_ways},
                          {"train_shots", r.train_shots},
                          {"attention", r.attention}};
    if (r.report) row["report"] = report_to_json(*r.report);
    j["rows"].push_back(row);
  }
  return j;
}

}  // namespace fsdet

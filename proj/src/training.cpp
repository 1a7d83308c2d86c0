#include "fsdet/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace fsdet {

// ---- triplets -----------------------------------------------------------

TripletSampler::TripletSampler(const DatasetManifest& manifest, int ways, int shots)
    : manifest_(&manifest), ways_(ways), shots_(shots) {
  if (ways < 1 || shots < 1) throw std::invalid_argument("triplet sampler needs ways >= 1 and shots >= 1");
  for (std::size_t r = 0; r < manifest.records.size(); ++r) {
    const auto& rec = manifest.records[r];
    std::vector<std::string> seen;
    for (std::size_t b = 0; b < rec.boxes.size(); ++b) {
      const auto& cat = rec.boxes[b].category;
      instances_[cat].push_back({r, b});
      if (std::find(seen.begin(), seen.end(), cat) == seen.end()) {
        seen.push_back(cat);
        images_[cat].push_back(r);
      }
    }
  }
  for (const auto& [cat, imgs] : images_) {
    categories_.push_back(cat);
    // A support must come from an image other than the query.
    if (imgs.size() >= 2) eligible_.push_back(cat);
  }
  const std::size_t needed = static_cast<std::size_t>(std::max(ways, 2));
  if (categories_.size() < needed) {
    throw DataError("triplet sampling needs at least " + std::to_string(needed) + " categories, manifest has " +
                    std::to_string(categories_.size()));
  }
  if (eligible_.empty()) throw DataError("no category has images for both query and support");
}

namespace {

std::vector<InstanceRef> draw_instances(const std::vector<InstanceRef>& pool, std::size_t exclude_record, int k,
                                        Rng& rng) {
  std::vector<InstanceRef> candidates;
  for (const auto& ref : pool)
    if (ref.record != exclude_record) candidates.push_back(ref);
  if (candidates.empty()) candidates = pool;
  std::vector<InstanceRef> out;
  if (static_cast<int>(candidates.size()) >= k) {
    std::vector<std::size_t> idx(candidates.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), idx.size() - 1);
      std::swap(idx[static_cast<std::size_t>(i)], idx[pick(rng)]);
      out.push_back(candidates[idx[static_cast<std::size_t>(i)]]);
    }
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    for (int i = 0; i < k; ++i) out.push_back(candidates[pick(rng)]);
  }
  return out;
}

}  // namespace

TrainingTriplet TripletSampler::sample(Rng& rng) const {
  TrainingTriplet t;
  std::uniform_int_distribution<std::size_t> pick_cat(0, eligible_.size() - 1);
  t.category = eligible_[pick_cat(rng)];
  const auto& imgs = images_.at(t.category);
  std::uniform_int_distribution<std::size_t> pick_img(0, imgs.size() - 1);
  t.query = imgs[pick_img(rng)];
  t.positive = draw_instances(instances_.at(t.category), t.query, shots_, rng);

  std::vector<std::string> others;
  for (const auto& c : categories_)
    if (c != t.category) others.push_back(c);
  for (int n = 1; n < ways_; ++n) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(n - 1), others.size() - 1);
    std::swap(others[static_cast<std::size_t>(n - 1)], others[pick(rng)]);
    const std::string& neg = others[static_cast<std::size_t>(n - 1)];
    t.negative_categories.push_back(neg);
    t.negatives.push_back(draw_instances(instances_.at(neg), t.query, shots_, rng));
  }
  return t;
}

TrainingTriplet sample_triplet(const DatasetManifest& manifest, Rng& rng, int ways, int shots) {
  return TripletSampler(manifest, ways, shots).sample(rng);
}

// ---- pairs --------------------------------------------------------------

const char* pair_kind_name(PairKind kind) noexcept {
  switch (kind) {
    case PairKind::kForegroundPositive: return "fg_pos";
    case PairKind::kBackgroundPositive: return "bg_pos";
    case PairKind::kNegative: return "any_neg";
  }
  return "?";
}

std::vector<PairKind> classify_pairs(std::span<const Box> proposals, std::span<const Box> category_gt,
                                     bool positive_support, double fg_iou) {
  std::vector<PairKind> kinds;
  kinds.reserve(proposals.size());
  for (const auto& p : proposals) {
    if (!positive_support) {
      kinds.push_back(PairKind::kNegative);
      continue;
    }
    double best = 0.0;
    for (const auto& g : category_gt) best = std::max(best, iou(p, g));
    kinds.push_back(best >= fg_iou ? PairKind::kForegroundPositive : PairKind::kBackgroundPositive);
  }
  return kinds;
}

PairSelection select_training_pairs(std::span<const MatchPair> pairs, PairQuota quota) {
  if (quota.foreground < 1 || quota.background < 0 || quota.negative < 0) {
    throw std::invalid_argument("pair quota needs foreground >= 1 and non-negative others");
  }
  PairSelection sel;
  std::vector<int> fg, bg, neg;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const int idx = static_cast<int>(i);
    switch (pairs[i].kind) {
      case PairKind::kForegroundPositive: fg.push_back(idx); break;
      case PairKind::kBackgroundPositive: bg.push_back(idx); break;
      case PairKind::kNegative: neg.push_back(idx); break;
    }
  }
  auto by_score = [&](int a, int b) {
    if (pairs[static_cast<std::size_t>(a)].score != pairs[static_cast<std::size_t>(b)].score) {
      return pairs[static_cast<std::size_t>(a)].score > pairs[static_cast<std::size_t>(b)].score;
    }
    return a < b;
  };
  // Quotas are expressed per unit of the foreground multiplier.
  int n = static_cast<int>(fg.size()) / quota.foreground;
  if (fg.empty()) {
    sel.no_foreground = true;
    n = 1;
  } else if (n == 0) {
    n = 1;
  }
  auto take = [&](std::vector<int>& pool, int want) {
    std::sort(pool.begin(), pool.end(), by_score);
    const int got = std::min<int>(want, static_cast<int>(pool.size()));
    if (got < want) sel.deficit = true;
    sel.selected.insert(sel.selected.end(), pool.begin(), pool.begin() + got);
    return got;
  };
  sel.foreground = static_cast<int>(fg.size());
  sel.selected = fg;
  sel.background = take(bg, quota.background * n);
  sel.negative = take(neg, quota.negative * n);
  return sel;
}

// ---- schedule -----------------------------------------------------------

void TrainSchedule::validate() const {
  if (!(base_lr >= 0.0) || decay_step < 1 || total_iterations < 0 || batch_size < 1 || !(decay_factor > 0.0)) {
    throw std::invalid_argument("training schedule values must be positive");
  }
}

double TrainSchedule::lr_at(int iteration) const { return iteration < decay_step ? base_lr : base_lr * decay_factor; }

void TrainingConfig::validate() const {
  schedule.validate();
  if (ways < 1 || shots < 1) throw std::invalid_argument("training ways and shots must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must lie in [0,1)");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(fg_iou > 0.0 && fg_iou <= 1.0)) throw std::invalid_argument("fg_iou must lie in (0,1]");
  if (train_proposals < 1) throw std::invalid_argument("train_proposals must be >= 1");
  if (clip_grad_norm < 0.0) throw std::invalid_argument("clip_grad_norm must be >= 0");
  if (quota.foreground < 1 || quota.background < 0 || quota.negative < 0) {
    throw std::invalid_argument("pair ratio needs a positive foreground share");
  }
}

// ---- optimizer ----------------------------------------------------------

SgdMomentum::SgdMomentum(ParamStore& store, double momentum, double weight_decay)
    : store_(&store), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& p : store.entries()) velocity_.push_back(Tensor::zeros_like(p.var.value()));
}

void SgdMomentum::step(double lr) {
  auto& entries = store_->entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = entries[i];
    if (p.frozen) continue;
    Tensor& w = p.var.mutable_value();
    const Tensor& g = p.var.grad();
    Tensor& v = velocity_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double grad = (g.empty() ? 0.0 : g[k]) + weight_decay_ * w[k];
      v[k] = momentum_ * v[k] + grad;
      w[k] -= lr * v[k];
    }
  }
}

// ---- data ---------------------------------------------------------------

TrainingData::TrainingData(const DatasetManifest& manifest, ImageStore& images, const ModelConfig& model)
    : manifest_(&manifest), images_(&images), query_cfg_(model.query), support_cfg_(model.support) {}

const PreparedQuery& TrainingData::query(std::size_t record) {
  if (const auto it = queries_.find(record); it != queries_.end()) return it->second;
  const auto& rec = manifest_->records.at(record);
  return queries_.emplace(record, prepare_query(images_->get(rec.image), query_cfg_)).first->second;
}

const SupportCrop& TrainingData::support(const InstanceRef& ref) {
  const auto key = std::make_pair(ref.record, ref.box);
  if (const auto it = supports_.find(key); it != supports_.end()) return it->second;
  const auto& rec = manifest_->records.at(ref.record);
  return supports_.emplace(key, prepare_support(images_->get(rec.image), rec.boxes.at(ref.box).box, support_cfg_))
      .first->second;
}

// ---- trainer ------------------------------------------------------------

Trainer::Trainer(FewShotModel& model, const TrainingConfig& cfg, TrainingData& data, std::uint64_t seed)
    : model_(&model),
      cfg_(cfg),
      data_(&data),
      sampler_(data.manifest(), cfg.ways, cfg.shots),
      optimizer_(model.params(), cfg.momentum, cfg.weight_decay),
      rng_(seed) {
  cfg_.validate();
}

namespace {

constexpr std::array<std::array<int, 3>, 6> kChannelOrders{{{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};

std::vector<SupportCrop> crops_of(TrainingData& data, const std::vector<InstanceRef>& refs, int order) {
  std::vector<SupportCrop> crops;
  crops.reserve(refs.size());
  for (const auto& r : refs) {
    crops.push_back(data.support(r));
    if (order != 0) crops.back().image = permute_channels(crops.back().image, order);
  }
  return crops;
}

}  // namespace

Image permute_channels(const Image& image, int order) {
  if (order < 0 || order >= static_cast<int>(kChannelOrders.size())) {
    throw std::invalid_argument("permute_channels: order must be in [0,6)");
  }
  if (order == 0) return image;
  if (image.channels() != 3) throw std::invalid_argument("permute_channels: needs a 3-channel image");
  Image out(3, image.height(), image.width());
  const auto& perm = kChannelOrders[static_cast<std::size_t>(order)];
  const std::size_t plane = static_cast<std::size_t>(image.height()) * static_cast<std::size_t>(image.width());
  const double* src = image.pixels.data();
  double* dst = out.pixels.data();
  for (int c = 0; c < 3; ++c) {
    std::copy_n(src + static_cast<std::size_t>(perm[static_cast<std::size_t>(c)]) * plane, plane,
                dst + static_cast<std::size_t>(c) * plane);
  }
  return out;
}

TripletLoss Trainer::triplet_loss(const TrainingTriplet& triplet) {
  const FewShotModel& model = *model_;
  const auto& rec = data_->manifest().records.at(triplet.query);
  const PreparedQuery& prepared = data_->query(triplet.query);
  const QueryEncoding query =
      triplet.channel_order == 0
          ? model.encode_prepared(prepared.image, prepared.scale, rec.image)
          : model.encode_prepared(permute_channels(prepared.image, triplet.channel_order), prepared.scale, rec.image);

  std::vector<Box> all_gt, category_gt;
  for (const auto& b : rec.boxes) {
    const Box s = b.box.scaled(prepared.scale);
    all_gt.push_back(s);
    if (b.category == triplet.category) category_gt.push_back(s);
  }
  const std::span<const Box> extra = cfg_.append_gt ? std::span<const Box>(all_gt) : std::span<const Box>();

  const auto& fs = query.features.shape();
  const auto anchors = model.anchors_for(fs[2], fs[3]);

  struct Branch {
    BranchOutput out;
    std::vector<PairKind> kinds;
    std::size_t first_pair = 0;
  };
  std::vector<Branch> branches;
  std::vector<MatchPair> pairs;
  TripletLoss loss;
  ag::Var rpn_total(Tensor({1}));

  const int n_branches = 1 + static_cast<int>(triplet.negatives.size());
  for (int b = 0; b < n_branches; ++b) {
    const bool positive = b == 0;
    const auto& refs = positive ? triplet.positive : triplet.negatives[static_cast<std::size_t>(b - 1)];
    const SupportEncoding support = model.encode_support(crops_of(*data_, refs, triplet.channel_order));
    Branch br;
    br.out = model.run_branch(query, support, cfg_.train_proposals, extra);

    if (positive || cfg_.supervise_negative_branch) {
      std::vector<Box> rpn_gt;
      if (positive) {
        rpn_gt = category_gt;
      } else {
        const auto& neg = triplet.negative_categories[static_cast<std::size_t>(b - 1)];
        for (const auto& g : rec.boxes)
          if (g.category == neg) rpn_gt.push_back(g.box.scaled(prepared.scale));
      }
      const RpnTargets targets = assign_rpn_targets(anchors, rpn_gt, model.rpn().config(), rng_);
      const RpnLoss rl = rpn_loss(br.out.rpn.logits, br.out.rpn.deltas, targets);
      loss.empty_rpn_sample = loss.empty_rpn_sample || rl.empty_sample;
      rpn_total = ag::add(rpn_total, ag::add(rl.objectness, rl.regression));
    }

    br.kinds = classify_pairs(br.out.boxes, category_gt, positive, cfg_.fg_iou);
    br.first_pair = pairs.size();
    if (!br.out.boxes.empty()) {
      const Tensor& fused = br.out.heads.fused.value();
      for (std::size_t i = 0; i < br.kinds.size(); ++i) {
        pairs.push_back({b, static_cast<int>(i), br.kinds[i], br.kinds[i] == PairKind::kForegroundPositive,
                         ag::sigmoid(fused[i])});
      }
    }
    branches.push_back(std::move(br));
  }

  loss.selection = select_training_pairs(pairs, cfg_.quota);
  const double selected = static_cast<double>(loss.selection.selected.size());

  ag::Var matching(Tensor({1}));
  ag::Var box(Tensor({1}));
  for (std::size_t b = 0; b < branches.size(); ++b) {
    const Branch& br = branches[b];
    const std::size_t P = br.out.boxes.size();
    if (P == 0) continue;
    std::vector<double> labels(P, 0.0), weights(P, 0.0);
    for (int idx : loss.selection.selected) {
      const MatchPair& mp = pairs[static_cast<std::size_t>(idx)];
      if (mp.branch != static_cast<int>(b)) continue;
      weights[static_cast<std::size_t>(mp.proposal)] += 1.0;
      labels[static_cast<std::size_t>(mp.proposal)] = mp.match ? 1.0 : 0.0;
    }
    if (selected > 0.0) {
      matching = ag::add(matching, ag::bce_with_logits(br.out.heads.fused, labels, weights, selected));
    }
    if (b == 0 && !category_gt.empty()) {
      Tensor targets({static_cast<int>(P), 4});
      std::vector<char> fg(P, 0);
      for (std::size_t i = 0; i < P; ++i) {
        if (br.kinds[i] != PairKind::kForegroundPositive) continue;
        fg[i] = 1;
        std::size_t best = 0;
        double best_iou = -1.0;
        for (std::size_t g = 0; g < category_gt.size(); ++g) {
          const double o = iou(br.out.boxes[i], category_gt[g]);
          if (o > best_iou) {
            best_iou = o;
            best = g;
          }
        }
        const BoxDeltas d = encode_box(br.out.boxes[i], category_gt[best]);
        for (int k = 0; k < 4; ++k) targets[i * 4 + static_cast<std::size_t>(k)] = d[static_cast<std::size_t>(k)];
      }
      const BoxLoss bl = detector_box_loss(br.out.heads.box_deltas, targets, fg);
      if (!bl.no_foreground) box = bl.value;
    }
  }
  loss.rpn = rpn_total;
  loss.matching = matching;
  loss.box = box;
  loss.total = ag::add(ag::add(rpn_total, matching), box);
  return loss;
}

LossBundle Trainer::step() {
  std::vector<TrainingTriplet> batch;
  batch.reserve(static_cast<std::size_t>(cfg_.schedule.batch_size));
  for (int i = 0; i < cfg_.schedule.batch_size; ++i) {
    batch.push_back(sampler_.sample(rng_));
    if (cfg_.permute_channels) {
      batch.back().channel_order = std::uniform_int_distribution<int>(0, static_cast<int>(kChannelOrders.size()) - 1)(rng_);
    }
  }
  return step(batch);
}

LossBundle Trainer::step(std::span<const TrainingTriplet> batch) {
  if (batch.empty()) throw std::invalid_argument("training step needs at least one triplet");
  model_->params().zero_grad();
  LossBundle bundle;
  bundle.iteration = iteration_;
  bundle.lr = cfg_.schedule.lr_at(iteration_);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& t : batch) {
    TripletLoss tl = triplet_loss(t);
    const double r = tl.rpn.value()[0], m = tl.matching.value()[0], b = tl.box.value()[0];
    if (!std::isfinite(r) || !std::isfinite(m) || !std::isfinite(b)) {
      model_->params().zero_grad();
      std::ostringstream os;
      os << "non-finite loss at iteration " << iteration_ << ": L_rpn=" << r << " L_matching=" << m
         << " L_box=" << b;
      throw NumericError(os.str());
    }
    bundle.rpn += r * inv;
    bundle.matching += m * inv;
    bundle.box += b * inv;
    bundle.foreground += tl.selection.foreground;
    bundle.background += tl.selection.background;
    bundle.negative += tl.selection.negative;
    bundle.deficit = bundle.deficit || tl.selection.deficit;
    bundle.no_foreground = bundle.no_foreground || tl.selection.no_foreground;
    bundle.empty_rpn_sample = bundle.empty_rpn_sample || tl.empty_rpn_sample;
    ag::backward(ag::scale(tl.total, inv));
  }
  bundle.total = (bundle.rpn + bundle.matching) + bundle.box;

  double norm2 = 0.0;
  for (const auto& p : model_->params().entries()) {
    if (p.frozen || p.var.grad().empty()) continue;
    for (double g : p.var.grad().values()) norm2 += g * g;
  }
  if (!std::isfinite(norm2)) {
    model_->params().zero_grad();
    throw NumericError("non-finite gradient at iteration " + std::to_string(iteration_));
  }
  if (cfg_.clip_grad_norm > 0.0 && norm2 > cfg_.clip_grad_norm * cfg_.clip_grad_norm) {
    const double s = cfg_.clip_grad_norm / std::sqrt(norm2);
    for (auto& p : model_->params().entries()) {
      if (!p.frozen && !p.var.grad().empty()) p.var.grad_buffer() *= s;
    }
  }
  optimizer_.step(bundle.lr);
  ++iteration_;
  return bundle;
}

std::vector<LossBundle> Trainer::run(const std::function<bool(const LossBundle&)>& on_step) {
  std::vector<LossBundle> trace;
  while (iteration_ < cfg_.schedule.total_iterations) {
    trace.push_back(step());
    if (on_step && !on_step(trace.back())) break;
  }
  return trace;
}

// ---- n-way --------------------------------------------------------------

std::vector<SupportEncoding> extend_to_n_way(
    const FewShotModel& model, const std::vector<std::pair<std::string, std::vector<SupportCrop>>>& supports) {
  if (supports.empty()) throw std::invalid_argument("extend_to_n_way: no categories given");
  std::vector<SupportEncoding> out;
  out.reserve(supports.size());
  for (const auto& [category, crops] : supports) {
    if (crops.empty()) throw std::invalid_argument("extend_to_n_way: category '" + category + "' has no supports");
    out.push_back(model.encode_support(crops, category));
  }
  return out;
}

// ---- traces and checkpoints ---------------------------------------------

std::string loss_trace_row(const LossBundle& b) {
  std::ostringstream os;
  os << std::setprecision(17) << b.iteration << ',' << b.rpn << ',' << b.matching << ',' << b.box << ',' << b.total;
  return os.str();
}

void write_loss_trace(const std::filesystem::path& path, std::span<const LossBundle> trace, bool append) {
  const bool header = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw DataError("cannot write loss trace " + path.string());
  if (header) out << "iteration,L_rpn,L_matching,L_box,total\n";
  for (const auto& b : trace) out << loss_trace_row(b) << '\n';
}

Checkpoint training_checkpoint(const FewShotModel& model, SgdMomentum& optim, int iteration, std::string metadata) {
  Checkpoint ckpt = snapshot(model.params(), static_cast<std::uint64_t>(iteration), std::move(metadata));
  const auto& entries = model.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ckpt.tensors.emplace_back("optim.velocity." + entries[i].name, optim.velocity()[i]);
  }
  return ckpt;
}

int restore_training(FewShotModel& model, SgdMomentum* optim, const Checkpoint& ckpt) {
  restore(model.params(), ckpt);
  if (optim) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;
    const auto& entries = model.params().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto it = by_name.find("optim.velocity." + entries[i].name);
      if (it != by_name.end() && it->second->same_shape(optim->velocity()[i])) optim->velocity()[i] = *it->second;
    }
  }
  return static_cast<int>(ckpt.iteration);
}

}  // namespace fsdet

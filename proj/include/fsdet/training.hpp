#pragma once

// Two-way contrastive training: triplet sampling, pair construction with the
// 1:2:1 quota, the multi-task loss and the SGD loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsdet/data.hpp"
#include "fsdet/model.hpp"

namespace fsdet {

/// Raised when a loss or gradient stops being finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One annotated object: a box of a manifest record.
struct InstanceRef {
  std::size_t record = 0;
  std::size_t box = 0;
  friend bool operator==(const InstanceRef&, const InstanceRef&) = default;
};

/// (q_c, s_c, s_n) generalised to K shots and N-1 negative categories.
struct TrainingTriplet {
  std::size_t query = 0;
  std::string category;
  std::vector<InstanceRef> positive;
  std::vector<std::string> negative_categories;
  std::vector<std::vector<InstanceRef>> negatives;  // one list of K per negative category
  /// Index into the six RGB channel orders, applied to the query and every
  /// support of the triplet alike; 0 is the identity.
  int channel_order = 0;
};

/// Reorders the colour channels of an image by one of the six permutations.
Image permute_channels(const Image& image, int order);

/// Per-category index of a manifest for sampling triplets.
class TripletSampler {
 public:
  TripletSampler(const DatasetManifest& manifest, int ways, int shots);

  /// Query category uniform over eligible categories, query image uniform
  /// among its images, supports from other images.
  TrainingTriplet sample(Rng& rng) const;

  const std::vector<std::string>& eligible_categories() const noexcept { return eligible_; }

 private:
  const DatasetManifest* manifest_;
  int ways_ = 2;
  int shots_ = 1;
  std::vector<std::string> categories_;
  std::vector<std::string> eligible_;
  std::map<std::string, std::vector<std::size_t>> images_;
  std::map<std::string, std::vector<InstanceRef>> instances_;
};

TrainingTriplet sample_triplet(const DatasetManifest& manifest, Rng& rng, int ways = 2, int shots = 1);

enum class PairKind { kForegroundPositive, kBackgroundPositive, kNegative };

const char* pair_kind_name(PairKind kind) noexcept;

struct MatchPair {
  int branch = 0;    // 0 is the positive support
  int proposal = 0;  // row within the branch
  PairKind kind = PairKind::kBackgroundPositive;
  bool match = false;
  double score = 0.0;  // current sigmoid(fused logit)
};

/// Kinds of proposals against one support. Against the positive support a
/// proposal is foreground when its best IoU with the category's ground truth
/// reaches fg_iou; against a negative support every proposal is kNegative.
std::vector<PairKind> classify_pairs(std::span<const Box> proposals, std::span<const Box> category_gt,
                                     bool positive_support, double fg_iou = 0.5);

/// Multipliers of N = |fg| for the three pair kinds.
struct PairQuota {
  int foreground = 1;
  int background = 2;
  int negative = 1;
};

struct PairSelection {
  std::vector<int> selected;  // indices into the candidate list
  int foreground = 0;
  int background = 0;
  int negative = 0;
  /// A quota could not be met from the available candidates.
  bool deficit = false;
  /// No foreground pair existed; N was taken as 1 for the other quotas.
  bool no_foreground = false;
};

/// All foreground pairs, then the top quota.background * N background and
/// quota.negative * N negative pairs by score (ties: lower index first).
PairSelection select_training_pairs(std::span<const MatchPair> pairs, PairQuota quota = {});

struct TrainSchedule {
  double base_lr = 0.002;
  int decay_step = 56000;
  int total_iterations = 60000;
  int batch_size = 4;
  double decay_factor = 0.1;

  void validate() const;
  double lr_at(int iteration) const;
};

struct TrainingConfig {
  int ways = 2;
  int shots = 1;
  TrainSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double fg_iou = 0.5;
  PairQuota quota;
  /// Ground-truth boxes join the proposals of every branch during training.
  bool append_gt = true;
  /// Proposals kept per branch during training.
  int train_proposals = 64;
  /// Also supervise the RPN of negative branches (with the negative
  /// category's boxes in the query).
  bool supervise_negative_branch = false;
  /// Global gradient-norm clip; 0 disables it.
  double clip_grad_norm = 0.0;
  /// Draw a random channel order per triplet so that matching cannot rest on
  /// the absolute colour of a training category.
  bool permute_channels = false;

  void validate() const;
};

struct LossBundle {
  int iteration = 0;
  double rpn = 0.0;
  double matching = 0.0;
  double box = 0.0;
  double total = 0.0;  // rpn + matching + box
  double lr = 0.0;
  int foreground = 0;
  int background = 0;
  int negative = 0;
  bool deficit = false;
  bool no_foreground = false;
  bool empty_rpn_sample = false;
};

/// The graph-level loss of one triplet, before any update.
struct TripletLoss {
  ag::Var rpn;
  ag::Var matching;
  ag::Var box;
  ag::Var total;
  PairSelection selection;
  bool empty_rpn_sample = false;
};

/// SGD with momentum and L2 weight decay; frozen parameters are skipped.
class SgdMomentum {
 public:
  SgdMomentum(ParamStore& store, double momentum, double weight_decay);
  void step(double lr);
  std::vector<Tensor>& velocity() noexcept { return velocity_; }

 private:
  ParamStore* store_;
  double momentum_;
  double weight_decay_;
  std::vector<Tensor> velocity_;
};

/// Supplies preprocessed training inputs with caching.
class TrainingData {
 public:
  TrainingData(const DatasetManifest& manifest, ImageStore& images, const ModelConfig& model);

  const DatasetManifest& manifest() const noexcept { return *manifest_; }
  const PreparedQuery& query(std::size_t record);
  const SupportCrop& support(const InstanceRef& ref);

 private:
  const DatasetManifest* manifest_;
  ImageStore* images_;
  QueryPrepConfig query_cfg_;
  SupportPrepConfig support_cfg_;
  std::map<std::size_t, PreparedQuery> queries_;
  std::map<std::pair<std::size_t, std::size_t>, SupportCrop> supports_;
};

class Trainer {
 public:
  Trainer(FewShotModel& model, const TrainingConfig& cfg, TrainingData& data, std::uint64_t seed);

  /// Builds the loss graph of one triplet.
  TripletLoss triplet_loss(const TrainingTriplet& triplet);

  /// Samples batch_size triplets, accumulates their averaged gradients and
  /// applies one update. Throws NumericError on a non-finite loss, leaving
  /// the weights untouched.
  LossBundle step();
  /// Same, on caller-supplied triplets.
  LossBundle step(std::span<const TrainingTriplet> batch);

  /// Runs until the schedule's total iteration count; the callback sees each
  /// bundle and may return false to stop early.
  std::vector<LossBundle> run(const std::function<bool(const LossBundle&)>& on_step = {});

  int iteration() const noexcept { return iteration_; }
  void set_iteration(int it) noexcept { iteration_ = it; }
  SgdMomentum& optimizer() noexcept { return optimizer_; }
  Rng& rng() noexcept { return rng_; }

 private:
  FewShotModel* model_;
  TrainingConfig cfg_;
  TrainingData* data_;
  TripletSampler sampler_;
  SgdMomentum optimizer_;
  Rng rng_;
  int iteration_ = 0;
};

/// Per-category support encodings for an N-way, K-shot episode; every branch
/// shares the model's weights.
std::vector<SupportEncoding> extend_to_n_way(const FewShotModel& model,
                                             const std::vector<std::pair<std::string, std::vector<SupportCrop>>>& supports);

/// CSV with header iteration,L_rpn,L_matching,L_box,total.
void write_loss_trace(const std::filesystem::path& path, std::span<const LossBundle> trace, bool append = false);
std::string loss_trace_row(const LossBundle& b);

/// Checkpoint with parameters and optimizer velocity.
Checkpoint training_checkpoint(const FewShotModel& model, SgdMomentum& optim, int iteration, std::string metadata);
/// Restores parameters (and velocity when present); returns the iteration.
int restore_training(FewShotModel& model, SgdMomentum* optim, const Checkpoint& ckpt);

}  // namespace fsdet

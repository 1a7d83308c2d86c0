#pragma once

// Minimal reverse-mode differentiation over Tensor. Every op records a
// closure that scatters its output gradient into its inputs; backward()
// replays them in reverse topological order.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "fsdet/tensor.hpp"

namespace fsdet::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  /// Gradient buffer, zero-initialised on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad_buffer() { return node_->grad_buffer(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool defined() const noexcept { return static_cast<bool>(node_); }
  const std::vector<int>& shape() const { return node_->value.shape(); }
  void zero_grad();

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  friend Var make_result(Tensor value, const char* op, std::vector<Var> inputs,
                         std::function<void(Node&)> backward);
  std::shared_ptr<Node> node_;
};

/// Builds an op output. The backward closure is dropped when no input needs
/// gradients or when gradient recording is disabled.
Var make_result(Tensor value, const char* op, std::vector<Var> inputs,
                std::function<void(Node&)> backward);

bool grad_enabled() noexcept;

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
void backward(const Var& root);

/// Smallest |pre-activation| over every relu reachable from root. Gradient
/// checks use it to reject instances that sit on a kink.
double min_relu_margin(const Var& root);

// ---- ops ----------------------------------------------------------------

Var reshape(const Var& x, std::vector<int> shape);
Var add(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var relu(const Var& x);

/// Elementwise mean of equally shaped inputs.
Var mean_of(std::span<const Var> xs);

/// x [N,C,H,W], w [O,C,k,k], b [O] -> [N,O,Ho,Wo].
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

/// x [N,D], w [O,D], b [O] -> [N,O].
Var linear(const Var& x, const Var& w, const Var& b);

/// kernel [Nk,C,S,S] slid over y [N,C,H,W] channel by channel, Nk in {1,N}.
/// Output [N,C,H-S+1,W-S+1].
Var depthwise_xcorr(const Var& kernel, const Var& y);

/// [N,C,H,W] -> [N,C].
Var global_avg_pool(const Var& x);

/// k x k average pool, stride 1, no padding.
Var avg_pool2d(const Var& x, int k);

/// a [N,C1,H,W] and b [Nb,C2,H,W] with Nb in {1,N} -> [N,C1+C2,H,W].
Var concat_channels(const Var& a, const Var& b);

/// [C,H,W] -> [H,W,C].
Var chw_to_hwc(const Var& x);

/// Rows of x [N,...] at the given indices.
Var select_rows(const Var& x, std::span<const int> rows);

/// Column range [begin,end) of x [N,D] -> [N,end-begin].
Var slice_columns(const Var& x, int begin, int end);

/// Sum of all elements -> [1].
Var sum_all(const Var& x);

/// Bilinear region alignment of fm [C,H,W] onto [P,C,out,out]. Boxes are in
/// image pixels; spatial_scale converts them to feature coordinates.
struct RoiBox {
  double x1, y1, x2, y2;
};
Var roi_align(const Var& fm, std::span<const RoiBox> boxes, double spatial_scale, int out_size,
              int sampling_ratio);

/// sum_i w_i * BCE(sigmoid(logit_i), label_i) / normalizer -> [1].
Var bce_with_logits(const Var& logits, std::span<const double> labels, std::span<const double> weights,
                    double normalizer);

/// sum_i w_i * sum_k smoothL1(pred_ik - target_ik) / normalizer -> [1]. pred [N,K].
Var smooth_l1(const Var& pred, const Tensor& target, std::span<const double> row_weights,
              double normalizer, double beta = 1.0);

double sigmoid(double x) noexcept;
double smooth_l1_value(double diff, double beta = 1.0) noexcept;
double bce_value(double logit, double label) noexcept;

}  // namespace fsdet::ag

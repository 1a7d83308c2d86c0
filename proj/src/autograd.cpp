#include "fsdet/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace fsdet::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

void require(bool cond, const char* what) {
  if (!cond) throw ShapeError(what);
}

// col [C*k*k, Ho*Wo] from one image x [C,H,W].
void im2col(const double* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
            double* col) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = col + (static_cast<std::size_t>(c * k + ki) * k + kj) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            row[oh * Wo + ow] = (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                    ? x[(static_cast<std::size_t>(c) * H + ih) * W + iw]
                                    : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
            double* dx) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* row = col + (static_cast<std::size_t>(c * k + ki) * k + kj) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw < 0 || iw >= W) continue;
            dx[(static_cast<std::size_t>(c) * H + ih) * W + iw] += row[oh * Wo + ow];
          }
        }
      }
    }
  }
}

struct BilinearTap {
  int index[4];
  double weight[4];
};

// Returns false when the sample lies outside the map and contributes nothing.
bool bilinear_tap(double y, double x, int H, int W, BilinearTap& tap) {
  if (y < -1.0 || y > H || x < -1.0 || x > W) return false;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  int y_low = static_cast<int>(std::floor(y));
  int x_low = static_cast<int>(std::floor(x));
  int y_high = y_low + 1;
  int x_high = x_low + 1;
  if (y_low >= H - 1) {
    y_low = y_high = H - 1;
    y = y_low;
  }
  if (x_low >= W - 1) {
    x_low = x_high = W - 1;
    x = x_low;
  }
  const double ly = y - y_low, lx = x - x_low;
  const double hy = 1.0 - ly, hx = 1.0 - lx;
  tap.index[0] = y_low * W + x_low;
  tap.index[1] = y_low * W + x_high;
  tap.index[2] = y_high * W + x_low;
  tap.index[3] = y_high * W + x_high;
  tap.weight[0] = hy * hx;
  tap.weight[1] = hy * lx;
  tap.weight[2] = ly * hx;
  tap.weight[3] = ly * lx;
  return true;
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor::zeros_like(value);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

Var make_result(Tensor value, const char* op, std::vector<Var> inputs,
                std::function<void(Node&)> backward) {
  Var out(std::move(value), false);
  out.node_->op = op;
  if (!g_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var& v) { return v.requires_grad(); });
  if (!needs) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& v : inputs) out.node_->inputs.push_back(v.node());
  out.node_->backward = std::move(backward);
  return out;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void backward(const Var& root) {
  require(root.defined() && root.value().size() == 1, "backward() needs a scalar root");
  if (!root.requires_grad()) return;
  Node* r = root.node().get();
  r->grad_buffer().fill(1.0);
  const auto order = topo_order(r);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

double min_relu_margin(const Var& root) {
  double margin = std::numeric_limits<double>::infinity();
  if (!root.defined()) return margin;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (std::string_view(n->op) == "relu" && !n->inputs.empty()) {
      for (double v : n->inputs[0]->value.values()) margin = std::min(margin, std::abs(v));
    }
    for (auto& in : n->inputs) stack.push_back(in.get());
  }
  return margin;
}

// ---- elementwise --------------------------------------------------------

Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  auto xn = x.node();
  return make_result(std::move(out), "reshape", {x}, [xn](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var add(const Var& a, const Var& b) {
  require(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor out = a.value() + b.value();
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), "add", {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) an->grad_buffer() += self.grad;
    if (bn->requires_grad) bn->grad_buffer() += self.grad;
  });
}

Var scale(const Var& x, double s) {
  Tensor out = x.value() * s;
  auto xn = x.node();
  return make_result(std::move(out), "scale", {x}, [xn, s](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  auto xn = x.node();
  return make_result(std::move(out), "relu", {x}, [xn](Node& self) {
    Tensor& g = xn->grad_buffer();
    const Tensor& in = xn->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Var mean_of(std::span<const Var> xs) {
  require(!xs.empty(), "mean_of: empty input");
  Tensor out = Tensor::zeros_like(xs[0].value());
  for (const auto& x : xs) {
    require(x.value().same_shape(out), "mean_of: shape mismatch");
    out += x.value();
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  out *= inv;
  std::vector<Var> inputs(xs.begin(), xs.end());
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& x : xs) nodes.push_back(x.node());
  return make_result(std::move(out), "mean_of", std::move(inputs), [nodes, inv](Node& self) {
    for (const auto& n : nodes) {
      if (!n->requires_grad) continue;
      Tensor& g = n->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += inv * self.grad[i];
    }
  });
}

// ---- dense layers -------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.rank() == 4 && wv.rank() == 4, "conv2d: expects [N,C,H,W] input and [O,C,k,k] weights");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int O = wv.dim(0), k = wv.dim(2);
  require(wv.dim(1) == C && wv.dim(3) == k, "conv2d: weight/input channel mismatch");
  require(b.value().size() == static_cast<std::size_t>(O), "conv2d: bias size mismatch");
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "conv2d: input smaller than kernel");
  const int K = C * k * k;
  const int P = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  Tensor out({N, O, Ho, Wo});
  auto cols = std::make_shared<std::vector<double>>();
  if (!direct) cols->resize(static_cast<std::size_t>(N) * K * P);
  CMapMat wm(wv.data(), O, K);
  const double* bias = b.value().data();
  for (int n = 0; n < N; ++n) {
    const double* xn = xv.data() + static_cast<std::size_t>(n) * C * H * W;
    const double* col = xn;
    if (!direct) {
      double* c = cols->data() + static_cast<std::size_t>(n) * K * P;
      im2col(xn, C, H, W, k, stride, pad, Ho, Wo, c);
      col = c;
    }
    MapMat ym(out.data() + static_cast<std::size_t>(n) * O * P, O, P);
    ym.noalias() = wm * CMapMat(col, K, P);
    for (int o = 0; o < O; ++o) ym.row(o).array() += bias[o];
  }

  auto xn_ = x.node(), wn = w.node(), bn = b.node();
  return make_result(std::move(out), "conv2d", {x, w, b},
                     [=](Node& self) {
                       const double* gy = self.grad.data();
                       CMapMat wm2(wn->value.data(), O, K);
                       std::vector<double> dcol(static_cast<std::size_t>(K) * P);
                       for (int n = 0; n < N; ++n) {
                         CMapMat gym(gy + static_cast<std::size_t>(n) * O * P, O, P);
                         const double* col =
                             direct ? xn_->value.data() + static_cast<std::size_t>(n) * C * H * W
                                    : cols->data() + static_cast<std::size_t>(n) * K * P;
                         if (wn->requires_grad) {
                           MapMat gw(wn->grad_buffer().data(), O, K);
                           gw.noalias() += gym * CMapMat(col, K, P).transpose();
                         }
                         if (bn->requires_grad) {
                           Tensor& gb = bn->grad_buffer();
                           for (int o = 0; o < O; ++o) gb[o] += gym.row(o).sum();
                         }
                         if (xn_->requires_grad) {
                           double* gx = xn_->grad_buffer().data() + static_cast<std::size_t>(n) * C * H * W;
                           if (direct) {
                             MapMat(gx, K, P).noalias() += wm2.transpose() * gym;
                           } else {
                             MapMat(dcol.data(), K, P).noalias() = wm2.transpose() * gym;
                             col2im(dcol.data(), C, H, W, k, stride, pad, Ho, Wo, gx);
                           }
                         }
                       }
                     });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.rank() == 2 && wv.rank() == 2, "linear: expects [N,D] input and [O,D] weights");
  const int N = xv.dim(0), D = xv.dim(1), O = wv.dim(0);
  require(wv.dim(1) == D, "linear: input width mismatch");
  require(b.value().size() == static_cast<std::size_t>(O), "linear: bias size mismatch");
  Tensor out({N, O});
  MapMat ym(out.data(), N, O);
  ym.noalias() = CMapMat(xv.data(), N, D) * CMapMat(wv.data(), O, D).transpose();
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) ym(n, o) += b.value()[o];
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_result(std::move(out), "linear", {x, w, b}, [=](Node& self) {
    CMapMat gy(self.grad.data(), N, O);
    if (xn->requires_grad) {
      MapMat(xn->grad_buffer().data(), N, D).noalias() += gy * CMapMat(wn->value.data(), O, D);
    }
    if (wn->requires_grad) {
      MapMat(wn->grad_buffer().data(), O, D).noalias() += gy.transpose() * CMapMat(xn->value.data(), N, D);
    }
    if (bn->requires_grad) {
      Tensor& gb = bn->grad_buffer();
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) gb[o] += gy(n, o);
    }
  });
}

// ---- correlation and pooling -------------------------------------------

Var depthwise_xcorr(const Var& kernel, const Var& y) {
  const Tensor& kv = kernel.value();
  const Tensor& yv = y.value();
  require(kv.rank() == 4 && yv.rank() == 4, "depthwise_xcorr: expects rank-4 tensors");
  const int Nk = kv.dim(0), C = kv.dim(1), S = kv.dim(2);
  const int N = yv.dim(0), H = yv.dim(2), W = yv.dim(3);
  require(kv.dim(3) == S, "depthwise_xcorr: kernel must be square");
  require(yv.dim(1) == C, "depthwise_xcorr: channel mismatch");
  require(Nk == 1 || Nk == N, "depthwise_xcorr: kernel batch must be 1 or N");
  require(S <= H && S <= W, "depthwise_xcorr: kernel larger than feature map");
  const int Ho = H - S + 1, Wo = W - S + 1;
  Tensor out({N, C, Ho, Wo});
  for (int n = 0; n < N; ++n) {
    const int kn = Nk == 1 ? 0 : n;
    for (int c = 0; c < C; ++c) {
      for (int h = 0; h < Ho; ++h) {
        for (int w = 0; w < Wo; ++w) {
          double acc = 0.0;
          for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) acc += kv.at(kn, c, i, j) * yv.at(n, c, h + i, w + j);
          out.at(n, c, h, w) = acc;
        }
      }
    }
  }
  auto kn_ = kernel.node(), yn = y.node();
  return make_result(std::move(out), "depthwise_xcorr", {kernel, y}, [=](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& kval = kn_->value;
    const Tensor& yval = yn->value;
    Tensor* gk = kn_->requires_grad ? &kn_->grad_buffer() : nullptr;
    Tensor* gyv = yn->requires_grad ? &yn->grad_buffer() : nullptr;
    for (int n = 0; n < N; ++n) {
      const int kb = Nk == 1 ? 0 : n;
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < Ho; ++h)
          for (int w = 0; w < Wo; ++w) {
            const double go = g.at(n, c, h, w);
            if (go == 0.0) continue;
            for (int i = 0; i < S; ++i)
              for (int j = 0; j < S; ++j) {
                if (gk) gk->at(kb, c, i, j) += go * yval.at(n, c, h + i, w + j);
                if (gyv) gyv->at(n, c, h + i, w + j) += go * kval.at(kb, c, i, j);
              }
          }
    }
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 4, "global_avg_pool: expects [N,C,H,W]");
  const int N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor out({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* p = xv.data() + (static_cast<std::size_t>(n) * C + c) * HW;
      double acc = 0.0;
      for (int i = 0; i < HW; ++i) acc += p[i];
      out[static_cast<std::size_t>(n) * C + c] = acc / HW;
    }
  auto xn = x.node();
  return make_result(std::move(out), "global_avg_pool", {x}, [=](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double go = self.grad[static_cast<std::size_t>(n) * C + c] / HW;
        double* p = g.data() + (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) p[i] += go;
      }
  });
}

Var avg_pool2d(const Var& x, int k) {
  const Tensor& xv = x.value();
  require(xv.rank() == 4, "avg_pool2d: expects [N,C,H,W]");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  require(k >= 1 && k <= H && k <= W, "avg_pool2d: window larger than input");
  const int Ho = H - k + 1, Wo = W - k + 1;
  const double inv = 1.0 / (k * k);
  Tensor out({N, C, Ho, Wo});
  const std::size_t planes = static_cast<std::size_t>(N) * C;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = xv.data() + pl * H * W;
    double* dst = out.data() + pl * Ho * Wo;
    for (int h = 0; h < Ho; ++h)
      for (int w = 0; w < Wo; ++w) {
        double acc = 0.0;
        for (int i = 0; i < k; ++i) {
          const double* row = src + (h + i) * W + w;
          for (int j = 0; j < k; ++j) acc += row[j];
        }
        dst[h * Wo + w] = acc * inv;
      }
  }
  auto xn = x.node();
  return make_result(std::move(out), "avg_pool2d", {x}, [=](Node& self) {
    double* g = xn->grad_buffer().data();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      const double* go_plane = self.grad.data() + pl * Ho * Wo;
      double* dst = g + pl * H * W;
      for (int h = 0; h < Ho; ++h)
        for (int w = 0; w < Wo; ++w) {
          const double go = go_plane[h * Wo + w] * inv;
          for (int i = 0; i < k; ++i) {
            double* row = dst + (h + i) * W + w;
            for (int j = 0; j < k; ++j) row[j] += go;
          }
        }
    }
  });
}

// ---- layout -------------------------------------------------------------

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 4 && bv.rank() == 4, "concat_channels: expects rank-4 tensors");
  const int N = av.dim(0), C1 = av.dim(1), H = av.dim(2), W = av.dim(3);
  const int Nb = bv.dim(0), C2 = bv.dim(1);
  require(bv.dim(2) == H && bv.dim(3) == W, "concat_channels: spatial mismatch");
  require(Nb == 1 || Nb == N, "concat_channels: batch must be 1 or N");
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  Tensor out({N, C1 + C2, H, W});
  for (int n = 0; n < N; ++n) {
    double* dst = out.data() + static_cast<std::size_t>(n) * (C1 + C2) * HW;
    std::copy_n(av.data() + static_cast<std::size_t>(n) * C1 * HW, C1 * HW, dst);
    const int nb = Nb == 1 ? 0 : n;
    std::copy_n(bv.data() + static_cast<std::size_t>(nb) * C2 * HW, C2 * HW, dst + C1 * HW);
  }
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), "concat_channels", {a, b}, [=](Node& self) {
    for (int n = 0; n < N; ++n) {
      const double* src = self.grad.data() + static_cast<std::size_t>(n) * (C1 + C2) * HW;
      if (an->requires_grad) {
        double* ga = an->grad_buffer().data() + static_cast<std::size_t>(n) * C1 * HW;
        for (std::size_t i = 0; i < C1 * HW; ++i) ga[i] += src[i];
      }
      if (bn->requires_grad) {
        const int nb = Nb == 1 ? 0 : n;
        double* gb = bn->grad_buffer().data() + static_cast<std::size_t>(nb) * C2 * HW;
        for (std::size_t i = 0; i < C2 * HW; ++i) gb[i] += src[C1 * HW + i];
      }
    }
  });
}

Var chw_to_hwc(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 3, "chw_to_hwc: expects [C,H,W]");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  Tensor out({H, W, C});
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) out.at(h, w, c) = xv.at(c, h, w);
  auto xn = x.node();
  return make_result(std::move(out), "chw_to_hwc", {x}, [=](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) g.at(c, h, w) += self.grad.at(h, w, c);
  });
}

Var select_rows(const Var& x, std::span<const int> rows) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 1, "select_rows: scalar input");
  const int N = xv.dim(0);
  const std::size_t row = N == 0 ? 0 : xv.size() / N;
  std::vector<int> shape = xv.shape();
  shape[0] = static_cast<int>(rows.size());
  Tensor out(shape);
  std::vector<int> idx(rows.begin(), rows.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] >= 0 && idx[r] < N, "select_rows: index out of range");
    std::copy_n(xv.data() + idx[r] * row, row, out.data() + r * row);
  }
  auto xn = x.node();
  return make_result(std::move(out), "select_rows", {x}, [=](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t i = 0; i < row; ++i) g[idx[r] * row + i] += self.grad[r * row + i];
  });
}

Var slice_columns(const Var& x, int begin, int end) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2, "slice_columns: expects [N,D]");
  const int N = xv.dim(0), D = xv.dim(1);
  require(0 <= begin && begin <= end && end <= D, "slice_columns: bad range");
  const int Wd = end - begin;
  Tensor out({N, Wd});
  for (int n = 0; n < N; ++n)
    for (int j = 0; j < Wd; ++j) out[static_cast<std::size_t>(n) * Wd + j] = xv[static_cast<std::size_t>(n) * D + begin + j];
  auto xn = x.node();
  return make_result(std::move(out), "slice_columns", {x}, [=](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (int n = 0; n < N; ++n)
      for (int j = 0; j < Wd; ++j)
        g[static_cast<std::size_t>(n) * D + begin + j] += self.grad[static_cast<std::size_t>(n) * Wd + j];
  });
}

Var sum_all(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().values()) acc += v;
  auto xn = x.node();
  return make_result(Tensor({1}, acc), "sum_all", {x}, [xn](Node& self) {
    Tensor& g = xn->grad_buffer();
    const double go = self.grad[0];
    for (double& v : g.values()) v += go;
  });
}

// ---- region alignment ---------------------------------------------------

Var roi_align(const Var& fm, std::span<const RoiBox> boxes, double spatial_scale, int out_size,
              int sampling_ratio) {
  const Tensor& fv = fm.value();
  require(fv.rank() == 3, "roi_align: expects [C,H,W]");
  require(out_size >= 1 && sampling_ratio >= 1, "roi_align: bad output geometry");
  const int C = fv.dim(0), H = fv.dim(1), W = fv.dim(2);
  const int P = static_cast<int>(boxes.size());
  const int cells = out_size * out_size;
  const int samples = sampling_ratio * sampling_ratio;
  const double inv_count = 1.0 / samples;

  // Every output cell is a fixed weighted sum of feature taps shared by all
  // channels; flatten them once and keep them for the backward pass.
  const int per_cell = samples * 4;
  auto index = std::make_shared<std::vector<int>>(static_cast<std::size_t>(P) * cells * per_cell, 0);
  auto weight = std::make_shared<std::vector<double>>(index->size(), 0.0);
  for (int p = 0; p < P; ++p) {
    const double sx = boxes[p].x1 * spatial_scale - 0.5;
    const double sy = boxes[p].y1 * spatial_scale - 0.5;
    const double bw = (boxes[p].x2 - boxes[p].x1) * spatial_scale / out_size;
    const double bh = (boxes[p].y2 - boxes[p].y1) * spatial_scale / out_size;
    for (int ph = 0; ph < out_size; ++ph)
      for (int pw = 0; pw < out_size; ++pw)
        for (int iy = 0; iy < sampling_ratio; ++iy)
          for (int ix = 0; ix < sampling_ratio; ++ix) {
            const double y = sy + ph * bh + (iy + 0.5) * bh / sampling_ratio;
            const double x = sx + pw * bw + (ix + 0.5) * bw / sampling_ratio;
            BilinearTap tap;
            if (!bilinear_tap(y, x, H, W, tap)) continue;
            const std::size_t base = (static_cast<std::size_t>(p) * cells + ph * out_size + pw) * per_cell +
                                     (iy * sampling_ratio + ix) * 4;
            for (int q = 0; q < 4; ++q) {
              (*index)[base + q] = tap.index[q];
              (*weight)[base + q] = tap.weight[q] * inv_count;
            }
          }
  }

  Tensor out({P, C, out_size, out_size});
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  {
    const int* idx = index->data();
    const double* wt = weight->data();
    const double* src = fv.data();
    double* dst = out.data();
    for (int p = 0; p < P; ++p)
      for (int cell = 0; cell < cells; ++cell) {
        const std::size_t base = (static_cast<std::size_t>(p) * cells + cell) * per_cell;
        for (int c = 0; c < C; ++c) {
          const double* plane = src + c * HW;
          double acc = 0.0;
          for (int e = 0; e < per_cell; ++e) acc += wt[base + e] * plane[idx[base + e]];
          dst[(static_cast<std::size_t>(p) * C + c) * cells + cell] = acc;
        }
      }
  }

  auto fn = fm.node();
  return make_result(std::move(out), "roi_align", {fm}, [=](Node& self) {
    double* g = fn->grad_buffer().data();
    const int* idx = index->data();
    const double* wt = weight->data();
    for (int p = 0; p < P; ++p)
      for (int cell = 0; cell < cells; ++cell) {
        const std::size_t base = (static_cast<std::size_t>(p) * cells + cell) * per_cell;
        for (int c = 0; c < C; ++c) {
          const double go = self.grad[(static_cast<std::size_t>(p) * C + c) * cells + cell];
          if (go == 0.0) continue;
          double* plane = g + c * HW;
          for (int e = 0; e < per_cell; ++e) plane[idx[base + e]] += go * wt[base + e];
        }
      }
  });
}

// ---- losses -------------------------------------------------------------

double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double bce_value(double logit, double label) noexcept {
  return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
}

double smooth_l1_value(double diff, double beta) noexcept {
  const double a = std::abs(diff);
  return a < beta ? 0.5 * a * a / beta : a - 0.5 * beta;
}

Var bce_with_logits(const Var& logits, std::span<const double> labels, std::span<const double> weights,
                    double normalizer) {
  const Tensor& lv = logits.value();
  require(lv.size() == labels.size() && lv.size() == weights.size(), "bce_with_logits: size mismatch");
  require(normalizer > 0.0, "bce_with_logits: normalizer must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    if (weights[i] != 0.0) acc += weights[i] * bce_value(lv[i], labels[i]);
  }
  std::vector<double> y(labels.begin(), labels.end());
  std::vector<double> wt(weights.begin(), weights.end());
  auto ln = logits.node();
  return make_result(Tensor({1}, acc / normalizer), "bce_with_logits", {logits},
                     [=](Node& self) {
                       Tensor& g = ln->grad_buffer();
                       const double go = self.grad[0] / normalizer;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (wt[i] != 0.0) g[i] += go * wt[i] * (sigmoid(ln->value[i]) - y[i]);
                       }
                     });
}

Var smooth_l1(const Var& pred, const Tensor& target, std::span<const double> row_weights,
              double normalizer, double beta) {
  const Tensor& pv = pred.value();
  require(pv.rank() == 2 && pv.same_shape(target), "smooth_l1: shape mismatch");
  const int N = pv.dim(0), K = pv.dim(1);
  require(row_weights.size() == static_cast<std::size_t>(N), "smooth_l1: weight count mismatch");
  require(normalizer > 0.0, "smooth_l1: normalizer must be positive");
  double acc = 0.0;
  for (int n = 0; n < N; ++n) {
    if (row_weights[n] == 0.0) continue;
    for (int k = 0; k < K; ++k) {
      const std::size_t i = static_cast<std::size_t>(n) * K + k;
      acc += row_weights[n] * smooth_l1_value(pv[i] - target[i], beta);
    }
  }
  std::vector<double> wt(row_weights.begin(), row_weights.end());
  auto pn = pred.node();
  Tensor tgt = target;
  return make_result(Tensor({1}, acc / normalizer), "smooth_l1", {pred}, [=](Node& self) {
    Tensor& g = pn->grad_buffer();
    const double go = self.grad[0] / normalizer;
    for (int n = 0; n < N; ++n) {
      if (wt[n] == 0.0) continue;
      for (int k = 0; k < K; ++k) {
        const std::size_t i = static_cast<std::size_t>(n) * K + k;
        const double d = pn->value[i] - tgt[i];
        const double dd = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
        g[i] += go * wt[n] * dd;
      }
    }
  });
}

}  // namespace fsdet::ag

#pragma once

// Reverse-mode differentiation over the tensor kernels, plus the SGD step the
// training loop uses. Graphs evaluate eagerly at construction; backward walks
// nodes in reverse creation order with a fixed accumulation order, so
// identical graphs always produce bitwise-identical gradients.

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dcffnet/tensor.hpp"

namespace dcff {

enum class Op {
  constant,
  param,
  conv2d,
  dw_xcorr,
  resize,
  add,
  add_n,
  relu,
  scale_shift,
  channel_sum,
  bias_add,
  exp_,
  scale,
  sum,
  weighted_sum,
  logistic_loss,
  softmax_xent,
  iou_loss,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::constant: return "constant";
    case Op::param: return "param";
    case Op::conv2d: return "conv2d";
    case Op::dw_xcorr: return "depthwise_xcorr";
    case Op::resize: return "resize_trilinear";
    case Op::add: return "add";
    case Op::add_n: return "add_n";
    case Op::relu: return "relu";
    case Op::scale_shift: return "scale_shift";
    case Op::channel_sum: return "channel_sum";
    case Op::bias_add: return "bias_add";
    case Op::exp_: return "exp";
    case Op::scale: return "scale";
    case Op::sum: return "sum";
    case Op::weighted_sum: return "weighted_sum";
    case Op::logistic_loss: return "logistic_loss";
    case Op::softmax_xent: return "softmax_xent";
    case Op::iou_loss: return "iou_loss";
  }
  return "?";
}

// Named parameter table. Insertion order is the canonical order for
// initialization, SGD updates, and serialization.
template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value) {
    DCFF_CHECK(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    DCFF_CHECK(it != index_.end(), "unknown parameter: " + name);
    return values_[it->second];
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    DCFF_CHECK(it != index_.end(), "unknown parameter: " + name);
    return values_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  size_t size() const { return names_.size(); }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::unordered_map<std::string, size_t> index_;
};

template <typename T>
struct Node {
  Op op = Op::constant;
  std::vector<int> inputs;
  Tensor<T> value;
  std::string name;                  // param nodes
  ConvSpec spec;                     // conv2d
  std::vector<int64_t> target_shape; // resize
  double alpha = 1.0;                // scale
  Tensor<T> aux;                     // labels / readout weights / reg targets
  Tensor<T> aux2;                    // iou positive mask
  bool balanced = true;              // softmax_xent averaging mode
  bool zero_positives = false;       // iou_loss had an empty positive set
};

template <typename T>
struct Gradients {
  std::vector<Tensor<T>> by_node;  // empty tensor where no gradient flowed
  std::map<std::string, int> param_nodes;

  bool has(int id) const { return !by_node[static_cast<size_t>(id)].data.empty(); }
  const Tensor<T>& at(int id) const { return by_node[static_cast<size_t>(id)]; }

  // dLoss/dParam for every parameter that participated in the graph.
  std::map<std::string, Tensor<T>> params() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, id] : param_nodes)
      if (has(id)) out[name] = by_node[static_cast<size_t>(id)];
    return out;
  }
};

template <typename T>
class Graph {
 public:
  Graph() = default;
  explicit Graph(ParamStore<T>* store) : store_(store) {}

  int constant(Tensor<T> v) {
    Node<T> n;
    n.op = Op::constant;
    n.value = std::move(v);
    return push(std::move(n));
  }

  // Parameter leaf; memoized so both siamese branches share one node.
  int param(const std::string& name) {
    DCFF_CHECK(store_ != nullptr, "graph has no parameter store");
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return it->second;
    Node<T> n;
    n.op = Op::param;
    n.value = store_->get(name);
    n.name = name;
    int id = push(std::move(n));
    param_nodes_[name] = id;
    return id;
  }

  int conv2d(int x, int w, int b, const ConvSpec& spec) {
    Node<T> n;
    n.op = Op::conv2d;
    n.spec = spec;
    n.inputs = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    n.value = dcff::conv2d(value(x), value(w), b >= 0 ? value(b) : Tensor<T>{}, spec);
    return push(std::move(n));
  }

  int dw_xcorr(int search, int templ) {
    Node<T> n;
    n.op = Op::dw_xcorr;
    n.inputs = {search, templ};
    n.value = dcff::depthwise_xcorr(value(search), value(templ));
    return push(std::move(n));
  }

  int resize(int x, std::vector<int64_t> target) {
    Node<T> n;
    n.op = Op::resize;
    n.inputs = {x};
    n.value = dcff::resize_trilinear(value(x), target);
    n.target_shape = std::move(target);
    return push(std::move(n));
  }

  int add(int a, int b) {
    Node<T> n;
    n.op = Op::add;
    n.inputs = {a, b};
    n.value = dcff::add(value(a), value(b));
    return push(std::move(n));
  }

  int add_n(const std::vector<int>& xs) {
    DCFF_CHECK(!xs.empty(), "add_n: needs at least one input");
    Node<T> n;
    n.op = Op::add_n;
    n.inputs = xs;
    n.value = value(xs[0]);
    for (size_t i = 1; i < xs.size(); ++i) n.value = dcff::add(n.value, value(xs[i]));
    return push(std::move(n));
  }

  int relu(int x) {
    Node<T> n;
    n.op = Op::relu;
    n.inputs = {x};
    n.value = dcff::relu(value(x));
    return push(std::move(n));
  }

  int scale_shift(int x, int gamma, int beta) {
    Node<T> n;
    n.op = Op::scale_shift;
    n.inputs = {x, gamma, beta};
    n.value = dcff::scale_shift(value(x), value(gamma), value(beta));
    return push(std::move(n));
  }

  // CxHxW -> 1xHxW sum over channels.
  int channel_sum(int x) {
    const Tensor<T>& v = value(x);
    DCFF_CHECK(v.rank() == 3, "channel_sum: input must be CxHxW");
    Node<T> n;
    n.op = Op::channel_sum;
    n.inputs = {x};
    n.value = Tensor<T>({1, v.shape[1], v.shape[2]});
    for (int64_t c = 0; c < v.shape[0]; ++c)
      for (int64_t i = 0; i < v.shape[1] * v.shape[2]; ++i)
        n.value.data[static_cast<size_t>(i)] += v.data[static_cast<size_t>(c * v.shape[1] * v.shape[2] + i)];
    return push(std::move(n));
  }

  // x + b[0] broadcast; b is a one-element tensor (learnable scalar bias).
  int bias_add(int x, int b) {
    const Tensor<T>& bv = value(b);
    DCFF_CHECK(bv.numel() == 1, "bias_add: bias must be a single element");
    Node<T> n;
    n.op = Op::bias_add;
    n.inputs = {x, b};
    n.value = value(x);
    for (auto& v : n.value.data) v += bv.data[0];
    return push(std::move(n));
  }

  int expn(int x) {
    Node<T> n;
    n.op = Op::exp_;
    n.inputs = {x};
    n.value = value(x);
    for (auto& v : n.value.data) v = std::exp(v);
    return push(std::move(n));
  }

  int scale(int x, double alpha) {
    Node<T> n;
    n.op = Op::scale;
    n.inputs = {x};
    n.alpha = alpha;
    n.value = value(x);
    for (auto& v : n.value.data) v = static_cast<T>(alpha * static_cast<double>(v));
    return push(std::move(n));
  }

  int sum(int x) {
    Node<T> n;
    n.op = Op::sum;
    n.inputs = {x};
    T acc = 0;
    for (T v : value(x).data) acc += v;
    n.value = Tensor<T>({1}, std::vector<T>{acc});
    return push(std::move(n));
  }

  // sum(x * weights); the readout used by gradient checks.
  int weighted_sum(int x, Tensor<T> weights) {
    DCFF_CHECK(value(x).same_shape(weights), "weighted_sum: weight shape mismatch");
    Node<T> n;
    n.op = Op::weighted_sum;
    n.inputs = {x};
    T acc = 0;
    for (size_t i = 0; i < weights.data.size(); ++i) acc += value(x).data[i] * weights.data[i];
    n.value = Tensor<T>({1}, std::vector<T>{acc});
    n.aux = std::move(weights);
    return push(std::move(n));
  }

  // Mean over locations of log(1 + exp(-y*v)), labels y in {-1, +1}.
  int logistic_loss(int response, Tensor<T> labels) {
    const Tensor<T>& v = value(response);
    DCFF_CHECK(v.same_shape(labels), "logistic_loss: labels shape " + shape_str(labels.shape) +
                                         " must match response " + shape_str(v.shape));
    for (T y : labels.data)
      DCFF_CHECK(y == T(1) || y == T(-1), "logistic_loss: labels must be +1 or -1");
    Node<T> n;
    n.op = Op::logistic_loss;
    n.inputs = {response};
    double acc = 0;
    for (size_t i = 0; i < v.data.size(); ++i) {
      const double z = -static_cast<double>(labels.data[i]) * static_cast<double>(v.data[i]);
      acc += softplus(z);
    }
    acc /= static_cast<double>(v.numel());
    n.value = Tensor<T>({1}, std::vector<T>{static_cast<T>(acc)});
    n.aux = std::move(labels);
    return push(std::move(n));
  }

  // Two-class softmax cross-entropy over a 2xHxW logit map. Labels are +1/-1
  // per location (+1 -> channel 1). `balanced` weights each present class by
  // 1/(present_classes * class_count); otherwise a plain mean over locations.
  int softmax_xent(int logits, Tensor<T> labels, bool balanced) {
    const Tensor<T>& z = value(logits);
    DCFF_CHECK(z.rank() == 3 && z.shape[0] == 2, "softmax_xent: logits must be 2xHxW, got " + shape_str(z.shape));
    DCFF_CHECK(labels.rank() == 2 && labels.shape[0] == z.shape[1] && labels.shape[1] == z.shape[2],
               "softmax_xent: label grid must match logit map");
    Node<T> n;
    n.op = Op::softmax_xent;
    n.inputs = {logits};
    n.balanced = balanced;
    const int64_t HW = z.shape[1] * z.shape[2];
    int64_t npos = 0;
    for (T y : labels.data) {
      DCFF_CHECK(y == T(1) || y == T(-1), "softmax_xent: labels must be +1 or -1");
      if (y == T(1)) ++npos;
    }
    const int64_t nneg = HW - npos;
    double acc = 0;
    for (int64_t i = 0; i < HW; ++i) {
      const double z0 = z.data[static_cast<size_t>(i)];
      const double z1 = z.data[static_cast<size_t>(HW + i)];
      const bool pos = labels.data[static_cast<size_t>(i)] == T(1);
      acc += xent_weight(balanced, pos, npos, nneg, HW) * nll(z0, z1, pos);
    }
    n.value = Tensor<T>({1}, std::vector<T>{static_cast<T>(acc)});
    n.aux = std::move(labels);
    return push(std::move(n));
  }

  // Mean over positive locations of -ln(IoU(pred, target)); both boxes are
  // (l,t,r,b) distance fields of shape 4xHxW. IoU is clamped to [kIouEps, 1].
  // With no positives the loss is 0 and the node is flagged so callers can
  // skip the regression term.
  int iou_loss(int reg, Tensor<T> target, Tensor<T> pos_mask) {
    const Tensor<T>& p = value(reg);
    DCFF_CHECK(p.rank() == 3 && p.shape[0] == 4, "iou_loss: reg must be 4xHxW, got " + shape_str(p.shape));
    DCFF_CHECK(target.same_shape(p), "iou_loss: target shape mismatch");
    DCFF_CHECK(pos_mask.rank() == 2 && pos_mask.shape[0] == p.shape[1] && pos_mask.shape[1] == p.shape[2],
               "iou_loss: mask grid must match reg map");
    Node<T> n;
    n.op = Op::iou_loss;
    n.inputs = {reg};
    const int64_t HW = p.shape[1] * p.shape[2];
    int64_t npos = 0;
    for (T m : pos_mask.data)
      if (m != T(0)) ++npos;
    double acc = 0;
    if (npos > 0) {
      for (int64_t i = 0; i < HW; ++i) {
        if (pos_mask.data[static_cast<size_t>(i)] == T(0)) continue;
        acc += -std::log(iou_at(p, target, i, HW));
      }
      acc /= static_cast<double>(npos);
    } else {
      n.zero_positives = true;
    }
    n.value = Tensor<T>({1}, std::vector<T>{static_cast<T>(acc)});
    n.aux = std::move(target);
    n.aux2 = std::move(pos_mask);
    return push(std::move(n));
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Node<T>& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }

  int count_op(Op op) const {
    int n = 0;
    for (const auto& nd : nodes_)
      if (nd.op == op) ++n;
    return n;
  }

  // Reverse-mode sweep from a scalar loss node.
  Gradients<T> backward(int loss) const {
    DCFF_CHECK(loss >= 0 && loss < static_cast<int>(nodes_.size()), "backward: bad node id");
    DCFF_CHECK(value(loss).numel() == 1, "backward: loss node must be scalar, got shape " +
                                             shape_str(value(loss).shape));

    std::vector<char> needed(nodes_.size(), 0);
    mark_needed(loss, needed);

    Gradients<T> g;
    g.by_node.resize(nodes_.size());
    g.param_nodes = std::map<std::string, int>(param_nodes_.begin(), param_nodes_.end());
    g.by_node[static_cast<size_t>(loss)] = Tensor<T>({1}, T(1));

    for (int id = loss; id >= 0; --id) {
      if (!needed[static_cast<size_t>(id)] || !g.has(id)) continue;
      backprop_node(id, g);
    }
    return g;
  }

  static constexpr double kIouEps = 1e-7;

 private:
  int push(Node<T> n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void mark_needed(int id, std::vector<char>& needed) const {
    if (needed[static_cast<size_t>(id)]) return;
    needed[static_cast<size_t>(id)] = 1;
    for (int in : nodes_[static_cast<size_t>(id)].inputs) mark_needed(in, needed);
  }

  static double softplus(double z) {
    return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  }

  static double nll(double z0, double z1, bool pos) {
    const double m = std::max(z0, z1);
    const double lse = m + std::log(std::exp(z0 - m) + std::exp(z1 - m));
    return lse - (pos ? z1 : z0);
  }

  static double xent_weight(bool balanced, bool pos, int64_t npos, int64_t nneg, int64_t total) {
    if (!balanced) return 1.0 / static_cast<double>(total);
    const int present = (npos > 0 ? 1 : 0) + (nneg > 0 ? 1 : 0);
    const int64_t cls = pos ? npos : nneg;
    return 1.0 / (static_cast<double>(present) * static_cast<double>(cls));
  }

  // Closed-form IoU of two (l,t,r,b) vectors at flat location i.
  static double iou_at(const Tensor<T>& p, const Tensor<T>& t, int64_t i, int64_t HW) {
    const double l = p.data[static_cast<size_t>(i)], tt = p.data[static_cast<size_t>(HW + i)],
                 r = p.data[static_cast<size_t>(2 * HW + i)], b = p.data[static_cast<size_t>(3 * HW + i)];
    const double lh = t.data[static_cast<size_t>(i)], th = t.data[static_cast<size_t>(HW + i)],
                 rh = t.data[static_cast<size_t>(2 * HW + i)], bh = t.data[static_cast<size_t>(3 * HW + i)];
    const double iw = std::max(std::min(l, lh) + std::min(r, rh), 0.0);
    const double ih = std::max(std::min(tt, th) + std::min(b, bh), 0.0);
    const double inter = iw * ih;
    const double uni = (l + r) * (tt + b) + (lh + rh) * (th + bh) - inter;
    double iou = uni > 0 ? inter / uni : 0.0;
    return std::min(std::max(iou, kIouEps), 1.0);
  }

  void ensure_grad(Gradients<T>& g, int id) const {
    auto& slot = g.by_node[static_cast<size_t>(id)];
    if (slot.data.empty()) slot = Tensor<T>(value(id).shape);
  }

  void backprop_node(int id, Gradients<T>& g) const {
    const Node<T>& n = nodes_[static_cast<size_t>(id)];
    const Tensor<T>& dy = g.by_node[static_cast<size_t>(id)];
    switch (n.op) {
      case Op::constant:
      case Op::param:
        return;
      case Op::conv2d: return bw_conv2d(n, dy, g);
      case Op::dw_xcorr: return bw_dw_xcorr(n, dy, g);
      case Op::resize: return bw_resize(n, dy, g);
      case Op::add: {
        for (int in : n.inputs) {
          ensure_grad(g, in);
          auto& gx = g.by_node[static_cast<size_t>(in)];
          for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += dy.data[i];
        }
        return;
      }
      case Op::add_n: {
        for (int in : n.inputs) {
          ensure_grad(g, in);
          auto& gx = g.by_node[static_cast<size_t>(in)];
          for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += dy.data[i];
        }
        return;
      }
      case Op::relu: {
        const Tensor<T>& x = value(n.inputs[0]);
        ensure_grad(g, n.inputs[0]);
        auto& gx = g.by_node[static_cast<size_t>(n.inputs[0])];
        // subgradient at 0 is 0
        for (size_t i = 0; i < gx.data.size(); ++i)
          if (x.data[i] > T(0)) gx.data[i] += dy.data[i];
        return;
      }
      case Op::scale_shift: return bw_scale_shift(n, dy, g);
      case Op::channel_sum: {
        const Tensor<T>& x = value(n.inputs[0]);
        ensure_grad(g, n.inputs[0]);
        auto& gx = g.by_node[static_cast<size_t>(n.inputs[0])];
        const int64_t HW = x.shape[1] * x.shape[2];
        for (int64_t c = 0; c < x.shape[0]; ++c)
          for (int64_t i = 0; i < HW; ++i)
            gx.data[static_cast<size_t>(c * HW + i)] += dy.data[static_cast<size_t>(i)];
        return;
      }
      case Op::bias_add: {
        ensure_grad(g, n.inputs[0]);
        ensure_grad(g, n.inputs[1]);
        auto& gx = g.by_node[static_cast<size_t>(n.inputs[0])];
        auto& gb = g.by_node[static_cast<size_t>(n.inputs[1])];
        T acc = 0;
        for (size_t i = 0; i < gx.data.size(); ++i) {
          gx.data[i] += dy.data[i];
          acc += dy.data[i];
        }
        gb.data[0] += acc;
        return;
      }
      case Op::exp_: {
        ensure_grad(g, n.inputs[0]);
        auto& gx = g.by_node[static_cast<size_t>(n.inputs[0])];
        for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += dy.data[i] * n.value.data[i];
        return;
      }
      case Op::scale: {
        ensure_grad(g, n.inputs[0]);
        auto& gx = g.by_node[static_cast<size_t>(n.inputs[0])];
        for (size_t i = 0; i < gx.data.size(); ++i)
          gx.data[i] += static_cast<T>(n.alpha * static_cast<double>(dy.data[i]));
        return;
      }
      case Op::sum: {
        ensure_grad(g, n.inputs[0]);
        auto& gx = g.by_node[static_cast<size_t>(n.inputs[0])];
        for (auto& v : gx.data) v += dy.data[0];
        return;
      }
      case Op::weighted_sum: {
        ensure_grad(g, n.inputs[0]);
        auto& gx = g.by_node[static_cast<size_t>(n.inputs[0])];
        for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += dy.data[0] * n.aux.data[i];
        return;
      }
      case Op::logistic_loss: return bw_logistic(n, dy, g);
      case Op::softmax_xent: return bw_softmax_xent(n, dy, g);
      case Op::iou_loss: return bw_iou(n, dy, g);
    }
    fail(std::string("backward: no differentiable rule for op ") + op_name(n.op));
  }

  void bw_conv2d(const Node<T>& n, const Tensor<T>& dy, Gradients<T>& g) const {
    const Tensor<T>& x = value(n.inputs[0]);
    const Tensor<T>& w = value(n.inputs[1]);
    const bool has_bias = n.inputs.size() == 3;
    ensure_grad(g, n.inputs[0]);
    ensure_grad(g, n.inputs[1]);
    if (has_bias) ensure_grad(g, n.inputs[2]);
    auto& gx = g.by_node[static_cast<size_t>(n.inputs[0])];
    auto& gw = g.by_node[static_cast<size_t>(n.inputs[1])];

    const int64_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const int64_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const int64_t Ho = n.value.shape[1], Wo = n.value.shape[2];
    const int64_t s = n.spec.stride, p = n.spec.padding;

    for (int64_t o = 0; o < O; ++o) {
      T bacc = 0;
      for (int64_t oy = 0; oy < Ho; ++oy) {
        for (int64_t ox = 0; ox < Wo; ++ox) {
          const T go = dy.at(o, oy, ox);
          if (has_bias) bacc += go;
          for (int64_t c = 0; c < C; ++c) {
            for (int64_t ky = 0; ky < kh; ++ky) {
              const int64_t iy = oy * s - p + ky;
              if (iy < 0 || iy >= H) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t ix = ox * s - p + kx;
                if (ix < 0 || ix >= W) continue;
                gx.at(c, iy, ix) += go * w.at4(o, c, ky, kx);
                gw.at4(o, c, ky, kx) += go * x.at(c, iy, ix);
              }
            }
          }
        }
      }
      if (has_bias) g.by_node[static_cast<size_t>(n.inputs[2])].data[static_cast<size_t>(o)] += bacc;
    }
  }

  void bw_dw_xcorr(const Node<T>& n, const Tensor<T>& dy, Gradients<T>& g) const {
    const Tensor<T>& s = value(n.inputs[0]);
    const Tensor<T>& t = value(n.inputs[1]);
    ensure_grad(g, n.inputs[0]);
    ensure_grad(g, n.inputs[1]);
    auto& gs = g.by_node[static_cast<size_t>(n.inputs[0])];
    auto& gt = g.by_node[static_cast<size_t>(n.inputs[1])];
    const int64_t C = s.shape[0], Ht = t.shape[1], Wt = t.shape[2];
    const int64_t Ho = n.value.shape[1], Wo = n.value.shape[2];
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          const T go = dy.at(c, oy, ox);
          for (int64_t ky = 0; ky < Ht; ++ky)
            for (int64_t kx = 0; kx < Wt; ++kx) {
              gs.at(c, oy + ky, ox + kx) += go * t.at(c, ky, kx);
              gt.at(c, ky, kx) += go * s.at(c, oy + ky, ox + kx);
            }
        }
  }

  // Scatter upstream gradient by the interpolation weights (transpose of the
  // linear map).
  void bw_resize(const Node<T>& n, const Tensor<T>& dy, Gradients<T>& g) const {
    const Tensor<T>& x = value(n.inputs[0]);
    ensure_grad(g, n.inputs[0]);
    auto& gx = g.by_node[static_cast<size_t>(n.inputs[0])];
    if (n.value.shape == x.shape) {
      for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += dy.data[i];
      return;
    }
    const auto sc = resize_stencil(x.shape[0], n.value.shape[0]);
    const auto sy = resize_stencil(x.shape[1], n.value.shape[1]);
    const auto sx = resize_stencil(x.shape[2], n.value.shape[2]);
    for (int64_t c = 0; c < n.value.shape[0]; ++c) {
      const auto& ac = sc[static_cast<size_t>(c)];
      for (int64_t y = 0; y < n.value.shape[1]; ++y) {
        const auto& ay = sy[static_cast<size_t>(y)];
        for (int64_t xq = 0; xq < n.value.shape[2]; ++xq) {
          const auto& ax = sx[static_cast<size_t>(xq)];
          const double go = dy.at(c, y, xq);
          for (int dc = 0; dc < 2; ++dc) {
            const double wc = dc ? ac.frac : 1.0 - ac.frac;
            if (wc == 0.0) continue;
            for (int dyi = 0; dyi < 2; ++dyi) {
              const double wy = dyi ? ay.frac : 1.0 - ay.frac;
              if (wy == 0.0) continue;
              for (int dx = 0; dx < 2; ++dx) {
                const double wx = dx ? ax.frac : 1.0 - ax.frac;
                if (wx == 0.0) continue;
                gx.at(dc ? ac.hi : ac.lo, dyi ? ay.hi : ay.lo, dx ? ax.hi : ax.lo) +=
                    static_cast<T>(go * wc * wy * wx);
              }
            }
          }
        }
      }
    }
  }

  void bw_scale_shift(const Node<T>& n, const Tensor<T>& dy, Gradients<T>& g) const {
    const Tensor<T>& x = value(n.inputs[0]);
    const Tensor<T>& gamma = value(n.inputs[1]);
    ensure_grad(g, n.inputs[0]);
    ensure_grad(g, n.inputs[1]);
    ensure_grad(g, n.inputs[2]);
    auto& gx = g.by_node[static_cast<size_t>(n.inputs[0])];
    auto& gg = g.by_node[static_cast<size_t>(n.inputs[1])];
    auto& gb = g.by_node[static_cast<size_t>(n.inputs[2])];
    const int64_t C = x.shape[0], HW = x.shape[1] * x.shape[2];
    for (int64_t c = 0; c < C; ++c) {
      T acc_g = 0, acc_b = 0;
      const T gam = gamma.data[static_cast<size_t>(c)];
      for (int64_t i = 0; i < HW; ++i) {
        const size_t k = static_cast<size_t>(c * HW + i);
        gx.data[k] += dy.data[k] * gam;
        acc_g += dy.data[k] * x.data[k];
        acc_b += dy.data[k];
      }
      gg.data[static_cast<size_t>(c)] += acc_g;
      gb.data[static_cast<size_t>(c)] += acc_b;
    }
  }

  void bw_logistic(const Node<T>& n, const Tensor<T>& dy, Gradients<T>& g) const {
    const Tensor<T>& v = value(n.inputs[0]);
    ensure_grad(g, n.inputs[0]);
    auto& gv = g.by_node[static_cast<size_t>(n.inputs[0])];
    const double go = dy.data[0];
    const double inv_n = 1.0 / static_cast<double>(v.numel());
    for (size_t i = 0; i < v.data.size(); ++i) {
      const double y = n.aux.data[i];
      const double z = -y * static_cast<double>(v.data[i]);
      const double sig = 1.0 / (1.0 + std::exp(-z));
      gv.data[i] += static_cast<T>(go * inv_n * (-y) * sig);
    }
  }

  void bw_softmax_xent(const Node<T>& n, const Tensor<T>& dy, Gradients<T>& g) const {
    const Tensor<T>& z = value(n.inputs[0]);
    ensure_grad(g, n.inputs[0]);
    auto& gz = g.by_node[static_cast<size_t>(n.inputs[0])];
    const int64_t HW = z.shape[1] * z.shape[2];
    int64_t npos = 0;
    for (T y : n.aux.data)
      if (y == T(1)) ++npos;
    const int64_t nneg = HW - npos;
    const double go = dy.data[0];
    for (int64_t i = 0; i < HW; ++i) {
      const double z0 = z.data[static_cast<size_t>(i)];
      const double z1 = z.data[static_cast<size_t>(HW + i)];
      const bool pos = n.aux.data[static_cast<size_t>(i)] == T(1);
      const double w = xent_weight(n.balanced, pos, npos, nneg, HW);
      const double m = std::max(z0, z1);
      const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
      const double p1 = e1 / (e0 + e1);
      gz.data[static_cast<size_t>(i)] += static_cast<T>(go * w * ((1.0 - p1) - (pos ? 0.0 : 1.0)));
      gz.data[static_cast<size_t>(HW + i)] += static_cast<T>(go * w * (p1 - (pos ? 1.0 : 0.0)));
    }
  }

  void bw_iou(const Node<T>& n, const Tensor<T>& dy, Gradients<T>& g) const {
    if (n.zero_positives) return;
    const Tensor<T>& p = value(n.inputs[0]);
    ensure_grad(g, n.inputs[0]);
    auto& gp = g.by_node[static_cast<size_t>(n.inputs[0])];
    const int64_t HW = p.shape[1] * p.shape[2];
    int64_t npos = 0;
    for (T m : n.aux2.data)
      if (m != T(0)) ++npos;
    const double go = dy.data[0] / static_cast<double>(npos);
    for (int64_t i = 0; i < HW; ++i) {
      if (n.aux2.data[static_cast<size_t>(i)] == T(0)) continue;
      const double pd[4] = {static_cast<double>(p.data[static_cast<size_t>(i)]),
                            static_cast<double>(p.data[static_cast<size_t>(HW + i)]),
                            static_cast<double>(p.data[static_cast<size_t>(2 * HW + i)]),
                            static_cast<double>(p.data[static_cast<size_t>(3 * HW + i)])};
      const double td[4] = {static_cast<double>(n.aux.data[static_cast<size_t>(i)]),
                            static_cast<double>(n.aux.data[static_cast<size_t>(HW + i)]),
                            static_cast<double>(n.aux.data[static_cast<size_t>(2 * HW + i)]),
                            static_cast<double>(n.aux.data[static_cast<size_t>(3 * HW + i)])};
      // (l,t,r,b): horizontal overlap from (l,r), vertical from (t,b).
      const double iw = std::min(pd[0], td[0]) + std::min(pd[2], td[2]);
      const double ih = std::min(pd[1], td[1]) + std::min(pd[3], td[3]);
      const double iwc = std::max(iw, 0.0), ihc = std::max(ih, 0.0);
      const double inter = iwc * ihc;
      const double area_p = (pd[0] + pd[2]) * (pd[1] + pd[3]);
      const double area_t = (td[0] + td[2]) * (td[1] + td[3]);
      const double uni = area_p + area_t - inter;
      const double iou_raw = uni > 0 ? inter / uni : 0.0;
      if (iou_raw <= kIouEps || uni <= 0) continue;  // clamped: flat region, no gradient
      const double iou = std::min(iou_raw, 1.0);
      for (int k = 0; k < 4; ++k) {
        // dInter/dp[k]: the min picks the pred side when pred <= target.
        double dI = 0.0;
        if (iw > 0 && ih > 0) {
          const bool active = pd[k] <= td[k];
          if (active) dI = (k == 0 || k == 2) ? ihc : iwc;
        }
        const double dAp = (k == 0 || k == 2) ? (pd[1] + pd[3]) : (pd[0] + pd[2]);
        const double diou = (dI * (uni + inter) - inter * dAp) / (uni * uni);
        const double dloss = -(1.0 / iou) * diou;
        gp.data[static_cast<size_t>(k * HW + i)] += static_cast<T>(go * dloss);
      }
    }
  }

  std::vector<Node<T>> nodes_;
  ParamStore<T>* store_ = nullptr;
  std::unordered_map<std::string, int> param_nodes_;
};

// ---------------------------------------------------------------------------
// SGD with momentum and weight decay folded into the velocity
// (heavy-ball convention): v <- m*v + g + wd*p; p <- p - lr*v.

template <typename T>
struct OptimState {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::map<std::string, Tensor<T>> velocity;
};

template <typename T>
void sgd_step(ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
              OptimState<T>& state, const std::set<std::string>& trainable) {
  for (const auto& name : params.names()) {
    auto git = grads.find(name);
    if (git == grads.end() || trainable.find(name) == trainable.end()) continue;
    Tensor<T>& p = params.get(name);
    DCFF_CHECK(git->second.same_shape(p), "sgd_step: gradient shape " + shape_str(git->second.shape) +
                                              " does not match parameter " + name + " " +
                                              shape_str(p.shape));
    auto vit = state.velocity.find(name);
    if (vit == state.velocity.end()) vit = state.velocity.emplace(name, Tensor<T>(p.shape)).first;
    Tensor<T>& v = vit->second;
    DCFF_CHECK(v.same_shape(p), "sgd_step: velocity shape mismatch for " + name);
    const T lr = static_cast<T>(state.lr), mom = static_cast<T>(state.momentum),
            wd = static_cast<T>(state.weight_decay);
    for (size_t i = 0; i < p.data.size(); ++i) {
      v.data[i] = mom * v.data[i] + git->second.data[i] + wd * p.data[i];
      p.data[i] -= lr * v.data[i];
    }
  }
}

}  // namespace dcff

#pragma once

// Central finite-difference verification of every differentiable op and loss.
// Runs at f64 regardless of the runtime dtype. Non-smooth points (relu kink,
// IoU min ties) are excluded by the sampling policy, not by loosening the
// tolerance.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dcffnet/autodiff.hpp"

namespace dcff {

struct GradCheckInputReport {
  std::string input;
  double max_rel_err = 0.0;
};

struct GradCheckOpReport {
  std::string op;
  std::vector<GradCheckInputReport> inputs;
  double worst = 0.0;
  bool pass(double tol = 1e-4) const { return worst < tol; }
};

namespace detail {

struct GradCheckCase {
  std::vector<std::pair<std::string, TensorD>> inputs;
  // Builds the scalar readout from constants already pushed into the graph.
  std::function<int(Graph<double>&, const std::vector<int>&)> build;
};

// Deterministic readout weights so repeated graph builds see the same loss.
inline TensorD readout_weights(const std::vector<int64_t>& shape, uint64_t salt) {
  TensorD w(shape);
  Rng r(0x5eedc0de ^ salt);
  fill_uniform(w, r, -1.0, 1.0);
  return w;
}

// Wraps an op-output node in a fixed weighted sum.
inline int readout(Graph<double>& g, int node, uint64_t salt) {
  return g.weighted_sum(node, readout_weights(g.value(node).shape, salt));
}

inline TensorD rand_normal(std::vector<int64_t> shape, Rng& rng) {
  TensorD t(std::move(shape));
  fill_normal(t, rng, 0.0, 1.0);
  return t;
}

// |x| >= 0.1 keeps relu probes away from the kink.
inline TensorD rand_away_from_zero(std::vector<int64_t> shape, Rng& rng) {
  TensorD t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(0.1, 1.2) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
  return t;
}

inline TensorD rand_pm1_labels(std::vector<int64_t> shape, Rng& rng) {
  TensorD t(std::move(shape));
  for (auto& v : t.data) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
  // force both classes present
  t.data.front() = 1.0;
  t.data.back() = -1.0;
  return t;
}

inline GradCheckCase make_case(const std::string& op, uint64_t seed) {
  Rng rng(seed);
  GradCheckCase c;
  if (op == "conv2d") {
    ConvSpec spec{3, 3, 1, 1, 2, 3};
    c.inputs = {{"input", rand_normal({2, 4, 4}, rng)},
                {"weight", rand_normal({3, 2, 3, 3}, rng)},
                {"bias", rand_normal({3}, rng)}};
    c.build = [spec](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.conv2d(in[0], in[1], in[2], spec), 1);
    };
  } else if (op == "conv2d_strided") {
    ConvSpec spec{3, 3, 2, 1, 2, 2};
    c.inputs = {{"input", rand_normal({2, 7, 7}, rng)},
                {"weight", rand_normal({2, 2, 3, 3}, rng)},
                {"bias", rand_normal({2}, rng)}};
    c.build = [spec](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.conv2d(in[0], in[1], in[2], spec), 2);
    };
  } else if (op == "depthwise_xcorr") {
    c.inputs = {{"search", rand_normal({3, 6, 6}, rng)}, {"template", rand_normal({3, 3, 3}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.dw_xcorr(in[0], in[1]), 3);
    };
  } else if (op == "resize_trilinear") {
    c.inputs = {{"input", rand_normal({1, 2, 2}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.resize(in[0], {1, 5, 5}), 4);
    };
  } else if (op == "resize_trilinear_3axis") {
    c.inputs = {{"input", rand_normal({3, 4, 4}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.resize(in[0], {2, 7, 9}), 5);
    };
  } else if (op == "add") {
    c.inputs = {{"a", rand_normal({2, 3, 3}, rng)}, {"b", rand_normal({2, 3, 3}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.add(in[0], in[1]), 6);
    };
  } else if (op == "relu") {
    c.inputs = {{"input", rand_away_from_zero({2, 4, 4}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.relu(in[0]), 7);
    };
  } else if (op == "scale_shift") {
    c.inputs = {{"input", rand_normal({3, 4, 4}, rng)},
                {"gamma", rand_normal({3}, rng)},
                {"beta", rand_normal({3}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.scale_shift(in[0], in[1], in[2]), 8);
    };
  } else if (op == "channel_sum") {
    c.inputs = {{"input", rand_normal({3, 4, 4}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.channel_sum(in[0]), 9);
    };
  } else if (op == "bias_add") {
    c.inputs = {{"input", rand_normal({1, 3, 3}, rng)}, {"bias", rand_normal({1}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.bias_add(in[0], in[1]), 10);
    };
  } else if (op == "exp") {
    TensorD x({2, 3, 3});
    fill_uniform(x, rng, -1.0, 1.0);
    c.inputs = {{"input", x}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.expn(in[0]), 11);
    };
  } else if (op == "scale") {
    c.inputs = {{"input", rand_normal({2, 3, 3}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.scale(in[0], 0.37), 12);
    };
  } else if (op == "sum") {
    c.inputs = {{"input", rand_normal({2, 3, 3}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) { return g.sum(in[0]); };
  } else if (op == "weighted_sum") {
    c.inputs = {{"input", rand_normal({2, 3, 3}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) { return readout(g, in[0], 13); };
  } else if (op == "fc_response") {
    c.inputs = {{"search", rand_normal({3, 5, 5}, rng)},
                {"template", rand_normal({3, 2, 2}, rng)},
                {"bias", rand_normal({1}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      return readout(g, g.bias_add(g.channel_sum(g.dw_xcorr(in[0], in[1])), in[2]), 14);
    };
  } else if (op == "correlation_fusion") {
    c.inputs = {{"search", rand_normal({2, 6, 6}, rng)}, {"template", rand_normal({2, 3, 3}, rng)}};
    c.build = [](Graph<double>& g, const std::vector<int>& in) {
      int resp = g.dw_xcorr(in[0], in[1]);
      resp = g.scale(resp, 1.0 / 9.0);
      int up = g.resize(resp, g.value(in[0]).shape);
      return readout(g, g.add(in[0], up), 15);
    };
  } else if (op == "logistic_loss") {
    TensorD labels = rand_pm1_labels({1, 4, 4}, rng);
    c.inputs = {{"response", rand_normal({1, 4, 4}, rng)}};
    c.build = [labels](Graph<double>& g, const std::vector<int>& in) {
      return g.logistic_loss(in[0], labels);
    };
  } else if (op == "softmax_xent") {
    TensorD labels = rand_pm1_labels({4, 4}, rng);
    c.inputs = {{"logits", rand_normal({2, 4, 4}, rng)}};
    c.build = [labels](Graph<double>& g, const std::vector<int>& in) {
      return g.softmax_xent(in[0], labels, true);
    };
  } else if (op == "iou_loss" || op == "total_loss") {
    // Regression targets kept clear of the pred distances so no min() tie or
    // clamp boundary sits inside the finite-difference stencil.
    TensorD reg_pre({4, 3, 3});
    TensorD target({4, 3, 3});
    for (size_t i = 0; i < reg_pre.data.size(); ++i) {
      double p, t;
      do {
        p = rng.uniform(-0.6, 0.6);
        t = rng.uniform(0.6, 1.8);
      } while (std::abs(std::exp(p) - t) < 0.05);
      reg_pre.data[i] = p;
      target.data[i] = t;
    }
    TensorD mask({3, 3});
    for (auto& m : mask.data) m = rng.bernoulli(0.6) ? 1.0 : 0.0;
    mask.data[4] = 1.0;  // at least one positive
    if (op == "iou_loss") {
      c.inputs = {{"reg_pre", reg_pre}};
      c.build = [target, mask](Graph<double>& g, const std::vector<int>& in) {
        return g.iou_loss(g.expn(in[0]), target, mask);
      };
    } else {
      TensorD labels({3, 3});
      for (int64_t i = 0; i < 9; ++i) labels.data[static_cast<size_t>(i)] = mask.data[static_cast<size_t>(i)] != 0.0 ? 1.0 : -1.0;
      c.inputs = {{"cls_logits", rand_normal({2, 3, 3}, rng)}, {"reg_pre", reg_pre}};
      c.build = [target, mask, labels](Graph<double>& g, const std::vector<int>& in) {
        int lc = g.softmax_xent(in[0], labels, true);
        int lr = g.iou_loss(g.expn(in[1]), target, mask);
        return g.add(lc, lr);
      };
    }
  } else {
    fail("grad_check: unknown op " + op);
  }
  return c;
}

}  // namespace detail

inline std::vector<std::string> gradcheck_ops() {
  return {"conv2d",      "conv2d_strided", "depthwise_xcorr", "resize_trilinear",
          "resize_trilinear_3axis", "add", "relu",            "scale_shift",
          "channel_sum", "bias_add",       "exp",             "scale",
          "sum",         "weighted_sum",   "fc_response",     "correlation_fusion",
          "logistic_loss", "softmax_xent", "iou_loss",        "total_loss"};
}

// Analytic gradients vs. central differences, h = 1e-6 * max(1, |x|),
// relative error |a - n| / max(1, |a|, |n|).
inline GradCheckOpReport grad_check(const std::string& op, uint64_t seed = 1234) {
  detail::GradCheckCase c = detail::make_case(op, seed);

  auto eval = [&](const std::vector<TensorD>& inputs) {
    Graph<double> g;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& t : inputs) ids.push_back(g.constant(t));
    const int loss = c.build(g, ids);
    return std::pair<double, Graph<double>>(g.value(loss).data[0], std::move(g));
  };

  std::vector<TensorD> inputs;
  for (auto& [name, t] : c.inputs) inputs.push_back(t);

  // analytic pass
  Graph<double> g;
  std::vector<int> ids;
  for (const auto& t : inputs) ids.push_back(g.constant(t));
  const int loss = c.build(g, ids);
  Gradients<double> grads = g.backward(loss);

  GradCheckOpReport report;
  report.op = op;
  for (size_t k = 0; k < inputs.size(); ++k) {
    GradCheckInputReport ir;
    ir.input = c.inputs[k].first;
    const bool has_analytic = grads.has(ids[k]);
    for (size_t i = 0; i < inputs[k].data.size(); ++i) {
      const double x = inputs[k].data[i];
      const double h = 1e-6 * std::max(1.0, std::abs(x));
      std::vector<TensorD> plus = inputs, minus = inputs;
      plus[k].data[i] = x + h;
      minus[k].data[i] = x - h;
      const double numeric = (eval(plus).first - eval(minus).first) / (2.0 * h);
      const double analytic = has_analytic ? grads.at(ids[k]).data[i] : 0.0;
      const double rel = std::abs(analytic - numeric) /
                         std::max({1.0, std::abs(analytic), std::abs(numeric)});
      ir.max_rel_err = std::max(ir.max_rel_err, rel);
    }
    report.worst = std::max(report.worst, ir.max_rel_err);
    report.inputs.push_back(std::move(ir));
  }
  return report;
}

inline std::vector<GradCheckOpReport> grad_check_all(uint64_t seed = 1234) {
  std::vector<GradCheckOpReport> out;
  for (const auto& op : gradcheck_ops()) out.push_back(grad_check(op, seed));
  return out;
}

}  // namespace dcff

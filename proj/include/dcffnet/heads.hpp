#pragma once

// Both prediction heads and their training targets: the single-channel
// similarity head used for initialization, and the anchor-free
// classification-regression head used for fine-tuning and tracking.
// There is no centerness branch.

#include <cmath>
#include <vector>

#include "dcffnet/autodiff.hpp"
#include "dcffnet/geometry.hpp"

namespace dcff {

// Affine map from response-map indices to search-image pixel coordinates:
// image_x = offset + stride * map_x.
struct HeadGeom {
  int stride = 1;
  double offset = 0.0;
  int64_t h = 0, w = 0;

  double to_image_x(int64_t x) const { return offset + static_cast<double>(stride) * x; }
  double to_image_y(int64_t y) const { return offset + static_cast<double>(stride) * y; }
};

// ---------------------------------------------------------------------------
// Similarity head (initialization stage)

// Cross-correlation reduced over all channels, plus a learnable scalar bias.
template <typename T>
int fc_response(Graph<T>& g, int search_final, int templ_final, int bias_param) {
  return g.bias_add(g.channel_sum(g.dw_xcorr(search_final, templ_final)), bias_param);
}

// +1 within radius_px (Euclidean image-pixel distance from the map center),
// -1 elsewhere. Shape 1xHxW to match the response map.
template <typename T>
Tensor<T> fc_labels(int64_t h, int64_t w, int stride, double radius_px) {
  DCFF_CHECK(radius_px >= 0.0, "fc_labels: radius must be >= 0");
  Tensor<T> labels({1, h, w});
  const double cy = 0.5 * static_cast<double>(h - 1);
  const double cx = 0.5 * static_cast<double>(w - 1);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double d = static_cast<double>(stride) *
                       std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
      labels.at(0, y, x) = d <= radius_px ? T(1) : T(-1);
    }
  return labels;
}

// ---------------------------------------------------------------------------
// Classification-regression head

template <typename T>
struct ClsRegParamIds {
  int cls1_w, cls1_b, cls2_w, cls2_b;
  int reg1_w, reg1_b, reg2_w, reg2_b;
};

template <typename T>
struct ClsRegOut {
  int cls = -1;      // 2xHxW logits
  int reg_pre = -1;  // 4xHxW pre-activation
  int reg = -1;      // 4xHxW distances, exp-activated so they stay positive
  HeadGeom geom;
};

// DW-XCorr of the two final maps, then two 1x1 conv stacks. exp on the
// regression output enforces positive distances.
template <typename T>
ClsRegOut<T> clsreg_forward(Graph<T>& g, int search_final, int templ_final,
                            const ClsRegParamIds<T>& p, HeadGeom geom) {
  const int m = g.dw_xcorr(search_final, templ_final);
  const auto& ms = g.value(m).shape;
  const int in_ch = static_cast<int>(ms[0]);
  const int mid = static_cast<int>(g.value(p.cls1_w).shape[0]);

  const ConvSpec s1{1, 1, 1, 0, in_ch, mid};
  const ConvSpec s_cls{1, 1, 1, 0, mid, 2};
  const ConvSpec s_reg{1, 1, 1, 0, mid, 4};

  ClsRegOut<T> out;
  out.cls = g.conv2d(g.relu(g.conv2d(m, p.cls1_w, p.cls1_b, s1)), p.cls2_w, p.cls2_b, s_cls);
  out.reg_pre = g.conv2d(g.relu(g.conv2d(m, p.reg1_w, p.reg1_b, s1)), p.reg2_w, p.reg2_b, s_reg);
  out.reg = g.expn(out.reg_pre);
  geom.h = ms[1];
  geom.w = ms[2];
  out.geom = geom;
  return out;
}

// Plain-tensor view of a head forward, used at tracking time.
template <typename T>
struct HeadOutput {
  Tensor<T> cls;  // 2xHxW
  Tensor<T> reg;  // 4xHxW
  HeadGeom geom;
};

// ---------------------------------------------------------------------------
// Target assignment

template <typename T>
struct Targets {
  Tensor<T> cls_labels;  // HxW of +1/-1
  Tensor<T> reg;         // 4xHxW distances (zero where negative)
  Tensor<T> pos_mask;    // HxW of 1/0
  int64_t num_pos = 0;
  bool gt_outside = false;  // warning: box missed every mapped location
};

// A location is positive iff its image-plane point lies inside the ground
// truth box; positives get (l,t,r,b) distances to the box sides.
template <typename T>
Targets<T> assign_targets(const HeadGeom& geom, const BBox& gt) {
  DCFF_CHECK(gt.valid(), "assign_targets: ground truth box has negative extent");
  Targets<T> out;
  out.cls_labels = Tensor<T>({geom.h, geom.w}, T(-1));
  out.reg = Tensor<T>({4, geom.h, geom.w});
  out.pos_mask = Tensor<T>({geom.h, geom.w}, T(0));
  const int64_t HW = geom.h * geom.w;
  for (int64_t y = 0; y < geom.h; ++y) {
    const double py = geom.to_image_y(y);
    for (int64_t x = 0; x < geom.w; ++x) {
      const double px = geom.to_image_x(x);
      if (!gt.contains(px, py)) continue;
      const int64_t i = y * geom.w + x;
      out.cls_labels.data[static_cast<size_t>(i)] = T(1);
      out.pos_mask.data[static_cast<size_t>(i)] = T(1);
      out.reg.data[static_cast<size_t>(i)] = static_cast<T>(px - gt.x0);
      out.reg.data[static_cast<size_t>(HW + i)] = static_cast<T>(py - gt.y0);
      out.reg.data[static_cast<size_t>(2 * HW + i)] = static_cast<T>(gt.x1 - px);
      out.reg.data[static_cast<size_t>(3 * HW + i)] = static_cast<T>(gt.y1 - py);
      ++out.num_pos;
    }
  }
  out.gt_outside = out.num_pos == 0;
  return out;
}

// Inverse of assign_targets at one map location.
inline BBox decode_box(int64_t x, int64_t y, const RegVector& reg, const HeadGeom& geom) {
  return decode_box(geom.to_image_x(x), geom.to_image_y(y), reg);
}

// ---------------------------------------------------------------------------
// Combined objective

template <typename T>
struct TotalLossNodes {
  int total = -1;
  int cls = -1;
  int reg = -1;
  bool reg_skipped = false;  // no positive locations: regression term is 0
};

// L_total = L_cls + L_reg: class-balanced two-class cross-entropy plus the
// IoU loss over positive locations.
template <typename T>
TotalLossNodes<T> total_loss(Graph<T>& g, const ClsRegOut<T>& head, const Targets<T>& targets,
                             bool balanced_cls = true) {
  TotalLossNodes<T> out;
  out.cls = g.softmax_xent(head.cls, targets.cls_labels, balanced_cls);
  out.reg = g.iou_loss(head.reg, targets.reg, targets.pos_mask);
  out.reg_skipped = g.node(out.reg).zero_positives;
  out.total = g.add(out.cls, out.reg);
  return out;
}

// ---------------------------------------------------------------------------
// Inference utilities

// Positive-class probability map from a 2xHxW logit tensor.
template <typename T>
Tensor<T> softmax_positive(const Tensor<T>& cls) {
  DCFF_CHECK(cls.rank() == 3 && cls.shape[0] == 2, "softmax_positive: logits must be 2xHxW");
  const int64_t HW = cls.shape[1] * cls.shape[2];
  Tensor<T> out({cls.shape[1], cls.shape[2]});
  for (int64_t i = 0; i < HW; ++i) {
    const double z0 = cls.data[static_cast<size_t>(i)];
    const double z1 = cls.data[static_cast<size_t>(HW + i)];
    const double m = std::max(z0, z1);
    const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
    out.data[static_cast<size_t>(i)] = static_cast<T>(e1 / (e0 + e1));
  }
  return out;
}

// Row-major argmax; ties resolve to the smallest flat index.
template <typename T>
std::pair<int64_t, int64_t> argmax_yx(const Tensor<T>& map) {
  DCFF_CHECK(map.rank() == 2, "argmax_yx: expected HxW map");
  int64_t best = 0;
  for (int64_t i = 1; i < map.numel(); ++i)
    if (map.data[static_cast<size_t>(i)] > map.data[static_cast<size_t>(best)]) best = i;
  return {best / map.shape[1], best % map.shape[1]};
}

}  // namespace dcff

#pragma once

// Axis-aligned boxes in continuous image pixel coordinates, plus the
// per-location (l,t,r,b) distance vectors the regression head predicts.

#include <algorithm>
#include <cmath>

#include "dcffnet/base.hpp"

namespace dcff {

struct BBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }

  bool valid() const { return x0 <= x1 && y0 <= y1; }

  static BBox from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }

  bool contains(double x, double y) const { return x0 <= x && x <= x1 && y0 <= y && y <= y1; }
};

// Distances from an anchor point to the four box sides; non-negative for
// points inside the box.
struct RegVector {
  double l = 0, t = 0, r = 0, b = 0;
};

inline BBox decode_box(double anchor_x, double anchor_y, const RegVector& reg) {
  return {anchor_x - reg.l, anchor_y - reg.t, anchor_x + reg.r, anchor_y + reg.b};
}

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline double center_error(const BBox& a, const BBox& b) {
  return std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
}

}  // namespace dcff

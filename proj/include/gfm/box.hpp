#pragma once

#include <algorithm>
#include <array>

namespace gfm {

// Axis-aligned box in continuous pixel coordinates: pixel (r, c) covers
// [c, c+1) x [r, r+1), so a one-pixel box is (c, r, c+1, r+1).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  Box clipped(double w, double h) const {
    return {std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h), std::clamp(x2, 0.0, w),
            std::clamp(y2, 0.0, h)};
  }
  Box scaled(double s) const { return {x1 * s, y1 * s, x2 * s, y2 * s}; }

  // COCO [x, y, w, h]
  std::array<double, 4> xywh() const { return {x1, y1, width(), height()}; }
  static Box from_xywh(double x, double y, double w, double h) { return {x, y, x + w, y + h}; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

// Intersection over union; 0 for disjoint boxes.
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

}  // namespace gfm

#pragma once

#include <algorithm>
#include <array>
#include <string>

namespace vsr {

/// Integer pixel box, origin top-left, inclusive-exclusive: covers
/// pixels (y, x) with x0 <= x < x1 and y0 <= y < y1.
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  long long area() const { return static_cast<long long>(width()) * height(); }
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool containsBox(const Box& b) const {
    return b.x0 >= x0 && b.x1 <= x1 && b.y0 >= y0 && b.y1 <= y1;
  }
  bool operator==(const Box&) const = default;
};

/// Continuous box used for candidates, decoded predictions and IoU.
struct FloatBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool operator==(const FloatBox&) const = default;

  static FloatBox of(const Box& b) {
    return {static_cast<double>(b.x0), static_cast<double>(b.y0),
            static_cast<double>(b.x1), static_cast<double>(b.y1)};
  }

  FloatBox clamped(double w, double h) const {
    return {std::clamp(x0, 0.0, w), std::clamp(y0, 0.0, h),
            std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h)};
  }
};

inline double intersectionArea(const FloatBox& a, const FloatBox& b) {
  double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (w <= 0 || h <= 0) return 0.0;
  return w * h;
}

/// Intersection over union; 0 when both boxes are degenerate.
inline double iou(const FloatBox& a, const FloatBox& b) {
  double inter = intersectionArea(a, b);
  double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

inline double iou(const Box& a, const Box& b) {
  return iou(FloatBox::of(a), FloatBox::of(b));
}

inline std::string boxToString(const Box& b) {
  return "(" + std::to_string(b.x0) + "," + std::to_string(b.y0) + "," +
         std::to_string(b.x1) + "," + std::to_string(b.y1) + ")";
}

}  // namespace vsr

#pragma once

#include <algorithm>
#include <cmath>

namespace stam {

/// Axis-aligned box, top-left corner plus size. Units are whatever the caller
/// uses (pixels for I/O, [0,1]-normalized inside the model).
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return w > 0.0 && h > 0.0 ? w * h : 0.0; }

  Box scaled(double sx, double sy) const { return Box{x * sx, y * sy, w * sx, h * sy}; }

  friend bool operator==(const Box& a, const Box& b) {
    return a.x == b.x && a.y == b.y && a.w == b.w && a.h == b.h;
  }
};

/// Intersection over union; degenerate boxes contribute zero area.
inline double iou(const Box& a, const Box& b) {
  double ix = std::max(a.x, b.x);
  double iy = std::max(a.y, b.y);
  double ix2 = std::min(a.x + a.w, b.x + b.w);
  double iy2 = std::min(a.y + a.h, b.y + b.h);
  double iw = ix2 - ix, ih = iy2 - iy;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  double inter = iw * ih;
  double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace stam

#pragma once

#include <cmath>

namespace fcpmp {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(const Vec2& o) const { return x * o.x + y * o.y; }
  double norm() const { return std::hypot(x, y); }
};

inline double distance(const Vec2& a, const Vec2& b) { return (a - b).norm(); }

struct Rect {
  double x_lo = 0.0;
  double x_hi = 0.0;
  double y_lo = 0.0;
  double y_hi = 0.0;

  bool contains(double x, double y) const {
    return x >= x_lo && x <= x_hi && y >= y_lo && y <= y_hi;
  }
  bool contains(const Vec2& p) const { return contains(p.x, p.y); }
  double width() const { return x_hi - x_lo; }
  double height() const { return y_hi - y_lo; }
  Vec2 center() const { return {0.5 * (x_lo + x_hi), 0.5 * (y_lo + y_hi)}; }
};

}  // namespace fcpmp

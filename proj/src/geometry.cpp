#include "thzsim/geometry.hpp"

#include <algorithm>
#include <numbers>

namespace thz {

Obstacle::Obstacle(std::array<Point2D, 4> vertices) : v_(vertices) {
  for (const auto& p : v_) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw Error("obstacle vertex is not finite");
  }
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      if (v_[i] == v_[j]) throw Error("obstacle vertices must be distinct");
    }
  }
  int sign = 0;
  for (int i = 0; i < 4; ++i) {
    const Point2D e0 = v_[(i + 1) % 4] - v_[i];
    const Point2D e1 = v_[(i + 2) % 4] - v_[(i + 1) % 4];
    const double c = cross(e0, e1);
    if (std::abs(c) <= kOrientEps) throw Error("obstacle has collinear consecutive edges");
    const int s = c > 0 ? 1 : -1;
    if (sign == 0) sign = s;
    if (s != sign) throw Error("obstacle quadrilateral is not convex");
  }
}

Obstacle Obstacle::rectangle(double x0, double y0, double x1, double y1) {
  if (x1 < x0) std::swap(x0, x1);
  if (y1 < y0) std::swap(y0, y1);
  return Obstacle({Point2D{x0, y0}, Point2D{x1, y0}, Point2D{x1, y1}, Point2D{x0, y1}});
}

double Obstacle::area() const {
  double s = 0.0;
  for (int i = 0; i < 4; ++i) s += cross(v_[i], v_[(i + 1) % 4]);
  return std::abs(s) / 2.0;
}

bool Obstacle::contains(Point2D p) const {
  int sign = 0;
  for (int i = 0; i < 4; ++i) {
    const int o = orientation(v_[i], v_[(i + 1) % 4], p);
    if (o == 0) return false;
    if (sign == 0) sign = o;
    if (o != sign) return false;
  }
  return true;
}

int orientation(Point2D a, Point2D b, Point2D c) {
  const double v = cross(b - a, c - a);
  if (v > kOrientEps) return 1;
  if (v < -kOrientEps) return -1;
  return 0;
}

namespace {

// c is collinear with [a,b]; is it inside the bounding box?
bool on_segment(Point2D a, Point2D b, Point2D c) {
  constexpr double tol = 1e-12;
  return c.x <= std::max(a.x, b.x) + tol && c.x >= std::min(a.x, b.x) - tol &&
         c.y <= std::max(a.y, b.y) + tol && c.y >= std::min(a.y, b.y) - tol;
}

}  // namespace

bool segments_intersect(Point2D a1, Point2D a2, Point2D b1, Point2D b2) {
  const int o1 = orientation(a1, a2, b1);
  const int o2 = orientation(a1, a2, b2);
  const int o3 = orientation(b1, b2, a1);
  const int o4 = orientation(b1, b2, a2);

  if (o1 != o2 && o3 != o4 && o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0) return true;

  if (o1 == 0 && on_segment(a1, a2, b1)) return true;
  if (o2 == 0 && on_segment(a1, a2, b2)) return true;
  if (o3 == 0 && on_segment(b1, b2, a1)) return true;
  if (o4 == 0 && on_segment(b1, b2, a2)) return true;
  return false;
}

int blockage_indicator(Point2D a, Point2D b, std::span<const Obstacle> obstacles) {
  for (const auto& ob : obstacles) {
    const auto& v = ob.vertices();
    if (segments_intersect(a, b, v[0], v[2]) || segments_intersect(a, b, v[1], v[3])) return 0;
  }
  return 1;
}

double angle_between(Point2D dir_a, Point2D dir_b) {
  return std::abs(std::atan2(cross(dir_a, dir_b), dot(dir_a, dir_b)));
}

double bearing(Point2D from, Point2D to) {
  double a = std::atan2(to.y - from.y, to.x - from.x);
  if (a < 0) a += 2.0 * std::numbers::pi;
  if (a >= 2.0 * std::numbers::pi) a = 0.0;
  return a;
}

}  // namespace thz

#pragma once

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace thz {

/// Raised for every contract violation inside the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Point2D {
  double x = 0.0;  // meters
  double y = 0.0;

  friend bool operator==(const Point2D&, const Point2D&) = default;
};

inline Point2D operator-(Point2D a, Point2D b) { return {a.x - b.x, a.y - b.y}; }
inline Point2D operator+(Point2D a, Point2D b) { return {a.x + b.x, a.y + b.y}; }
inline Point2D operator*(double s, Point2D p) { return {s * p.x, s * p.y}; }

inline double dot(Point2D a, Point2D b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point2D a, Point2D b) { return a.x * b.y - a.y * b.x; }
inline double distance(Point2D a, Point2D b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Absolute collinearity tolerance for orientation tests, in m^2.
inline constexpr double kOrientEps = 1e-9;

/// Convex quadrilateral footprint of a building or tree. Diagonals are
/// (v0,v2) and (v1,v3).
class Obstacle {
 public:
  /// Throws thz::Error unless the four vertices form a non-degenerate convex
  /// quadrilateral in the given order.
  explicit Obstacle(std::array<Point2D, 4> vertices);

  static Obstacle rectangle(double x0, double y0, double x1, double y1);

  const std::array<Point2D, 4>& vertices() const { return v_; }
  double area() const;
  /// Strict interior test (boundary excluded).
  bool contains(Point2D p) const;

  friend bool operator==(const Obstacle&, const Obstacle&) = default;

 private:
  std::array<Point2D, 4> v_;
};

/// -1, 0 or +1: side of c relative to the directed line a->b.
int orientation(Point2D a, Point2D b, Point2D c);

/// True iff the closed segments [a1,a2] and [b1,b2] share a point.
/// Endpoint contact counts; a zero-length segment behaves as a point.
bool segments_intersect(Point2D a1, Point2D a2, Point2D b1, Point2D b2);

/// 0 if [a,b] crosses a diagonal of any obstacle, 1 otherwise.
int blockage_indicator(Point2D a, Point2D b, std::span<const Obstacle> obstacles);

/// Smallest non-negative angle between two planar directions, in [0, pi].
double angle_between(Point2D dir_a, Point2D dir_b);

/// Heading of the vector from `from` to `to`, in [0, 2*pi).
double bearing(Point2D from, Point2D to);

}  // namespace thz

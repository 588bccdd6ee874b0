#pragma once

#include <cmath>
#include <numbers>

namespace longsim {

constexpr double kPi = std::numbers::pi;

/// Wraps an angle into (-pi, pi].
inline double normalize_angle(double a) {
  if (!std::isfinite(a)) return a;
  a = std::remainder(a, 2.0 * kPi);  // [-pi, pi]
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;

  double norm() const { return std::hypot(x, y); }
};

inline double distance(Vec2 a, Vec2 b) { return (a - b).norm(); }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

/// Planar pose: position in meters, heading in radians.
struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;

  Vec2 position() const { return {x, y}; }
  friend bool operator==(const Pose2&, const Pose2&) = default;
};

/// Expresses a world point in the frame of `frame` (x along its heading).
inline Vec2 to_local(const Pose2& frame, Vec2 p) {
  const double c = std::cos(frame.heading);
  const double s = std::sin(frame.heading);
  const double dx = p.x - frame.x;
  const double dy = p.y - frame.y;
  return {c * dx + s * dy, -s * dx + c * dy};
}

inline Vec2 to_world(const Pose2& frame, Vec2 local) {
  const double c = std::cos(frame.heading);
  const double s = std::sin(frame.heading);
  return {frame.x + c * local.x - s * local.y, frame.y + s * local.x + c * local.y};
}

/// Pose composition: `local` given in the frame of `frame`.
inline Pose2 compose(const Pose2& frame, const Pose2& local) {
  const Vec2 p = to_world(frame, {local.x, local.y});
  return {p.x, p.y, normalize_angle(frame.heading + local.heading)};
}

inline Pose2 relative_pose(const Pose2& frame, const Pose2& pose) {
  const Vec2 p = to_local(frame, pose.position());
  return {p.x, p.y, normalize_angle(pose.heading - frame.heading)};
}

/// A rigid SE(2) transform applied to world coordinates.
struct RigidTransform {
  double tx = 0.0;
  double ty = 0.0;
  double rotation = 0.0;

  Vec2 apply(Vec2 p) const {
    const double c = std::cos(rotation);
    const double s = std::sin(rotation);
    return {c * p.x - s * p.y + tx, s * p.x + c * p.y + ty};
  }
  Pose2 apply(const Pose2& p) const {
    const Vec2 q = apply(p.position());
    return {q.x, q.y, normalize_angle(p.heading + rotation)};
  }
};

}  // namespace longsim

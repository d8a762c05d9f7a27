#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "coopsim/common.hpp"

namespace coopsim {

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double heading = 0.0;  // yaw about the vertical axis, wrapped to [-pi, pi)
  TimeMs timestamp_ms = 0;

  Vec2 position() const { return {x, y}; }
};

struct Waypoint {
  double x = 0.0;
  double y = 0.0;
  TimeMs timestamp_ms = 0;

  Vec2 position() const { return {x, y}; }
};

/// Timed polyline a vehicle intends to follow. Timestamps strictly increase
/// and the first waypoint is the owner's pose at message time.
struct Trajectory {
  std::vector<Waypoint> waypoints;

  bool empty() const { return waypoints.empty(); }

  /// Linear interpolation of position at time t, clamped to the endpoints.
  Vec2 position_at(TimeMs t) const {
    if (waypoints.empty()) return {};
    if (t <= waypoints.front().timestamp_ms) return waypoints.front().position();
    if (t >= waypoints.back().timestamp_ms) return waypoints.back().position();
    for (std::size_t i = 1; i < waypoints.size(); ++i) {
      if (t <= waypoints[i].timestamp_ms) {
        const auto& a = waypoints[i - 1];
        const auto& b = waypoints[i];
        const double span = static_cast<double>(b.timestamp_ms - a.timestamp_ms);
        const double f = span > 0.0 ? static_cast<double>(t - a.timestamp_ms) / span : 0.0;
        return a.position() + (b.position() - a.position()) * f;
      }
    }
    return waypoints.back().position();
  }
};

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

// 24 bytes per point (3 doubles); object payload sizes follow from this.
inline constexpr std::size_t kBytesPerPoint = sizeof(Point3);
static_assert(kBytesPerPoint == 24);

struct PointCloud {
  std::vector<Point3> points;
  std::string frame_id;
};

class invalid_transform_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rigid body transform as a 4x4 homogeneous matrix. `from`/`to` frame tags
/// are carried for bookkeeping only; the matrix is authoritative.
struct RigidTransform {
  Eigen::Matrix4d matrix = Eigen::Matrix4d::Identity();
  std::string from_frame;
  std::string to_frame;

  static RigidTransform identity(std::string frame = {}) {
    return {Eigen::Matrix4d::Identity(), frame, frame};
  }

  /// Transform from a vehicle's local frame (x forward) to the frame the pose
  /// is expressed in.
  static RigidTransform from_pose(const Pose& p, std::string from = {}, std::string to = {}) {
    RigidTransform t;
    const double c = std::cos(p.heading), s = std::sin(p.heading);
    t.matrix(0, 0) = c; t.matrix(0, 1) = -s; t.matrix(0, 3) = p.x;
    t.matrix(1, 0) = s; t.matrix(1, 1) = c;  t.matrix(1, 3) = p.y;
    t.matrix(2, 3) = p.z;
    t.from_frame = std::move(from);
    t.to_frame = std::move(to);
    return t;
  }

  bool is_rigid(double tol = 1e-9) const {
    const Eigen::Matrix3d r = matrix.topLeftCorner<3, 3>();
    if ((r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    if (std::abs(r.determinant() - 1.0) > tol) return false;
    const Eigen::RowVector4d bottom = matrix.row(3);
    return (bottom - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() <= tol;
  }

  /// Exact rigid inverse (R^T, -R^T t).
  RigidTransform inverse() const {
    RigidTransform out;
    const Eigen::Matrix3d rt = matrix.topLeftCorner<3, 3>().transpose();
    out.matrix.topLeftCorner<3, 3>() = rt;
    out.matrix.topRightCorner<3, 1>() = -rt * matrix.topRightCorner<3, 1>();
    out.from_frame = to_frame;
    out.to_frame = from_frame;
    return out;
  }

  Point3 apply(const Point3& p) const {
    const Eigen::Vector4d v = matrix * Eigen::Vector4d(p.x, p.y, p.z, 1.0);
    return {v.x(), v.y(), v.z()};
  }

  Vec2 apply(const Vec2& p) const {
    const Point3 q = apply(Point3{p.x, p.y, 0.0});
    return {q.x, q.y};
  }
};

/// a after b, i.e. compose(a, b).apply(p) == a.apply(b.apply(p)).
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.matrix * b.matrix, b.from_frame, a.to_frame};
}

/// Maps every point of `cloud` by `t` and retags the frame.
/// Throws invalid_transform_error if `t` is not rigid.
inline PointCloud apply_transform(const RigidTransform& t, const PointCloud& cloud) {
  if (!t.is_rigid(1e-6)) {
    throw invalid_transform_error("apply_transform: matrix is not a rigid transform");
  }
  PointCloud out;
  out.points.reserve(cloud.points.size());
  for (const auto& p : cloud.points) out.points.push_back(t.apply(p));
  out.frame_id = t.to_frame.empty() ? cloud.frame_id : t.to_frame;
  return out;
}

namespace detail {

inline double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squared_norm();
  if (len2 <= 0.0) return distance(p, a);
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return distance(p, a + ab * t);
}

inline void simplify_recursive(const std::vector<Waypoint>& pts, std::size_t lo, std::size_t hi,
                               double tol, std::vector<bool>& keep) {
  if (hi <= lo + 1) return;
  double worst = -1.0;
  std::size_t worst_i = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    const double d = point_segment_distance(pts[i].position(), pts[lo].position(), pts[hi].position());
    if (d > worst) {
      worst = d;
      worst_i = i;
    }
  }
  if (worst > tol) {
    keep[worst_i] = true;
    simplify_recursive(pts, lo, worst_i, tol, keep);
    simplify_recursive(pts, worst_i, hi, tol, keep);
  }
}

}  // namespace detail

/// Maximum-deviation polyline simplification keeping first and last waypoints.
/// Every dropped waypoint lies within `tolerance` meters of the retained line.
inline Trajectory downsample_trajectory(const Trajectory& traj, double tolerance) {
  if (tolerance < 0.0) throw std::invalid_argument("downsample_trajectory: negative tolerance");
  if (traj.waypoints.size() <= 2) return traj;
  std::vector<bool> keep(traj.waypoints.size(), false);
  keep.front() = keep.back() = true;
  detail::simplify_recursive(traj.waypoints, 0, traj.waypoints.size() - 1, tolerance, keep);
  Trajectory out;
  for (std::size_t i = 0; i < traj.waypoints.size(); ++i) {
    if (keep[i]) out.waypoints.push_back(traj.waypoints[i]);
  }
  return out;
}

struct CellIndex {
  int x = 0;
  int y = 0;

  auto operator<=>(const CellIndex&) const = default;
};

/// Bird's-eye-view grid layout. Cells are lower-inclusive, upper-exclusive.
struct GridSpec {
  Vec2 origin;
  double cell_size = 0.5;  // sub-meter so adjacent vehicles stay separable
  int width = 0;
  int height = 0;

  bool valid() const {
    return cell_size > 0.0 && cell_size < 1.0 && width > 0 && height > 0;
  }

  std::size_t cell_count() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  }

  std::size_t flat(CellIndex c) const {
    return static_cast<std::size_t>(c.y) * static_cast<std::size_t>(width) +
           static_cast<std::size_t>(c.x);
  }

  bool contains(CellIndex c) const {
    return c.x >= 0 && c.x < width && c.y >= 0 && c.y < height;
  }

  Vec2 cell_center(CellIndex c) const {
    return {origin.x + (c.x + 0.5) * cell_size, origin.y + (c.y + 0.5) * cell_size};
  }

  Vec2 cell_min(CellIndex c) const {
    return {origin.x + c.x * cell_size, origin.y + c.y * cell_size};
  }
};

/// Cell containing `p`, or nullopt when outside the grid (never clamped).
inline std::optional<CellIndex> grid_index(const Vec2& p, const GridSpec& spec) {
  const CellIndex c{static_cast<int>(std::floor((p.x - spec.origin.x) / spec.cell_size)),
                    static_cast<int>(std::floor((p.y - spec.origin.y) / spec.cell_size))};
  if (!spec.contains(c)) return std::nullopt;
  return c;
}

}  // namespace coopsim

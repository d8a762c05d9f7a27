#pragma once

#include <array>
#include <limits>
#include <string>
#include <vector>

#include "coopsim/geometry.hpp"

namespace coopsim {

enum class Role { Ego, Collider, Occluder, Background };

// Cooperative vehicles beacon and transmit; passive ones only drive and sense.
enum class Capability { Cooperative, Passive };

/// Oriented rectangle footprint centered on a pose.
struct Footprint {
  double length = 4.5;
  double width = 2.0;
};

struct ObbCorners {
  std::array<Vec2, 4> pts;
};

inline ObbCorners footprint_corners(const Pose& pose, const Footprint& fp) {
  const double c = std::cos(pose.heading), s = std::sin(pose.heading);
  const double hl = fp.length * 0.5, hw = fp.width * 0.5;
  ObbCorners out;
  const std::array<std::array<double, 2>, 4> local = {{{hl, hw}, {hl, -hw}, {-hl, -hw}, {-hl, hw}}};
  for (std::size_t i = 0; i < 4; ++i) {
    out.pts[i] = {pose.x + c * local[i][0] - s * local[i][1],
                  pose.y + s * local[i][0] + c * local[i][1]};
  }
  return out;
}

namespace detail {

inline bool obb_overlap(const ObbCorners& a, const ObbCorners& b) {
  // Separating axis test over both rectangles' edge normals.
  const auto axes_of = [](const ObbCorners& r) {
    std::array<Vec2, 2> axes;
    const Vec2 e0 = r.pts[1] - r.pts[0];
    const Vec2 e1 = r.pts[3] - r.pts[0];
    axes[0] = {-e0.y, e0.x};
    axes[1] = {-e1.y, e1.x};
    return axes;
  };
  for (const auto& rect : {a, b}) {
    for (const Vec2& axis : axes_of(rect)) {
      double amin = std::numeric_limits<double>::infinity(), amax = -amin;
      double bmin = amin, bmax = amax;
      for (const Vec2& p : a.pts) {
        const double d = p.dot(axis);
        amin = std::min(amin, d);
        amax = std::max(amax, d);
      }
      for (const Vec2& p : b.pts) {
        const double d = p.dot(axis);
        bmin = std::min(bmin, d);
        bmax = std::max(bmax, d);
      }
      if (amax < bmin || bmax < amin) return false;
    }
  }
  return true;
}

}  // namespace detail

/// Minimum Euclidean distance between two oriented rectangles; 0 on overlap.
inline double min_distance(const Pose& pa, const Footprint& fa, const Pose& pb,
                           const Footprint& fb) {
  const ObbCorners a = footprint_corners(pa, fa);
  const ObbCorners b = footprint_corners(pb, fb);
  if (detail::obb_overlap(a, b)) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      best = std::min(best, detail::point_segment_distance(a.pts[i], b.pts[j], b.pts[(j + 1) % 4]));
      best = std::min(best, detail::point_segment_distance(b.pts[i], a.pts[j], a.pts[(j + 1) % 4]));
    }
  }
  return best;
}

struct VehicleState {
  VehicleId id = 0;
  Pose pose;
  double speed = 0.0;  // m/s, never negative
  Footprint footprint;
  Role role = Role::Background;
  Capability capability = Capability::Cooperative;

  // Assigned path the vehicle tracks (scenario route or planner output) and
  // the arc-length progress along it.
  std::vector<Vec2> route;
  double route_s = 0.0;
};

struct VehicleLimits {
  double max_accel = 3.0;   // m/s^2
  double max_decel = 6.0;   // m/s^2, service + emergency braking bound
};

struct DriveCommand {
  double target_speed = 0.0;
  bool emergency_brake = false;

  static DriveCommand cruise(double v) { return {v, false}; }
  static DriveCommand brake() { return {0.0, true}; }
};

namespace detail {

inline double route_length(const std::vector<Vec2>& route) {
  double len = 0.0;
  for (std::size_t i = 1; i < route.size(); ++i) len += distance(route[i - 1], route[i]);
  return len;
}

/// Position and segment heading at arc length s (clamped to the route ends).
inline void route_sample(const std::vector<Vec2>& route, double s, Vec2& pos, double& heading) {
  if (route.size() < 2) {
    if (!route.empty()) pos = route.front();
    return;
  }
  double acc = 0.0;
  for (std::size_t i = 1; i < route.size(); ++i) {
    const double seg = distance(route[i - 1], route[i]);
    if (acc + seg >= s || i + 1 == route.size()) {
      const double f = seg > 0.0 ? std::clamp((s - acc) / seg, 0.0, 1.0) : 0.0;
      pos = route[i - 1] + (route[i] - route[i - 1]) * f;
      heading = std::atan2(route[i].y - route[i - 1].y, route[i].x - route[i - 1].x);
      return;
    }
    acc += seg;
  }
}

}  // namespace detail

/// Longitudinal point-mass step. Speed moves toward the commanded target
/// bounded by the acceleration limits; position advances along the assigned
/// route (or straight along the heading when no route is set).
inline VehicleState step_vehicle(const VehicleState& v, const DriveCommand& cmd, TimeMs dt_ms,
                                 const VehicleLimits& limits = {}) {
  if (dt_ms == 0) throw std::invalid_argument("step_vehicle: dt must be positive");
  const double dt = static_cast<double>(dt_ms) / 1000.0;
  VehicleState out = v;

  const double target = cmd.emergency_brake ? 0.0 : std::max(0.0, cmd.target_speed);
  double new_speed = v.speed;
  if (target > v.speed) {
    new_speed = std::min(target, v.speed + limits.max_accel * dt);
  } else if (target < v.speed) {
    new_speed = std::max(target, v.speed - limits.max_decel * dt);
  }
  new_speed = std::max(0.0, new_speed);

  const double advance = 0.5 * (v.speed + new_speed) * dt;
  out.speed = new_speed;
  out.pose.timestamp_ms = v.pose.timestamp_ms + dt_ms;

  if (v.route.size() >= 2) {
    const double len = detail::route_length(v.route);
    out.route_s = std::min(v.route_s + advance, len);
    Vec2 pos = v.pose.position();
    double heading = v.pose.heading;
    detail::route_sample(v.route, out.route_s, pos, heading);
    out.pose.x = pos.x;
    out.pose.y = pos.y;
    out.pose.heading = wrap_angle(heading);
    if (out.route_s >= len) out.speed = 0.0;  // parked at the route end
  } else {
    out.pose.x = v.pose.x + advance * std::cos(v.pose.heading);
    out.pose.y = v.pose.y + advance * std::sin(v.pose.heading);
  }
  return out;
}

/// Per-cell drivability annotation from the scenario map.
struct RoadCell {
  bool drivable = false;
  bool bidirectional = true;
  double direction = 0.0;  // allowed travel heading when unidirectional
};

struct RoadMask {
  GridSpec spec;
  std::vector<RoadCell> cells;

  const RoadCell* at(CellIndex c) const {
    if (!spec.contains(c)) return nullptr;
    return &cells[spec.flat(c)];
  }

  const RoadCell* at(const Vec2& p) const {
    const auto c = grid_index(p, spec);
    return c ? &cells[spec.flat(*c)] : nullptr;
  }
};

struct SensorSpec {
  double range = 100.0;
  double angular_resolution = 0.0030;  // rad; ~0.17 deg horizontal step
  int points_per_hit = 3;              // vertical return stack per surface hit
  double mount_height = 1.8;
  double ground_return_spacing = 2.0;  // radial spacing of ground returns, m
};

struct World {
  std::vector<VehicleState> vehicles;
  RoadMask road;
  TimeMs clock_ms = 0;

  const VehicleState* find(VehicleId id) const {
    for (const auto& v : vehicles)
      if (v.id == id) return &v;
    return nullptr;
  }

  VehicleState* find(VehicleId id) {
    for (auto& v : vehicles)
      if (v.id == id) return &v;
    return nullptr;
  }
};

namespace detail {

/// First intersection distance of ray (origin, dir) with a convex quad, or
/// +inf when the ray misses.
inline double ray_obb_distance(const Vec2& origin, const Vec2& dir, const ObbCorners& obb) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < 4; ++i) {
    const Vec2 a = obb.pts[i];
    const Vec2 b = obb.pts[(i + 1) % 4];
    const Vec2 e = b - a;
    const double denom = dir.x * e.y - dir.y * e.x;
    if (std::abs(denom) < 1e-12) continue;
    const Vec2 ao = a - origin;
    const double t = (ao.x * e.y - ao.y * e.x) / denom;      // along the ray
    const double u = (ao.x * dir.y - ao.y * dir.x) / denom;  // along the edge
    if (t >= 0.0 && u >= 0.0 && u <= 1.0) best = std::min(best, t);
  }
  return best;
}

}  // namespace detail

/// Synthesizes one bird's-eye LiDAR sweep in the observer's local frame
/// (x forward). One ray per angular step; each ray reports the first vehicle
/// footprint hit within range as a vertical stack of points, plus ground
/// returns on drivable cells up to the hit. Fully deterministic.
inline PointCloud sense_lidar(const World& world, const VehicleState& observer,
                              const SensorSpec& spec) {
  PointCloud cloud;
  cloud.frame_id = "veh:" + std::to_string(observer.id);
  const Vec2 origin = observer.pose.position();

  std::vector<ObbCorners> footprints;
  footprints.reserve(world.vehicles.size());
  for (const auto& v : world.vehicles) {
    if (v.id == observer.id) continue;
    if (distance(v.pose.position(), origin) > spec.range + v.footprint.length) continue;
    footprints.push_back(footprint_corners(v.pose, v.footprint));
  }

  const RigidTransform world_to_local =
      RigidTransform::from_pose(observer.pose, cloud.frame_id, "map").inverse();

  const int rays = static_cast<int>(2.0 * std::numbers::pi / spec.angular_resolution);
  for (int k = 0; k < rays; ++k) {
    const double theta = k * spec.angular_resolution;
    const Vec2 dir{std::cos(theta), std::sin(theta)};

    double hit = std::numeric_limits<double>::infinity();
    for (const auto& fp : footprints) {
      hit = std::min(hit, detail::ray_obb_distance(origin, dir, fp));
    }

    const double reach = std::min(hit, spec.range);
    for (double r = spec.ground_return_spacing; r < reach; r += spec.ground_return_spacing) {
      const Vec2 g = origin + dir * r;
      const RoadCell* cell = world.road.at(g);
      if (cell && cell->drivable) {
        cloud.points.push_back(world_to_local.apply(Point3{g.x, g.y, 0.0}));
      }
    }

    if (hit <= spec.range) {
      const Vec2 p = origin + dir * hit;
      for (int j = 0; j < spec.points_per_hit; ++j) {
        const double z = 0.5 + 0.4 * j;
        cloud.points.push_back(world_to_local.apply(Point3{p.x, p.y, z}));
      }
    }
  }
  return cloud;
}

}  // namespace coopsim

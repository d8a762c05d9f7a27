#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <vector>

#include "coopsim/world.hpp"

namespace coopsim {

enum class CellClass : std::uint8_t { Empty, GroundOnly, AboveGround };

/// BEV voxelization of one point cloud: each cell is classified by the
/// highest-evidence rule (any point above the ground threshold wins), and
/// carries the drivability flags of the underlying road cell.
struct OccupancyGrid {
  GridSpec spec;
  double ground_threshold = 0.2;
  std::vector<CellClass> cells;
  std::vector<RoadCell> road;

  CellClass at(CellIndex c) const {
    return spec.contains(c) ? cells[spec.flat(c)] : CellClass::Empty;
  }

  const RoadCell& road_at(CellIndex c) const { return road[spec.flat(c)]; }
};

inline OccupancyGrid build_occupancy_grid(const PointCloud& cloud, const GridSpec& spec,
                                          const RoadMask& mask, double ground_threshold = 0.2) {
  OccupancyGrid grid;
  grid.spec = spec;
  grid.ground_threshold = ground_threshold;
  grid.cells.assign(spec.cell_count(), CellClass::Empty);
  grid.road.assign(spec.cell_count(), RoadCell{});

  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const CellIndex c{x, y};
      if (const RoadCell* rc = mask.at(spec.cell_center(c))) grid.road[spec.flat(c)] = *rc;
    }
  }

  for (const auto& p : cloud.points) {
    const auto c = grid_index({p.x, p.y}, spec);
    if (!c) continue;
    auto& cls = grid.cells[spec.flat(*c)];
    if (p.z > ground_threshold) {
      cls = CellClass::AboveGround;
    } else if (cls == CellClass::Empty) {
      cls = CellClass::GroundOnly;
    }
  }
  return grid;
}

/// Above-ground point cluster on the roadway. Cells are indices on the global
/// sub-meter lattice (cell i covers [i*cell_size, (i+1)*cell_size)), so ids
/// derived from them are comparable across vehicles.
struct RoadObject {
  ObjectId id = 0;
  VehicleId owner = 0;
  double cell_size = 0.5;
  std::vector<CellIndex> cells;  // sorted
  PointCloud cloud;
  Vec2 centroid;
  std::uint32_t size_bytes = 0;
  Vec2 velocity;
  double heading = 0.0;
  TimeMs last_update = 0;
};

/// Per-peer visibility/relevance metadata for one object, sorted by peer id.
struct PeerMetric {
  VehicleId peer = 0;
  bool visible = false;
  double relevance = 0.0;
};

struct ObjectMapEntry {
  ObjectId object_id = 0;
  std::uint32_t size_bytes = 0;
  std::vector<PeerMetric> peers;

  const PeerMetric* metric_for(VehicleId peer) const {
    for (const auto& m : peers)
      if (m.peer == peer) return &m;
    return nullptr;
  }
};

/// Canonical id of a cell set: hash of the sorted lattice indices. Vehicles
/// observing the same cells agree on the id regardless of viewpoint.
inline ObjectId canonical_object_id(std::vector<CellIndex> cells) {
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& c : cells) {
    const std::int32_t raw[2] = {c.x, c.y};
    h = fnv1a64(raw, sizeof(raw), h);
  }
  return h;
}

/// Maximal 8-connected components of above-ground cells on drivable road.
/// Each object carries its above-ground points; size_bytes = 24 * points.
inline std::vector<RoadObject> extract_objects(const OccupancyGrid& grid, const PointCloud& cloud,
                                               VehicleId owner = 0, TimeMs now_ms = 0) {
  const GridSpec& spec = grid.spec;
  const auto eligible = [&](CellIndex c) {
    return grid.at(c) == CellClass::AboveGround && grid.road_at(c).drivable;
  };

  std::vector<int> label(spec.cell_count(), -1);
  std::vector<std::vector<CellIndex>> components;

  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const CellIndex seed{x, y};
      if (!eligible(seed) || label[spec.flat(seed)] >= 0) continue;
      const int id = static_cast<int>(components.size());
      components.emplace_back();
      std::vector<CellIndex> stack{seed};
      label[spec.flat(seed)] = id;
      while (!stack.empty()) {
        const CellIndex c = stack.back();
        stack.pop_back();
        components[id].push_back(c);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const CellIndex n{c.x + dx, c.y + dy};
            if (spec.contains(n) && eligible(n) && label[spec.flat(n)] < 0) {
              label[spec.flat(n)] = id;
              stack.push_back(n);
            }
          }
        }
      }
    }
  }

  std::vector<RoadObject> objects(components.size());
  for (std::size_t i = 0; i < components.size(); ++i) {
    auto& obj = objects[i];
    obj.owner = owner;
    obj.cell_size = spec.cell_size;
    obj.last_update = now_ms;
    obj.cloud.frame_id = cloud.frame_id;
    obj.cells.reserve(components[i].size());
    for (const CellIndex local : components[i]) {
      const Vec2 center = spec.cell_center(local);
      obj.cells.push_back({static_cast<int>(std::floor(center.x / spec.cell_size)),
                           static_cast<int>(std::floor(center.y / spec.cell_size))});
    }
    std::sort(obj.cells.begin(), obj.cells.end());
    obj.id = canonical_object_id(obj.cells);
  }

  for (const auto& p : cloud.points) {
    if (p.z <= grid.ground_threshold) continue;
    const auto c = grid_index({p.x, p.y}, spec);
    if (!c) continue;
    const int id = label[spec.flat(*c)];
    if (id < 0) continue;
    objects[id].cloud.points.push_back(p);
    objects[id].centroid.x += p.x;
    objects[id].centroid.y += p.y;
  }

  for (auto& obj : objects) {
    const auto n = obj.cloud.points.size();
    if (n > 0) {
      obj.centroid.x /= static_cast<double>(n);
      obj.centroid.y /= static_cast<double>(n);
    }
    obj.size_bytes = static_cast<std::uint32_t>(n * kBytesPerPoint);
  }

  // Components whose cells hold no points (points fell outside the grid)
  // cannot be shared; drop them.
  std::erase_if(objects, [](const RoadObject& o) { return o.cloud.points.empty(); });
  return objects;
}

struct CentroidSample {
  Vec2 position;
  TimeMs timestamp_ms = 0;
};

struct MotionEstimate {
  Vec2 velocity;
  double heading = 0.0;
  bool known = false;  // false: single sample, treated as stationary
};

/// Finite-difference velocity over the most recent window (up to 3 samples).
inline MotionEstimate estimate_motion(std::span<const CentroidSample> history) {
  MotionEstimate est;
  if (history.size() < 2) return est;
  const std::size_t last = history.size() - 1;
  const std::size_t first = history.size() >= 3 ? history.size() - 3 : 0;
  const double dt_s =
      static_cast<double>(history[last].timestamp_ms - history[first].timestamp_ms) / 1000.0;
  if (dt_s <= 0.0) return est;
  est.velocity = (history[last].position - history[first].position) * (1.0 / dt_s);
  est.heading = (est.velocity.norm() > 1e-9) ? std::atan2(est.velocity.y, est.velocity.x) : 0.0;
  est.known = true;
  return est;
}

/// Constant-velocity translation of an object's cloud and centroid by dt.
inline RoadObject extrapolate_object(const RoadObject& obj, TimeMs dt_ms) {
  RoadObject out = obj;
  const double dt_s = static_cast<double>(dt_ms) / 1000.0;
  const Vec2 shift = obj.velocity * dt_s;
  out.centroid = obj.centroid + shift;
  for (auto& p : out.cloud.points) {
    p.x += shift.x;
    p.y += shift.y;
  }
  out.last_update = obj.last_update + dt_ms;
  return out;
}

namespace detail {

struct AngularInterval {
  double lo = 0.0;  // offsets are relative to a reference angle
  double hi = 0.0;
  bool valid = false;
};

inline Vec2 cell_box_min(CellIndex c, double cs) { return {c.x * cs, c.y * cs}; }

/// Angular interval subtended by a cell set from `origin`, expressed as
/// wrapped offsets around the direction to the first cell.
inline AngularInterval cell_set_interval(const Vec2& origin, std::span<const CellIndex> cells,
                                         double cs, double& ref_angle) {
  AngularInterval iv;
  if (cells.empty()) return iv;
  const Vec2 c0 = cell_box_min(cells.front(), cs) + Vec2{cs * 0.5, cs * 0.5};
  ref_angle = std::atan2(c0.y - origin.y, c0.x - origin.x);
  double lo = 0.0, hi = 0.0;
  for (const CellIndex c : cells) {
    const Vec2 mn = cell_box_min(c, cs);
    for (int k = 0; k < 4; ++k) {
      const Vec2 corner{mn.x + (k & 1) * cs, mn.y + ((k >> 1) & 1) * cs};
      const double off = angle_diff(std::atan2(corner.y - origin.y, corner.x - origin.x), ref_angle);
      lo = std::min(lo, off);
      hi = std::max(hi, off);
    }
  }
  iv.lo = lo;
  iv.hi = hi;
  iv.valid = true;
  return iv;
}

inline double ray_aabb_distance(const Vec2& origin, const Vec2& dir, const Vec2& mn,
                                const Vec2& mx) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int axis = 0; axis < 2; ++axis) {
    const double o = axis == 0 ? origin.x : origin.y;
    const double d = axis == 0 ? dir.x : dir.y;
    const double lo = axis == 0 ? mn.x : mn.y;
    const double hi = axis == 0 ? mx.x : mx.y;
    if (std::abs(d) < 1e-15) {
      if (o < lo || o > hi) return std::numeric_limits<double>::infinity();
      continue;
    }
    double ta = (lo - o) / d, tb = (hi - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::numeric_limits<double>::infinity();
  }
  return t0;
}

inline double ray_cells_distance(const Vec2& origin, double angle, std::span<const CellIndex> cells,
                                 double cs) {
  const Vec2 dir{std::cos(angle), std::sin(angle)};
  double best = std::numeric_limits<double>::infinity();
  for (const CellIndex c : cells) {
    const Vec2 mn = cell_box_min(c, cs);
    best = std::min(best, ray_aabb_distance(origin, dir, mn, {mn.x + cs, mn.y + cs}));
  }
  return best;
}

}  // namespace detail

/// Line-of-sight evaluation for many targets against one observer. Angular
/// intervals are cached per shape, so checking every object of a beacon costs
/// one interval sweep per (observer, shape) instead of per pair.
///
/// A target is invisible when beyond sensor range or when the union of the
/// nearer shapes' shadows covers its whole angular extent; a partially
/// covered target counts as visible.
class ShadowScene {
 public:
  ShadowScene(const Vec2& observer, std::span<const RoadObject> shapes)
      : observer_(observer), shapes_(shapes), intervals_(shapes.size()) {
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      intervals_[i].iv =
          detail::cell_set_interval(observer, shapes[i].cells, shapes[i].cell_size,
                                    intervals_[i].ref);
    }
  }

  bool visible(std::size_t target, double sensor_range) const {
    const RoadObject& tgt_obj = shapes_[target];
    if (distance(tgt_obj.centroid, observer_) > sensor_range) return false;
    const auto& tgt = intervals_[target];
    if (!tgt.iv.valid) return false;

    std::vector<std::pair<double, double>> shadows;
    for (std::size_t j = 0; j < shapes_.size(); ++j) {
      if (j == target) continue;
      const RoadObject& occ = shapes_[j];
      if (occ.id == tgt_obj.id || !intervals_[j].iv.valid) continue;
      const double shift = angle_diff(intervals_[j].ref, tgt.ref);
      const double lo = std::max(tgt.iv.lo, intervals_[j].iv.lo + shift);
      const double hi = std::min(tgt.iv.hi, intervals_[j].iv.hi + shift);
      if (lo >= hi) continue;
      // Shapes are disjoint, so one probe ray decides which is in front
      // across the whole overlap.
      const double mid = tgt.ref + 0.5 * (lo + hi);
      const double d_occ = detail::ray_cells_distance(observer_, mid, occ.cells, occ.cell_size);
      const double d_tgt =
          detail::ray_cells_distance(observer_, mid, tgt_obj.cells, tgt_obj.cell_size);
      if (d_occ < d_tgt) shadows.emplace_back(lo, hi);
    }

    std::sort(shadows.begin(), shadows.end());
    double covered_to = tgt.iv.lo;
    constexpr double eps = 1e-12;
    for (const auto& [lo, hi] : shadows) {
      if (lo > covered_to + eps) return true;  // uncovered gap
      covered_to = std::max(covered_to, hi);
    }
    return covered_to + eps < tgt.iv.hi;
  }

 private:
  struct Cached {
    double ref = 0.0;
    detail::AngularInterval iv;
  };
  Vec2 observer_;
  std::span<const RoadObject> shapes_;
  std::vector<Cached> intervals_;
};

inline bool compute_visibility(const RoadObject& target, const Vec2& observer,
                               std::span<const RoadObject> occluders, double sensor_range) {
  std::vector<RoadObject> shapes;
  shapes.reserve(occluders.size() + 1);
  shapes.push_back(target);
  shapes.insert(shapes.end(), occluders.begin(), occluders.end());
  return ShadowScene(observer, shapes).visible(0, sensor_range);
}

inline bool compute_visibility(const RoadObject& target, const Pose& observer,
                               std::span<const RoadObject> occluders, double sensor_range) {
  return compute_visibility(target, observer.position(), occluders, sensor_range);
}

/// Rasterizes a vehicle footprint onto the global lattice, producing a shape
/// usable as an occluder (e.g. the sensing vehicle's own body).
inline RoadObject footprint_as_object(const Pose& pose, const Footprint& fp, double cell_size,
                                      VehicleId owner) {
  RoadObject obj;
  obj.owner = owner;
  obj.cell_size = cell_size;
  obj.centroid = pose.position();
  const ObbCorners obb = footprint_corners(pose, fp);
  double mnx = obb.pts[0].x, mxx = mnx, mny = obb.pts[0].y, mxy = mny;
  for (const auto& p : obb.pts) {
    mnx = std::min(mnx, p.x);
    mxx = std::max(mxx, p.x);
    mny = std::min(mny, p.y);
    mxy = std::max(mxy, p.y);
  }
  const Vec2 axis_x = obb.pts[1] - obb.pts[0];
  const Vec2 axis_y = obb.pts[3] - obb.pts[0];
  for (int iy = static_cast<int>(std::floor(mny / cell_size));
       iy <= static_cast<int>(std::floor(mxy / cell_size)); ++iy) {
    for (int ix = static_cast<int>(std::floor(mnx / cell_size));
         ix <= static_cast<int>(std::floor(mxx / cell_size)); ++ix) {
      const Vec2 center{(ix + 0.5) * cell_size, (iy + 0.5) * cell_size};
      const Vec2 rel = center - obb.pts[0];
      const double u = rel.dot(axis_x) / axis_x.squared_norm();
      const double v = rel.dot(axis_y) / axis_y.squared_norm();
      if (u >= 0.0 && u <= 1.0 && v >= 0.0 && v <= 1.0) obj.cells.push_back({ix, iy});
    }
  }
  std::sort(obj.cells.begin(), obj.cells.end());
  obj.id = canonical_object_id(obj.cells);
  return obj;
}

struct ConflictPrediction {
  TimeMs time_ms = 0;     // absolute time of closest approach
  Vec2 position;          // tracked party's position at that time
  double min_distance = 0.0;
};

/// Earliest predicted conflict between a timed trajectory and a constant
/// velocity track. Scans trajectory segments in time order and returns the
/// closest-approach point of the first segment whose separation drops below
/// `threshold_m` within `horizon_ms` of the trajectory start.
inline std::optional<ConflictPrediction> earliest_conflict(const Trajectory& traj,
                                                           const Vec2& obj_pos, TimeMs obj_t,
                                                           const Vec2& obj_vel, double threshold_m,
                                                           TimeMs horizon_ms) {
  if (traj.waypoints.size() < 2) return std::nullopt;
  const TimeMs start = traj.waypoints.front().timestamp_ms;
  const TimeMs deadline = start + horizon_ms;

  const auto check_segment = [&](const Waypoint& a, const Waypoint& b,
                                 TimeMs seg_end) -> std::optional<ConflictPrediction> {
    const double seg_s = static_cast<double>(b.timestamp_ms - a.timestamp_ms) / 1000.0;
    const Vec2 peer_vel = seg_s > 0.0 ? (b.position() - a.position()) * (1.0 / seg_s) : Vec2{};

    // Relative state at the segment start.
    const double obj_dt = (static_cast<double>(a.timestamp_ms) - static_cast<double>(obj_t)) / 1000.0;
    const Vec2 rel0 = (obj_pos + obj_vel * obj_dt) - a.position();
    const Vec2 relv = obj_vel - peer_vel;

    const double win_s = static_cast<double>(seg_end - a.timestamp_ms) / 1000.0;
    double t_star = 0.0;
    const double v2 = relv.squared_norm();
    if (v2 > 1e-12) t_star = std::clamp(-rel0.dot(relv) / v2, 0.0, win_s);
    const double dist = (rel0 + relv * t_star).norm();
    if (dist >= threshold_m) return std::nullopt;
    ConflictPrediction c;
    c.time_ms = a.timestamp_ms + static_cast<TimeMs>(t_star * 1000.0 + 0.5);
    const double f = seg_s > 0.0 ? std::min(1.0, t_star / seg_s) : 0.0;
    c.position = a.position() + (b.position() - a.position()) * f;
    c.min_distance = dist;
    return c;
  };

  for (std::size_t i = 1; i < traj.waypoints.size(); ++i) {
    const auto& a = traj.waypoints[i - 1];
    const auto& b = traj.waypoints[i];
    if (a.timestamp_ms >= deadline) break;
    const TimeMs seg_end = std::min(b.timestamp_ms, deadline);
    if (seg_end <= a.timestamp_ms) continue;
    if (const auto c = check_segment(a, b, seg_end)) return c;
  }

  // Past its last waypoint the party holds position (a stopped or truncated
  // plan); conflicts with the standing pose still count within the horizon.
  const Waypoint& last = traj.waypoints.back();
  if (last.timestamp_ms < deadline) {
    Waypoint standing = last;
    standing.timestamp_ms = deadline;
    if (const auto c = check_segment(last, standing, deadline)) return c;
  }
  return std::nullopt;
}

enum class RelevanceMode { Boolean, ReciprocalTtc };

struct RelevanceParams {
  double collision_threshold_m = 3.0;
  TimeMs horizon_ms = 10000;
  RelevanceMode mode = RelevanceMode::Boolean;
};

/// Whether (and how soon) the object's extrapolated track conflicts with the
/// peer's trajectory. Boolean mode returns 1 on any predicted conflict;
/// reciprocal mode returns 1/TTC with TTC in milliseconds.
inline double compute_relevance(const RoadObject& obj, const Trajectory& peer_trajectory,
                                const RelevanceParams& params = {}) {
  if (peer_trajectory.waypoints.size() < 2) return 0.0;
  const auto conflict = earliest_conflict(peer_trajectory, obj.centroid, obj.last_update,
                                          obj.velocity, params.collision_threshold_m,
                                          params.horizon_ms);
  if (!conflict) return 0.0;
  if (params.mode == RelevanceMode::Boolean) return 1.0;
  const TimeMs start = peer_trajectory.waypoints.front().timestamp_ms;
  const double ttc_ms =
      std::max(1.0, static_cast<double>(conflict->time_ms) - static_cast<double>(start));
  return std::min(1.0, 1.0 / ttc_ms);
}

}  // namespace coopsim

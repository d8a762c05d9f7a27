#pragma once

#include <map>
#include <queue>

#include "coopsim/spatial.hpp"

namespace coopsim {

enum class Provenance { Own, Received };

struct FusedObject {
  RoadObject object;
  Provenance provenance = Provenance::Own;
};

/// Receiver-frame world view: own occupancy grid with received objects
/// splatted in, and the deduplicated object store keyed by canonical id.
struct FusedView {
  OccupancyGrid grid;
  std::map<ObjectId, FusedObject> objects;
};

/// Received payload: the object as shipped (cloud in the sender's frame)
/// plus the sender's frame-to-map transform.
struct ReceivedObject {
  RoadObject object;
  RigidTransform sender_transform;
};

/// Fuses received objects into the receiver's grid. Each cloud is mapped by
/// receiver_transform^-1 * sender_transform, its cells are marked above
/// ground, and objects sharing a canonical id collapse to the freshest copy.
inline FusedView fuse_received(const OccupancyGrid& own_grid,
                               std::span<const RoadObject> own_objects,
                               std::span<const ReceivedObject> received,
                               const RigidTransform& receiver_transform) {
  FusedView view;
  view.grid = own_grid;

  for (const auto& obj : own_objects) {
    auto it = view.objects.find(obj.id);
    if (it == view.objects.end() || it->second.object.last_update < obj.last_update) {
      view.objects[obj.id] = {obj, Provenance::Own};
    }
  }

  for (const auto& rx : received) {
    const RigidTransform full = compose(receiver_transform.inverse(), rx.sender_transform);
    RoadObject obj = rx.object;
    obj.cloud = apply_transform(full, rx.object.cloud);

    const Point3 c = full.apply(Point3{rx.object.centroid.x, rx.object.centroid.y, 0.0});
    obj.centroid = {c.x, c.y};
    const Point3 v0 = full.apply(Point3{0, 0, 0});
    const Point3 v1 = full.apply(Point3{rx.object.velocity.x, rx.object.velocity.y, 0.0});
    obj.velocity = {v1.x - v0.x, v1.y - v0.y};

    obj.cells.clear();
    for (const auto& p : obj.cloud.points) {
      obj.cells.push_back({static_cast<int>(std::floor(p.x / obj.cell_size)),
                           static_cast<int>(std::floor(p.y / obj.cell_size))});
      const auto cell = grid_index({p.x, p.y}, view.grid.spec);
      if (cell) view.grid.cells[view.grid.spec.flat(*cell)] = CellClass::AboveGround;
    }
    std::sort(obj.cells.begin(), obj.cells.end());
    obj.cells.erase(std::unique(obj.cells.begin(), obj.cells.end()), obj.cells.end());

    auto it = view.objects.find(obj.id);
    if (it == view.objects.end() || it->second.object.last_update < obj.last_update) {
      view.objects[obj.id] = {std::move(obj), Provenance::Received};
    }
  }
  return view;
}

struct Path {
  std::vector<Vec2> points;  // cell centerline
  double width = 2.0;

  double length() const {
    double len = 0.0;
    for (std::size_t i = 1; i < points.size(); ++i) len += distance(points[i - 1], points[i]);
    return len;
  }
};

namespace detail {

/// A cell is traversable for the swept footprint when every cell within the
/// clearance disk is in bounds, drivable, and not above ground.
inline bool cell_clear(const OccupancyGrid& grid, CellIndex c, double clearance_m) {
  const int r = static_cast<int>(std::ceil(clearance_m / grid.spec.cell_size));
  const double r2 = clearance_m * clearance_m;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const double d2 = (dx * dx + dy * dy) * grid.spec.cell_size * grid.spec.cell_size;
      if (d2 > r2) continue;
      const CellIndex n{c.x + dx, c.y + dy};
      if (!grid.spec.contains(n)) return false;
      if (!grid.road_at(n).drivable) return false;
      if (grid.at(n) == CellClass::AboveGround) return false;
    }
  }
  return true;
}

inline bool direction_ok(const RoadCell& cell, double heading) {
  if (cell.bidirectional) return true;
  return std::abs(angle_diff(heading, cell.direction)) <= std::numbers::pi / 2.0 + 1e-9;
}

}  // namespace detail

/// A* over grid cells with a heading-aware state so turns sharper than the
/// curvature bound are never generated. Expansion rejects cells whose
/// width-swept disk touches occupied or non-drivable cells, and steps that
/// violate a cell's allowed travel direction.
inline std::optional<Path> plan_path(const FusedView& view, CellIndex src, CellIndex dst,
                                     double vehicle_width, double curvature_bound,
                                     double start_heading = std::numeric_limits<double>::quiet_NaN()) {
  const OccupancyGrid& grid = view.grid;
  const GridSpec& spec = grid.spec;
  if (!spec.contains(src) || !spec.contains(dst)) return std::nullopt;
  const double clearance = vehicle_width * 0.5 + spec.cell_size * 0.5;
  if (!detail::cell_clear(grid, src, clearance) || !detail::cell_clear(grid, dst, clearance)) {
    return std::nullopt;
  }

  static constexpr int kDx[8] = {1, 1, 0, -1, -1, -1, 0, 1};
  static constexpr int kDy[8] = {0, 1, 1, 1, 0, -1, -1, -1};
  const double step_cost[8] = {1.0, std::numbers::sqrt2, 1.0, std::numbers::sqrt2,
                               1.0, std::numbers::sqrt2, 1.0, std::numbers::sqrt2};

  const std::size_t n_states = spec.cell_count() * 8;
  const auto state_of = [&](CellIndex c, int o) { return spec.flat(c) * 8 + static_cast<std::size_t>(o); };
  std::vector<double> g(n_states, std::numeric_limits<double>::infinity());
  std::vector<std::int64_t> parent(n_states, -1);

  struct Node {
    double f;
    double g;
    std::size_t state;
    bool operator>(const Node& o) const {
      if (f != o.f) return f > o.f;
      if (g != o.g) return g < o.g;  // prefer deeper progress on f-ties
      return state > o.state;
    }
  };
  std::priority_queue<Node, std::vector<Node>, std::greater<Node>> open;

  const Vec2 goal = spec.cell_center(dst);
  const auto heuristic = [&](CellIndex c) { return distance(spec.cell_center(c), goal); };

  for (int o = 0; o < 8; ++o) {
    if (!std::isnan(start_heading)) {
      const double h = o * std::numbers::pi / 4.0;
      if (std::abs(angle_diff(h, start_heading)) > curvature_bound + 1e-9) continue;
    }
    const std::size_t s = state_of(src, o);
    g[s] = 0.0;
    open.push({heuristic(src), 0.0, s});
  }

  std::int64_t goal_state = -1;
  while (!open.empty()) {
    const Node node = open.top();
    open.pop();
    if (node.g > g[node.state]) continue;
    const CellIndex cell{static_cast<int>((node.state / 8) % spec.width),
                         static_cast<int>((node.state / 8) / spec.width)};
    if (cell == dst) {
      goal_state = static_cast<std::int64_t>(node.state);
      break;
    }
    const int o = static_cast<int>(node.state % 8);
    const double heading = o * std::numbers::pi / 4.0;
    for (int no = 0; no < 8; ++no) {
      const double nh = no * std::numbers::pi / 4.0;
      if (std::abs(angle_diff(nh, heading)) > curvature_bound + 1e-9) continue;
      const CellIndex nc{cell.x + kDx[no], cell.y + kDy[no]};
      if (!spec.contains(nc)) continue;
      if (!detail::cell_clear(grid, nc, clearance)) continue;
      const RoadCell& road = grid.road_at(nc);
      if (!detail::direction_ok(road, nh)) continue;
      double step = step_cost[no] * spec.cell_size;
      // Soft preference for travelling with the lane: counter-flow cells stay
      // usable (overtaking) but are left as soon as possible.
      if (road.bidirectional && std::abs(angle_diff(nh, road.direction)) > std::numbers::pi / 2.0) {
        step *= 1.6;
      }
      const double ng = node.g + step;
      const std::size_t ns = state_of(nc, no);
      if (ng < g[ns]) {
        g[ns] = ng;
        parent[ns] = static_cast<std::int64_t>(node.state);
        open.push({ng + heuristic(nc), ng, ns});
      }
    }
  }
  if (goal_state < 0) return std::nullopt;

  Path path;
  path.width = vehicle_width;
  for (std::int64_t s = goal_state; s >= 0; s = parent[static_cast<std::size_t>(s)]) {
    const CellIndex cell{static_cast<int>((static_cast<std::size_t>(s) / 8) % spec.width),
                         static_cast<int>((static_cast<std::size_t>(s) / 8) / spec.width)};
    path.points.push_back(spec.cell_center(cell));
    if (g[static_cast<std::size_t>(s)] == 0.0) break;
  }
  std::reverse(path.points.begin(), path.points.end());
  return path;
}

/// Re-validation of a previously planned path against a fresh view.
inline bool path_clear(const FusedView& view, const Path& path) {
  const double clearance = path.width * 0.5 + view.grid.spec.cell_size * 0.5;
  for (const auto& p : path.points) {
    const auto c = grid_index(p, view.grid.spec);
    if (!c || !detail::cell_clear(view.grid, *c, clearance)) return false;
  }
  return true;
}

inline double stopping_distance(double speed_mps, double decel_mps2) {
  if (decel_mps2 <= 0.0) throw std::invalid_argument("stopping_distance: decel must be positive");
  return speed_mps * speed_mps / (2.0 * decel_mps2);
}

struct PredictedCollision {
  std::size_t waypoint_index = 0;
  TimeMs time_ms = 0;
  Vec2 position;
  ObjectId object = 0;
};

/// Earliest predicted overlap between the ego trajectory and any tracked
/// object, or nullopt when the horizon is clear. Tracks are extrapolated at
/// constant velocity; conflicts before the trajectory start are ignored.
inline std::optional<PredictedCollision> predict_collision(const Trajectory& ego,
                                                           std::span<const RoadObject> tracks,
                                                           double threshold_m,
                                                           TimeMs horizon_ms = 10000) {
  std::optional<PredictedCollision> best;
  for (const auto& track : tracks) {
    const auto conflict = earliest_conflict(ego, track.centroid, track.last_update, track.velocity,
                                            threshold_m, horizon_ms);
    if (!conflict) continue;
    if (best && best->time_ms <= conflict->time_ms) continue;
    PredictedCollision pc;
    pc.time_ms = conflict->time_ms;
    pc.position = conflict->position;
    pc.object = track.id;
    pc.waypoint_index = 0;
    for (std::size_t i = 0; i < ego.waypoints.size(); ++i) {
      pc.waypoint_index = i;
      if (ego.waypoints[i].timestamp_ms >= conflict->time_ms) break;
    }
    best = pc;
  }
  return best;
}

struct TrajectoryParams {
  double cruise_speed = 8.33;   // m/s
  double initial_speed = std::numeric_limits<double>::quiet_NaN();  // NaN: start at cruise
  double accel = 3.0;           // m/s^2 ramp toward cruise
  double decel = 6.0;           // m/s^2
  double waypoint_spacing = 2.0;
  double conflict_threshold = 3.0;
  double stop_margin = 0.0;     // halt this far short of the conflict waypoint
  TimeMs horizon_ms = 10000;
};

namespace detail {

inline std::vector<std::pair<Vec2, double>> resample_path(const Path& path, double spacing) {
  std::vector<std::pair<Vec2, double>> out;  // (position, arc length)
  if (path.points.empty()) return out;
  out.emplace_back(path.points.front(), 0.0);
  double walked = 0.0;
  double next_s = spacing;
  for (std::size_t i = 1; i < path.points.size(); ++i) {
    const Vec2 a = path.points[i - 1];
    const Vec2 b = path.points[i];
    const double seg = distance(a, b);
    while (seg > 0.0 && next_s <= walked + seg) {
      const double f = (next_s - walked) / seg;
      out.emplace_back(a + (b - a) * f, next_s);
      next_s += spacing;
    }
    walked += seg;
  }
  if (out.back().second < walked - 1e-9) out.emplace_back(path.points.back(), walked);
  return out;
}

}  // namespace detail

namespace detail {

/// Timestamps for arc-length samples under a per-sample speed profile
/// (midpoint integration; exact for piecewise-constant speed).
inline Trajectory time_profile(const std::vector<std::pair<Vec2, double>>& samples,
                               const std::vector<double>& speed, TimeMs start_ms) {
  Trajectory out;
  double t_s = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (i > 0) {
      const double ds = samples[i].second - samples[i - 1].second;
      const double v_mid = std::max(0.15, 0.5 * (speed[i - 1] + speed[i]));
      t_s += ds / v_mid;
    }
    TimeMs t = start_ms + static_cast<TimeMs>(t_s * 1000.0);
    if (!out.waypoints.empty() && t <= out.waypoints.back().timestamp_ms) {
      t = out.waypoints.back().timestamp_ms + 1;
    }
    out.waypoints.push_back({samples[i].first.x, samples[i].first.y, t});
  }
  return out;
}

}  // namespace detail

/// Times equally spaced waypoints along the path (ramping from the initial
/// speed toward cruise), then folds in the earliest predicted conflict: full
/// speed is kept until the distance to the conflict waypoint equals the
/// stopping distance, followed by a constant-deceleration ramp that stops at
/// it (or `stop_margin` short of it). The returned trajectory ends at the
/// stop point; replanning resumes once the conflict clears.
inline Trajectory plan_trajectory(const Path& path, const FusedView& view, TimeMs start_ms,
                                  const TrajectoryParams& params = {}) {
  const auto samples = detail::resample_path(path, params.waypoint_spacing);
  if (samples.empty()) return {};
  const double cruise = std::max(0.1, params.cruise_speed);
  const double v0 = std::isnan(params.initial_speed)
                        ? cruise
                        : std::clamp(params.initial_speed, 0.3, cruise);

  std::vector<double> speed(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double s = samples[i].second;
    speed[i] = std::min(cruise, std::sqrt(v0 * v0 + 2.0 * params.accel * s));
  }

  Trajectory provisional = detail::time_profile(samples, speed, start_ms);

  std::vector<RoadObject> tracks;
  tracks.reserve(view.objects.size());
  for (const auto& [id, fused] : view.objects) tracks.push_back(fused.object);
  auto conflict =
      predict_collision(provisional, tracks, params.conflict_threshold, params.horizon_ms);
  if (v0 < cruise) {
    // Also test a full-speed restart. Without it, a waiting vehicle sees the
    // conflict vanish (its slow profile arrives after the crosser has gone),
    // creeps forward, and oscillates into the crossing.
    std::vector<double> cruise_speed_profile(samples.size(), cruise);
    const Trajectory restart = detail::time_profile(samples, cruise_speed_profile, start_ms);
    const auto c2 =
        predict_collision(restart, tracks, params.conflict_threshold, params.horizon_ms);
    if (c2 && (!conflict || c2->waypoint_index < conflict->waypoint_index)) conflict = c2;
  }
  if (!conflict) return provisional;

  const double stop_s =
      std::max(0.0, samples[conflict->waypoint_index].second - params.stop_margin);
  if (stop_s <= 1e-9) {
    // Conflict at the current position: stand still.
    Trajectory hold;
    hold.waypoints.push_back(provisional.waypoints.front());
    return hold;
  }

  // Cap the profile by the braking parabola into the stop point.
  std::vector<std::pair<Vec2, double>> kept;
  std::vector<double> capped;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double s = samples[i].second;
    if (s > stop_s + 1e-9) break;
    const double brake_cap = std::sqrt(std::max(0.0, 2.0 * params.decel * (stop_s - s)));
    kept.push_back(samples[i]);
    capped.push_back(std::min(speed[i], brake_cap));
  }
  if (kept.empty() || kept.back().second < stop_s - 1e-9) {
    // Stop point between samples: interpolate along the path.
    Vec2 stop_pos = samples.back().first;
    for (std::size_t i = 1; i < samples.size(); ++i) {
      if (samples[i].second >= stop_s) {
        const double span = samples[i].second - samples[i - 1].second;
        const double f = span > 0.0 ? (stop_s - samples[i - 1].second) / span : 0.0;
        stop_pos = samples[i - 1].first + (samples[i].first - samples[i - 1].first) * f;
        break;
      }
    }
    kept.emplace_back(stop_pos, stop_s);
    capped.push_back(0.0);
  } else {
    capped.back() = 0.0;
  }
  return detail::time_profile(kept, capped, start_ms);
}

}  // namespace coopsim

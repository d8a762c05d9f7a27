#pragma once

#include <string>

#include "coopsim/channel.hpp"
#include "coopsim/control.hpp"
#include "coopsim/world.hpp"

namespace coopsim {

enum class ScenarioKind { Overtaking, LeftTurn, RedLight };
enum class SchedulerKind { Greedy, Optimal, Fptas, Agnostic, Single };

inline const char* to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::Overtaking: return "overtaking";
    case ScenarioKind::LeftTurn: return "left_turn";
    case ScenarioKind::RedLight: return "red_light";
  }
  return "?";
}

inline const char* to_string(SchedulerKind k) {
  switch (k) {
    case SchedulerKind::Greedy: return "greedy";
    case SchedulerKind::Optimal: return "optimal";
    case SchedulerKind::Fptas: return "fptas";
    case SchedulerKind::Agnostic: return "agnostic";
    case SchedulerKind::Single: return "single";
  }
  return "?";
}

inline ScenarioKind scenario_from_string(const std::string& s) {
  if (s == "overtaking") return ScenarioKind::Overtaking;
  if (s == "left_turn") return ScenarioKind::LeftTurn;
  if (s == "red_light") return ScenarioKind::RedLight;
  throw std::invalid_argument("unknown scenario: " + s);
}

inline SchedulerKind scheduler_from_string(const std::string& s) {
  if (s == "greedy") return SchedulerKind::Greedy;
  if (s == "optimal") return SchedulerKind::Optimal;
  if (s == "fptas") return SchedulerKind::Fptas;
  if (s == "agnostic") return SchedulerKind::Agnostic;
  if (s == "single") return SchedulerKind::Single;
  throw std::invalid_argument("unknown scheduler: " + s);
}

struct ScenarioConfig {
  ScenarioKind scenario = ScenarioKind::RedLight;
  double collider_speed_kmh = 30.0;  // {20, 30, 40} in the standard sweep
  double delta_s = 0.0;              // collider leads (+) or trails (-) the ego at the conflict
  int density = 10;                  // vehicles inside the scheduler domain
  SchedulerKind scheduler = SchedulerKind::Greedy;
  ChannelConfig channel;
  SensorSpec sensor;
  SensorSpec background_sensor{.range = 60.0, .angular_resolution = 0.012, .points_per_hit = 3,
                               .mount_height = 1.8, .ground_return_spacing = 6.0};
  std::uint64_t seed = 1;

  double ego_cruise_mps = 11.1;  // 40 km/h
  double ground_threshold = 0.2;
  // Extraction evidence floor: clusters below this are sensor noise.
  std::size_t min_object_cells = 2;
  std::size_t min_object_points = 9;
  TimeMs max_duration_ms = 60000;
  RelevanceMode relevance_mode = RelevanceMode::Boolean;
  double fptas_eps = 0.1;
  std::uint64_t knapsack_resolution = 64;
  bool write_traces = true;

  bool valid(std::string* why = nullptr) const {
    const auto fail = [&](const char* msg) {
      if (why) *why = msg;
      return false;
    };
    if (density < 3) return fail("density must be at least 3 (ego, collider, occluder)");
    if (density > 64) return fail("density above 64 is not supported");
    if (delta_s < -2.0 - 1e-9 || delta_s > 2.0 + 1e-9) return fail("delta outside [-2, 2]");
    if (collider_speed_kmh <= 0.0) return fail("collider speed must be positive");
    if (channel.frame_count() == 0) return fail("channel must have at least one frame");
    if (ego_cruise_mps <= 0.0) return fail("ego cruise speed must be positive");
    return true;
  }
};

/// One scripted run: map, initial actors, and the fixture geometry the
/// metrics are measured against.
struct ScenarioSetup {
  World world;
  GridSpec map_spec;
  DomainConfig domain;
  VehicleId ego_id = 1;
  VehicleId collider_id = 2;
  VehicleId occluder_id = 3;
  Vec2 conflict_point;
  Vec2 ego_goal;
  double collider_speed_mps = 0.0;
  double nominal_ego_conflict_s = 0.0;  // calibrated cruise time to the conflict point
};

namespace detail {

inline void paint_lane(RoadMask& mask, Vec2 a, Vec2 b, double half_width, double direction,
                       bool bidirectional) {
  const GridSpec& spec = mask.spec;
  const double pad = half_width + spec.cell_size;
  const double min_x = std::min(a.x, b.x) - pad, max_x = std::max(a.x, b.x) + pad;
  const double min_y = std::min(a.y, b.y) - pad, max_y = std::max(a.y, b.y) + pad;
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const Vec2 c = spec.cell_center({x, y});
      if (c.x < min_x || c.x > max_x || c.y < min_y || c.y > max_y) continue;
      if (point_segment_distance(c, a, b) > half_width) continue;
      RoadCell& cell = mask.cells[spec.flat({x, y})];
      if (cell.drivable && !cell.bidirectional &&
          std::abs(angle_diff(cell.direction, direction)) > 1e-6) {
        // Overlapping lanes with conflicting directions become free cells.
        cell.bidirectional = true;
      } else {
        cell.drivable = true;
        cell.bidirectional = bidirectional;
        cell.direction = direction;
      }
    }
  }
}

inline GridSpec default_map_spec() {
  GridSpec spec;
  spec.origin = {-120.0, -120.0};
  spec.cell_size = 0.5;
  spec.width = 480;
  spec.height = 480;
  return spec;
}

constexpr double kPi = std::numbers::pi;
constexpr double kHalfPi = std::numbers::pi / 2.0;

/// Four-arm intersection, two lanes per direction, used by the left-turn and
/// red-light scenarios. Lane centers at +-1.75 and +-5.25 m.
inline RoadMask intersection_mask(const GridSpec& spec) {
  RoadMask mask{spec, std::vector<RoadCell>(spec.cell_count())};
  paint_lane(mask, {-120, -1.75}, {120, -1.75}, 1.75, 0.0, false);
  paint_lane(mask, {-120, -5.25}, {120, -5.25}, 1.75, 0.0, false);
  paint_lane(mask, {120, 1.75}, {-120, 1.75}, 1.75, kPi, false);
  paint_lane(mask, {120, 5.25}, {-120, 5.25}, 1.75, kPi, false);
  paint_lane(mask, {1.75, -120}, {1.75, 120}, 1.75, kHalfPi, false);
  paint_lane(mask, {5.25, -120}, {5.25, 120}, 1.75, kHalfPi, false);
  paint_lane(mask, {-1.75, 120}, {-1.75, -120}, 1.75, -kHalfPi, false);
  paint_lane(mask, {-5.25, 120}, {-5.25, -120}, 1.75, -kHalfPi, false);
  // Intersection core: free travel in any direction.
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const Vec2 c = spec.cell_center({x, y});
      if (std::abs(c.x) <= 7.0 && std::abs(c.y) <= 7.0) {
        RoadCell& cell = mask.cells[spec.flat({x, y})];
        cell.drivable = true;
        cell.bidirectional = true;
      }
    }
  }
  return mask;
}

/// Two-lane rural road (one lane per direction, overtaking allowed) plus two
/// frontage roads that carry the background traffic.
inline RoadMask overtaking_mask(const GridSpec& spec) {
  RoadMask mask{spec, std::vector<RoadCell>(spec.cell_count())};
  paint_lane(mask, {-120, -2.0}, {120, -2.0}, 2.0, 0.0, true);
  paint_lane(mask, {120, 2.0}, {-120, 2.0}, 2.0, kPi, true);
  paint_lane(mask, {-120, -30.0}, {120, -30.0}, 1.75, 0.0, false);
  paint_lane(mask, {120, 30.0}, {-120, 30.0}, 1.75, kPi, false);
  return mask;
}

inline VehicleState make_vehicle(VehicleId id, Vec2 pos, double heading, double speed,
                                 Footprint fp, Role role, Capability cap,
                                 std::vector<Vec2> route) {
  VehicleState v;
  v.id = id;
  v.pose = {pos.x, pos.y, 0.0, heading, 0};
  v.speed = speed;
  v.footprint = fp;
  v.role = role;
  v.capability = cap;
  v.route = std::move(route);
  return v;
}

struct BackgroundLane {
  Vec2 entry;      // outer end of the arm
  Vec2 queue_end;  // where the first queued vehicle stops
  double heading;
};

/// Places background traffic on approach lanes: each vehicle drives its lane
/// at the lane's seeded speed and queues at a staggered stop line, which
/// keeps it inside the domain without ever crossing the conflict area.
inline void place_background(World& world, std::span<const BackgroundLane> lanes, int count,
                             VehicleId first_id, Rng& rng) {
  if (lanes.empty() || count <= 0) return;
  std::vector<double> lane_speed(lanes.size());
  std::vector<int> lane_slot(lanes.size(), 0);
  for (std::size_t l = 0; l < lanes.size(); ++l) lane_speed[l] = rng.uniform(3.0, 7.0);

  for (int i = 0; i < count; ++i) {
    const std::size_t l = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(lanes.size()) - 1));
    const BackgroundLane& lane = lanes[l];
    const int slot = lane_slot[l]++;
    const Vec2 dir{std::cos(lane.heading), std::sin(lane.heading)};
    const double jitter = rng.uniform(0.0, 4.0);
    const Vec2 start = lane.entry + dir * (-(12.0 * slot + jitter));
    const Vec2 stop = lane.queue_end + dir * (-(10.0 * slot));
    world.vehicles.push_back(make_vehicle(static_cast<VehicleId>(first_id + i), start, lane.heading,
                                          lane_speed[l], {4.5, 2.0}, Role::Background,
                                          Capability::Cooperative, {start, stop}));
  }
}

}  // namespace detail

/// Builds the scripted world for one configuration. The collider's start
/// position realizes the intersection delta: it reaches the conflict point
/// delta seconds before (+) or after (-) the ego's nominal arrival.
inline ScenarioSetup build_scenario(const ScenarioConfig& cfg) {
  std::string why;
  if (!cfg.valid(&why)) throw std::invalid_argument("invalid scenario config: " + why);

  ScenarioSetup setup;
  setup.map_spec = detail::default_map_spec();
  setup.domain.center = {0.0, 0.0};
  setup.domain.radio_range_m = cfg.channel.radio_range_m;
  setup.domain.membership_radius_m = cfg.channel.radio_range_m / 2.0;
  setup.collider_speed_mps = cfg.collider_speed_kmh / 3.6;

  World& world = setup.world;
  Rng rng(cfg.seed * 0x9e3779b97f4a7c15ull + 12345);

  const double v_c = setup.collider_speed_mps;
  const Footprint car{4.5, 2.0};
  const Footprint truck{10.0, 2.5};

  switch (cfg.scenario) {
    case ScenarioKind::RedLight: {
      world.road = detail::intersection_mask(setup.map_spec);
      setup.conflict_point = {-1.75, -1.75};
      setup.ego_goal = {60.0, -1.75};
      const Vec2 ego_start{-50.0, -1.75};
      setup.nominal_ego_conflict_s = (setup.conflict_point.x - ego_start.x) / cfg.ego_cruise_mps;

      world.vehicles.push_back(detail::make_vehicle(setup.ego_id, ego_start, 0.0,
                                                    cfg.ego_cruise_mps, car, Role::Ego,
                                                    Capability::Cooperative,
                                                    {ego_start, setup.ego_goal}));
      // Red-light violator: crosses the ego's path from the north, hidden
      // behind the truck queued in the second southbound lane.
      const double lead = v_c * (setup.nominal_ego_conflict_s - cfg.delta_s);
      const Vec2 col_start{-1.75, setup.conflict_point.y + std::max(6.0, lead)};
      world.vehicles.push_back(detail::make_vehicle(setup.collider_id, col_start, -detail::kHalfPi,
                                                    v_c, car, Role::Collider, Capability::Passive,
                                                    {col_start, {-1.75, -80.0}}));
      // Queued trailers in the second southbound lane, modeled as one long
      // stopped vehicle; they hide the violator until it is nearly through.
      world.vehicles.push_back(detail::make_vehicle(setup.occluder_id, {-5.25, 25.0},
                                                    -detail::kHalfPi, 0.0, {40.0, 2.5},
                                                    Role::Occluder, Capability::Cooperative, {}));
      const detail::BackgroundLane lanes[] = {
          {{-70.0, -5.25}, {-14.0, -5.25}, 0.0},             // eastbound outer, queuing from west
          {{70.0, 5.25}, {14.0, 5.25}, detail::kPi},         // westbound outer, queuing from east
          {{5.25, -70.0}, {5.25, -14.0}, detail::kHalfPi},   // northbound, queuing from south
          {{-5.25, 76.0}, {-5.25, 48.0}, -detail::kHalfPi},  // southbound, held behind the trailers
      };
      detail::place_background(world, lanes, cfg.density - 3, 10, rng);
      break;
    }
    case ScenarioKind::LeftTurn: {
      world.road = detail::intersection_mask(setup.map_spec);
      setup.conflict_point = {1.75, 5.25};
      setup.ego_goal = {1.75, 60.0};
      const Vec2 ego_start{-45.0, -1.75};
      // Path: straight approach, quarter turn through the box, north exit.
      const double approach = -7.0 - ego_start.x;
      const double arc = 14.5;  // measured along the planned turn
      setup.nominal_ego_conflict_s = (approach + arc) / cfg.ego_cruise_mps;

      world.vehicles.push_back(detail::make_vehicle(setup.ego_id, ego_start, 0.0,
                                                    cfg.ego_cruise_mps, car, Role::Ego,
                                                    Capability::Cooperative,
                                                    {ego_start, {-7.0, -1.75}, {0.0, 0.5},
                                                     {1.75, 7.0}, setup.ego_goal}));
      const double lead = v_c * (setup.nominal_ego_conflict_s - cfg.delta_s);
      const Vec2 col_start{setup.conflict_point.x + std::max(8.0, lead), 5.25};
      world.vehicles.push_back(detail::make_vehicle(setup.collider_id, col_start, detail::kPi, v_c,
                                                    car, Role::Collider, Capability::Passive,
                                                    {col_start, {-80.0, 5.25}}));
      // Oncoming left-turner waiting at the box edge.
      world.vehicles.push_back(detail::make_vehicle(setup.occluder_id, {7.0, 1.75}, detail::kPi,
                                                    0.0, {8.0, 2.5}, Role::Occluder,
                                                    Capability::Cooperative, {}));
      const detail::BackgroundLane lanes[] = {
          {{-70.0, -5.25}, {-14.0, -5.25}, 0.0},            // eastbound outer, queuing from west
          {{70.0, 1.75}, {16.0, 1.75}, detail::kPi},        // westbound inner, behind the truck
          {{5.25, -70.0}, {5.25, -14.0}, detail::kHalfPi},  // northbound, queuing from south
          {{-5.25, 70.0}, {-5.25, 14.0}, -detail::kHalfPi}, // southbound, queuing from north
      };
      detail::place_background(world, lanes, cfg.density - 3, 10, rng);
      break;
    }
    case ScenarioKind::Overtaking: {
      world.road = detail::overtaking_mask(setup.map_spec);
      setup.conflict_point = {2.0, 2.0};
      setup.ego_goal = {70.0, -2.0};
      const Vec2 ego_start{-60.0, -2.0};
      // Lane change adds roughly 4 m over the straight-line run.
      setup.nominal_ego_conflict_s =
          ((setup.conflict_point.x - ego_start.x) + 4.0) / cfg.ego_cruise_mps;

      world.vehicles.push_back(detail::make_vehicle(setup.ego_id, ego_start, 0.0,
                                                    cfg.ego_cruise_mps, car, Role::Ego,
                                                    Capability::Cooperative,
                                                    {ego_start, setup.ego_goal}));
      const double lead = v_c * (setup.nominal_ego_conflict_s - cfg.delta_s);
      const Vec2 col_start{setup.conflict_point.x + std::max(10.0, lead), 2.0};
      world.vehicles.push_back(detail::make_vehicle(setup.collider_id, col_start, detail::kPi, v_c,
                                                    car, Role::Collider, Capability::Passive,
                                                    {col_start, {-90.0, 2.0}}));
      // Stopped wide trailer blocking the ego's lane and the oncoming view.
      world.vehicles.push_back(detail::make_vehicle(setup.occluder_id, {2.0, -2.0}, 0.0, 0.0,
                                                    {8.5, 3.4}, Role::Occluder,
                                                    Capability::Cooperative, {}));
      const detail::BackgroundLane lanes[] = {
          {{-80.0, -30.0}, {-14.0, -30.0}, 0.0},
          {{80.0, 30.0}, {14.0, 30.0}, detail::kPi},
      };
      detail::place_background(world, lanes, cfg.density - 3, 10, rng);
      break;
    }
  }
  return setup;
}

}  // namespace coopsim

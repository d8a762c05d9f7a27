#pragma once

#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "coopsim/planner.hpp"
#include "coopsim/scenario.hpp"

#include "json.hpp"

namespace coopsim {

enum class Outcome { SafePassage, NearMiss, Crash, Deadlock };

inline const char* to_string(Outcome o) {
  switch (o) {
    case Outcome::SafePassage: return "SafePassage";
    case Outcome::NearMiss: return "NearMiss";
    case Outcome::Crash: return "Crash";
    case Outcome::Deadlock: return "Deadlock";
  }
  return "?";
}

inline Outcome outcome_from_string(const std::string& s) {
  if (s == "SafePassage") return Outcome::SafePassage;
  if (s == "NearMiss") return Outcome::NearMiss;
  if (s == "Crash") return Outcome::Crash;
  if (s == "Deadlock") return Outcome::Deadlock;
  throw std::invalid_argument("unknown outcome: " + s);
}

/// One physics sub-step sample; the classification and reaction-time metrics
/// are pure functions over a vector of these.
struct StepSample {
  TimeMs t_ms = 0;
  Vec2 ego_pos;
  double ego_heading = 0.0;
  double ego_speed = 0.0;
  Vec2 collider_pos;
  double collider_speed = 0.0;
  double ego_collider_distance = std::numeric_limits<double>::infinity();
  bool overlap = false;
  bool collider_in_fused_view = false;
  bool has_collider = true;
};

struct RunTrace {
  std::vector<StepSample> steps;
};

inline constexpr double kNearMissDistance = 2.0;
inline constexpr double kDeadlockSpeed = 0.1;       // m/s
inline constexpr TimeMs kDeadlockWindowMs = 10000;  // sustained standstill

/// Crash on any footprint overlap; else deadlock when ego and collider hold
/// still for the full window; else near miss when they ever came within 2 m.
inline Outcome classify_outcome(const RunTrace& trace) {
  double min_dist = std::numeric_limits<double>::infinity();
  TimeMs still_since = 0;
  bool still = false;
  bool deadlock = false;
  for (const auto& s : trace.steps) {
    if (s.overlap) return Outcome::Crash;
    min_dist = std::min(min_dist, s.ego_collider_distance);
    if (!s.has_collider) continue;
    if (s.ego_speed < kDeadlockSpeed && s.collider_speed < kDeadlockSpeed) {
      if (!still) {
        still = true;
        still_since = s.t_ms;
      } else if (s.t_ms - still_since >= kDeadlockWindowMs) {
        deadlock = true;
      }
    } else {
      still = false;
    }
  }
  if (deadlock) return Outcome::Deadlock;
  if (min_dist < kNearMissDistance) return Outcome::NearMiss;
  return Outcome::SafePassage;
}

/// Reaction margin in seconds: how long before the last brakeable moment the
/// ego became aware of the collider. Zero when the collider was never fused
/// or awareness came too late.
inline double compute_reaction_time(const RunTrace& trace, const Vec2& conflict_point,
                                    double decel_mps2) {
  std::int64_t t_aware = -1;
  std::int64_t t_last = -1;
  for (const auto& s : trace.steps) {
    if (!s.has_collider) return 0.0;
    if (t_aware < 0 && s.collider_in_fused_view) t_aware = static_cast<std::int64_t>(s.t_ms);
    const Vec2 to_conflict = conflict_point - s.ego_pos;
    const bool passed =
        to_conflict.dot({std::cos(s.ego_heading), std::sin(s.ego_heading)}) < 0.0;
    if (passed) break;
    if (to_conflict.norm() >= stopping_distance(s.ego_speed, decel_mps2)) {
      t_last = static_cast<std::int64_t>(s.t_ms);
    }
  }
  if (t_aware < 0 || t_last < 0) return 0.0;
  return std::max(0.0, static_cast<double>(t_last - t_aware) / 1000.0);
}

struct ScenarioResult {
  ScenarioKind scenario = ScenarioKind::RedLight;
  SchedulerKind scheduler = SchedulerKind::Greedy;
  int density = 0;
  double collider_speed_kmh = 0.0;
  double delta_s = 0.0;
  std::uint64_t seed = 0;

  Outcome outcome = Outcome::SafePassage;
  double reaction_time_s = 0.0;
  double closest_distance_m = std::numeric_limits<double>::infinity();
  double collider_visible_fraction = 0.0;
  double mean_collider_points = 0.0;
  double total_reward = 0.0;
  double compute_ms_p50 = 0.0;
  double compute_ms_p99 = 0.0;
  double compute_ms_mean = 0.0;
  double pipeline_ms_mean = 0.0;
  double scheduled_delay_ms_mean = 0.0;
  double duration_s = 0.0;
  std::string trace_path;
};

inline void to_json(nlohmann::json& j, const ScenarioResult& r) {
  j = nlohmann::json{{"scenario", to_string(r.scenario)},
                     {"scheduler", to_string(r.scheduler)},
                     {"density", r.density},
                     {"speed_kmh", r.collider_speed_kmh},
                     {"delta_s", r.delta_s},
                     {"seed", r.seed},
                     {"outcome", to_string(r.outcome)},
                     {"reaction_s", r.reaction_time_s},
                     {"closest_m", r.closest_distance_m},
                     {"vis_frac", r.collider_visible_fraction},
                     {"collider_points", r.mean_collider_points},
                     {"reward", r.total_reward},
                     {"compute_ms_p50", r.compute_ms_p50},
                     {"compute_ms_p99", r.compute_ms_p99},
                     {"compute_ms_mean", r.compute_ms_mean},
                     {"pipeline_ms_mean", r.pipeline_ms_mean},
                     {"delay_ms_mean", r.scheduled_delay_ms_mean},
                     {"duration_s", r.duration_s},
                     {"trace_path", r.trace_path}};
}

inline void from_json(const nlohmann::json& j, ScenarioResult& r) {
  r.scenario = scenario_from_string(j.at("scenario").get<std::string>());
  r.scheduler = scheduler_from_string(j.at("scheduler").get<std::string>());
  j.at("density").get_to(r.density);
  j.at("speed_kmh").get_to(r.collider_speed_kmh);
  j.at("delta_s").get_to(r.delta_s);
  j.at("seed").get_to(r.seed);
  r.outcome = outcome_from_string(j.at("outcome").get<std::string>());
  j.at("reaction_s").get_to(r.reaction_time_s);
  j.at("closest_m").get_to(r.closest_distance_m);
  j.at("vis_frac").get_to(r.collider_visible_fraction);
  j.at("collider_points").get_to(r.mean_collider_points);
  j.at("reward").get_to(r.total_reward);
  j.at("compute_ms_p50").get_to(r.compute_ms_p50);
  j.at("compute_ms_p99").get_to(r.compute_ms_p99);
  j.at("compute_ms_mean").get_to(r.compute_ms_mean);
  j.at("pipeline_ms_mean").get_to(r.pipeline_ms_mean);
  j.at("delay_ms_mean").get_to(r.scheduled_delay_ms_mean);
  j.at("duration_s").get_to(r.duration_s);
  j.at("trace_path").get_to(r.trace_path);
}

inline double percentile(std::vector<double> values, double p) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double idx = p * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(idx);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double f = idx - static_cast<double>(lo);
  return values[lo] * (1.0 - f) + values[hi] * f;
}

inline double mean(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

}  // namespace coopsim

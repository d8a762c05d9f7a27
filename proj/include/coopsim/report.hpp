#pragma once

#include <atomic>
#include <functional>

#include "coopsim/harness.hpp"

namespace coopsim {

struct SweepGrid {
  std::vector<ScenarioKind> scenarios{ScenarioKind::Overtaking, ScenarioKind::LeftTurn,
                                      ScenarioKind::RedLight};
  std::vector<SchedulerKind> schedulers{SchedulerKind::Greedy};
  std::vector<int> densities{10};
  std::vector<double> speeds_kmh{20.0, 30.0, 40.0};
  std::vector<double> deltas_s;  // empty: the standard -2..+2 grid in 0.25 steps
  std::vector<std::uint64_t> seeds{1};
  ScenarioConfig base;

  std::vector<double> delta_grid() const {
    if (!deltas_s.empty()) return deltas_s;
    std::vector<double> out;
    for (int i = -8; i <= 8; ++i) out.push_back(i * 0.25);
    return out;
  }

  std::vector<ScenarioConfig> expand() const {
    std::vector<ScenarioConfig> configs;
    for (const auto sc : scenarios) {
      for (const auto sch : schedulers) {
        for (const int d : densities) {
          for (const double v : speeds_kmh) {
            for (const double delta : delta_grid()) {
              for (const std::uint64_t seed : seeds) {
                ScenarioConfig cfg = base;
                cfg.scenario = sc;
                cfg.scheduler = sch;
                cfg.density = d;
                cfg.collider_speed_kmh = v;
                cfg.delta_s = delta;
                cfg.seed = seed;
                cfg.write_traces = false;
                configs.push_back(std::move(cfg));
              }
            }
          }
        }
      }
    }
    return configs;
  }
};

struct AggregateRow {
  ScenarioKind scenario;
  SchedulerKind scheduler;
  int density = 0;
  int runs = 0;
  int safe = 0, near_miss = 0, crash = 0, deadlock = 0;
  double mean_reward = 0.0;
  double reward_ratio_vs_optimal = 0.0;  // 0 when no optimal rows in the sweep
  double mean_vis_fraction = 0.0;
  double compute_ms_p50 = 0.0;
  double compute_ms_p99 = 0.0;
};

struct SweepReport {
  std::vector<ScenarioResult> rows;
  std::vector<AggregateRow> aggregates;
  std::vector<std::string> failures;  // config description + error text
};

namespace detail {

inline std::string config_label(const ScenarioConfig& cfg) {
  std::string s = to_string(cfg.scenario);
  s += "/";
  s += to_string(cfg.scheduler);
  s += " density=" + std::to_string(cfg.density);
  s += " v=" + format_double(cfg.collider_speed_kmh, 0);
  s += " delta=" + format_double(cfg.delta_s, 2);
  s += " seed=" + std::to_string(cfg.seed);
  return s;
}

inline void aggregate(SweepReport& report) {
  std::map<std::tuple<int, int, int>, std::vector<const ScenarioResult*>> groups;
  for (const auto& r : report.rows) {
    groups[{static_cast<int>(r.scenario), static_cast<int>(r.scheduler), r.density}].push_back(&r);
  }
  // Mean optimal-scheduler reward per (scenario, density), for the ratios.
  std::map<std::pair<int, int>, double> optimal_reward;
  for (const auto& [key, rows] : groups) {
    if (std::get<1>(key) != static_cast<int>(SchedulerKind::Optimal)) continue;
    double sum = 0.0;
    for (const auto* r : rows) sum += r->total_reward;
    optimal_reward[{std::get<0>(key), std::get<2>(key)}] = sum / rows.size();
  }
  for (const auto& [key, rows] : groups) {
    AggregateRow agg;
    agg.scenario = static_cast<ScenarioKind>(std::get<0>(key));
    agg.scheduler = static_cast<SchedulerKind>(std::get<1>(key));
    agg.density = std::get<2>(key);
    agg.runs = static_cast<int>(rows.size());
    std::vector<double> compute, vis;
    double reward = 0.0;
    for (const auto* r : rows) {
      switch (r->outcome) {
        case Outcome::SafePassage: ++agg.safe; break;
        case Outcome::NearMiss: ++agg.near_miss; break;
        case Outcome::Crash: ++agg.crash; break;
        case Outcome::Deadlock: ++agg.deadlock; break;
      }
      reward += r->total_reward;
      compute.push_back(r->compute_ms_p50);
      vis.push_back(r->collider_visible_fraction);
    }
    agg.mean_reward = reward / rows.size();
    agg.mean_vis_fraction = mean(vis);
    agg.compute_ms_p50 = percentile(compute, 0.5);
    agg.compute_ms_p99 = percentile(compute, 0.99);
    const auto opt = optimal_reward.find({std::get<0>(key), std::get<2>(key)});
    if (opt != optimal_reward.end() && opt->second > 0.0) {
      agg.reward_ratio_vs_optimal = agg.mean_reward / opt->second;
    }
    report.aggregates.push_back(agg);
  }
}

}  // namespace detail

/// Runs every configuration of the grid. Individual failures are recorded
/// and the sweep continues. Runs execute in parallel when hardware threads
/// are available; each run owns its world and seeded generators, and rows
/// keep grid order regardless of completion order.
inline SweepReport sweep(const SweepGrid& grid,
                         const std::function<void(std::size_t, std::size_t)>& progress = {}) {
  const std::vector<ScenarioConfig> configs = grid.expand();
  SweepReport report;
  report.rows.reserve(configs.size());

  const std::size_t workers = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  std::vector<std::optional<ScenarioResult>> slots(configs.size());
  std::vector<std::string> errors(configs.size());

  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> finished{0};
  const auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= configs.size()) return;
      try {
        slots[i] = run_scenario(configs[i]).result;
      } catch (const std::exception& e) {
        errors[i] = detail::config_label(configs[i]) + ": " + e.what();
      }
      const std::size_t f = finished.fetch_add(1) + 1;
      if (progress) progress(f, configs.size());
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (slots[i]) {
      report.rows.push_back(*slots[i]);
    } else {
      report.failures.push_back(errors[i]);
    }
  }
  detail::aggregate(report);
  return report;
}

inline constexpr const char* kReportCsvHeader =
    "scenario,scheduler,density,speed,delta,seed,outcome,reaction_s,closest_m,vis_frac,reward,"
    "compute_ms_p50";

inline std::string report_csv_row(const ScenarioResult& r) {
  std::string s;
  s += to_string(r.scenario);
  s += ',';
  s += to_string(r.scheduler);
  s += ',' + std::to_string(r.density);
  s += ',' + detail::format_double(r.collider_speed_kmh, 0);
  s += ',' + detail::format_double(r.delta_s, 2);
  s += ',' + std::to_string(r.seed);
  s += ',';
  s += to_string(r.outcome);
  s += ',' + detail::format_double(r.reaction_time_s, 3);
  s += ',' + detail::format_double(r.closest_distance_m, 3);
  s += ',' + detail::format_double(r.collider_visible_fraction, 4);
  s += ',' + detail::format_double(r.total_reward, 4);
  s += ',' + detail::format_double(r.compute_ms_p50, 3);
  return s;
}

/// Writes one row per run plus an aggregates sidecar next to `path`.
inline void emit_report(const SweepReport& report, const std::string& format,
                        const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("emit_report: cannot open " + path);
  if (format == "csv") {
    out << kReportCsvHeader << "\n";
    for (const auto& r : report.rows) out << report_csv_row(r) << "\n";
  } else if (format == "jsonl") {
    for (const auto& r : report.rows) {
      nlohmann::json j = r;
      out << j.dump() << "\n";
    }
  } else {
    throw std::invalid_argument("emit_report: unknown format " + format);
  }

  std::ofstream agg(path + ".aggregates.csv", std::ios::binary);
  agg << "scenario,scheduler,density,runs,safe,near_miss,crash,deadlock,mean_reward,"
         "reward_ratio_vs_optimal,mean_vis_fraction,compute_ms_p50,compute_ms_p99\n";
  for (const auto& a : report.aggregates) {
    agg << to_string(a.scenario) << ',' << to_string(a.scheduler) << ',' << a.density << ','
        << a.runs << ',' << a.safe << ',' << a.near_miss << ',' << a.crash << ',' << a.deadlock
        << ',' << detail::format_double(a.mean_reward, 4) << ','
        << detail::format_double(a.reward_ratio_vs_optimal, 4) << ','
        << detail::format_double(a.mean_vis_fraction, 4) << ','
        << detail::format_double(a.compute_ms_p50, 3) << ','
        << detail::format_double(a.compute_ms_p99, 3) << "\n";
  }
}

// --- Config file schema ------------------------------------------------------

inline void to_json(nlohmann::json& j, const ChannelConfig& c) {
  j = nlohmann::json{{"bandwidth_bps", c.bandwidth_bps},
                     {"decision_interval_ms", c.decision_interval_ms},
                     {"frame_ms", c.frame_ms},
                     {"radio_range_m", c.radio_range_m},
                     {"control_overhead_fraction", c.control_overhead_fraction}};
  if (const auto* k = std::get_if<ConstantLoss>(&c.loss)) {
    j["loss"] = {{"model", "constant"}, {"p", k->p}};
  } else if (const auto* e = std::get_if<ExponentialLoss>(&c.loss)) {
    j["loss"] = {{"model", "exponential"}, {"p0", e->p0}, {"decay_m", e->decay_m}};
  } else if (const auto* t = std::get_if<TableLoss>(&c.loss)) {
    j["loss"] = {{"model", "table"}, {"points", t->points}};
  }
}

inline void from_json(const nlohmann::json& j, ChannelConfig& c) {
  c.bandwidth_bps = j.value("bandwidth_bps", c.bandwidth_bps);
  c.decision_interval_ms = j.value("decision_interval_ms", c.decision_interval_ms);
  c.frame_ms = j.value("frame_ms", c.frame_ms);
  c.radio_range_m = j.value("radio_range_m", c.radio_range_m);
  c.control_overhead_fraction = j.value("control_overhead_fraction", c.control_overhead_fraction);
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    const std::string model = l.value("model", "exponential");
    if (model == "constant") {
      c.loss = ConstantLoss{l.value("p", 0.95)};
    } else if (model == "exponential") {
      c.loss = ExponentialLoss{l.value("p0", 0.95), l.value("decay_m", 200.0)};
    } else if (model == "table") {
      TableLoss t;
      t.points = l.at("points").get<std::vector<std::pair<double, double>>>();
      c.loss = t;
    } else {
      throw std::invalid_argument("unknown loss model: " + model);
    }
  }
}

inline void to_json(nlohmann::json& j, const SensorSpec& s) {
  j = nlohmann::json{{"range", s.range},
                     {"angular_resolution", s.angular_resolution},
                     {"points_per_hit", s.points_per_hit},
                     {"mount_height", s.mount_height},
                     {"ground_return_spacing", s.ground_return_spacing}};
}

inline void from_json(const nlohmann::json& j, SensorSpec& s) {
  s.range = j.value("range", s.range);
  s.angular_resolution = j.value("angular_resolution", s.angular_resolution);
  s.points_per_hit = j.value("points_per_hit", s.points_per_hit);
  s.mount_height = j.value("mount_height", s.mount_height);
  s.ground_return_spacing = j.value("ground_return_spacing", s.ground_return_spacing);
}

inline void to_json(nlohmann::json& j, const ScenarioConfig& c) {
  j = nlohmann::json{{"scenario", to_string(c.scenario)},
                     {"scheduler", to_string(c.scheduler)},
                     {"collider_speed_kmh", c.collider_speed_kmh},
                     {"delta_s", c.delta_s},
                     {"density", c.density},
                     {"seed", c.seed},
                     {"channel", c.channel},
                     {"sensor", c.sensor},
                     {"background_sensor", c.background_sensor},
                     {"ego_cruise_mps", c.ego_cruise_mps},
                     {"ground_threshold", c.ground_threshold},
                     {"max_duration_ms", c.max_duration_ms},
                     {"relevance_mode",
                      c.relevance_mode == RelevanceMode::Boolean ? "boolean" : "reciprocal"},
                     {"fptas_eps", c.fptas_eps},
                     {"knapsack_resolution", c.knapsack_resolution},
                     {"write_traces", c.write_traces}};
}

inline void from_json(const nlohmann::json& j, ScenarioConfig& c) {
  if (j.contains("scenario")) c.scenario = scenario_from_string(j.at("scenario"));
  if (j.contains("scheduler")) c.scheduler = scheduler_from_string(j.at("scheduler"));
  c.collider_speed_kmh = j.value("collider_speed_kmh", c.collider_speed_kmh);
  c.delta_s = j.value("delta_s", c.delta_s);
  c.density = j.value("density", c.density);
  c.seed = j.value("seed", c.seed);
  if (j.contains("channel")) j.at("channel").get_to(c.channel);
  if (j.contains("sensor")) j.at("sensor").get_to(c.sensor);
  if (j.contains("background_sensor")) j.at("background_sensor").get_to(c.background_sensor);
  c.ego_cruise_mps = j.value("ego_cruise_mps", c.ego_cruise_mps);
  c.ground_threshold = j.value("ground_threshold", c.ground_threshold);
  c.max_duration_ms = j.value("max_duration_ms", c.max_duration_ms);
  if (j.contains("relevance_mode")) {
    c.relevance_mode = j.at("relevance_mode") == "reciprocal" ? RelevanceMode::ReciprocalTtc
                                                              : RelevanceMode::Boolean;
  }
  c.fptas_eps = j.value("fptas_eps", c.fptas_eps);
  c.knapsack_resolution = j.value("knapsack_resolution", c.knapsack_resolution);
  c.write_traces = j.value("write_traces", c.write_traces);
}

inline void to_json(nlohmann::json& j, const SweepGrid& g) {
  std::vector<std::string> scenarios, schedulers;
  for (const auto s : g.scenarios) scenarios.emplace_back(to_string(s));
  for (const auto s : g.schedulers) schedulers.emplace_back(to_string(s));
  j = nlohmann::json{{"scenarios", scenarios},   {"schedulers", schedulers},
                     {"densities", g.densities}, {"speeds_kmh", g.speeds_kmh},
                     {"deltas_s", g.deltas_s},   {"seeds", g.seeds},
                     {"base", g.base}};
}

inline void from_json(const nlohmann::json& j, SweepGrid& g) {
  if (j.contains("scenarios")) {
    g.scenarios.clear();
    for (const auto& s : j.at("scenarios")) g.scenarios.push_back(scenario_from_string(s));
  }
  if (j.contains("schedulers")) {
    g.schedulers.clear();
    for (const auto& s : j.at("schedulers")) g.schedulers.push_back(scheduler_from_string(s));
  }
  if (j.contains("densities")) j.at("densities").get_to(g.densities);
  if (j.contains("speeds_kmh")) j.at("speeds_kmh").get_to(g.speeds_kmh);
  if (j.contains("deltas_s")) j.at("deltas_s").get_to(g.deltas_s);
  if (j.contains("seeds")) j.at("seeds").get_to(g.seeds);
  if (j.contains("base")) j.at("base").get_to(g.base);
}

}  // namespace coopsim

#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

#include "coopsim/metrics.hpp"

namespace coopsim {

struct RunArtifacts {
  ScenarioResult result;
  RunTrace trace;
  std::vector<std::string> channel_rows;     // CSV body lines
  std::vector<std::string> plan_rows;        // JSONL
  std::vector<std::string> trajectory_rows;  // JSONL
};

namespace detail {

inline std::string format_double(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline std::string hex_id(ObjectId id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(id));
  return buf;
}

struct ObjectTrack {
  std::vector<CentroidSample> history;
  std::vector<CellIndex> cells;  // last seen footprint, for association
  Vec2 velocity;
  double heading = 0.0;
  std::uint32_t starvation = 0;
  bool matched = false;
};

inline std::size_t cell_overlap(const std::vector<CellIndex>& a, const std::vector<CellIndex>& b) {
  std::size_t count = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++count;
      ++ia;
      ++ib;
    }
  }
  return count;
}

struct Agent {
  VehicleId id = 0;
  std::vector<RoadObject> objects;          // current interval, map frame
  std::vector<std::size_t> object_track;    // objects[k] -> tracks index
  std::vector<ObjectTrack> tracks;
  std::map<VehicleId, ControlMessage> beacons;  // latest known view per sender
  Trajectory planned;
};

struct StoredReception {
  RoadObject payload;       // cloud in the sender's frame at capture time
  RigidTransform sender_tf;  // sender -> map at capture time
  Vec2 capture_centroid;    // map frame
  Vec2 velocity;            // map frame
  VehicleId sender = 0;
  TimeMs received_ms = 0;
};

/// Frame-to-frame association by occupied-cell overlap: at the decision
/// cadence a physical object always overlaps its previous footprint, while
/// distinct vehicles never share cells. Unmatched detections start fresh
/// (stationary) tracks.
inline void update_tracks(Agent& agent, TimeMs now_ms) {
  for (auto& t : agent.tracks) t.matched = false;
  std::vector<ObjectTrack> next;
  agent.object_track.assign(agent.objects.size(), 0);

  for (std::size_t k = 0; k < agent.objects.size(); ++k) {
    RoadObject& obj = agent.objects[k];
    std::size_t best = agent.tracks.size();
    std::size_t best_overlap = 0;
    for (std::size_t t = 0; t < agent.tracks.size(); ++t) {
      if (agent.tracks[t].matched) continue;
      const std::size_t overlap = cell_overlap(agent.tracks[t].cells, obj.cells);
      if (overlap > best_overlap) {
        best_overlap = overlap;
        best = t;
      }
    }
    ObjectTrack track;
    if (best < agent.tracks.size()) {
      agent.tracks[best].matched = true;
      track = agent.tracks[best];
    }
    track.matched = true;
    track.cells = obj.cells;
    track.history.push_back({obj.centroid, now_ms});
    if (track.history.size() > 3) track.history.erase(track.history.begin());
    const MotionEstimate est = estimate_motion(track.history);
    track.velocity = est.velocity;
    track.heading = est.heading;
    obj.velocity = est.velocity;
    obj.heading = est.heading;
    agent.object_track[k] = next.size();
    next.push_back(std::move(track));
  }
  agent.tracks = std::move(next);
}

}  // namespace detail

class ScenarioRunner {
 public:
  explicit ScenarioRunner(ScenarioConfig cfg) : cfg_(std::move(cfg)), setup_(build_scenario(cfg_)) {
    msg_params_.downsample_tolerance_m = 0.25;
    msg_params_.sensor_range_m = cfg_.sensor.range;
    msg_params_.relevance.mode = cfg_.relevance_mode;
    msg_params_.cell_size = setup_.map_spec.cell_size;
    budgets_ = frame_budgets(cfg_.channel);
  }

  RunArtifacts run() {
    RunArtifacts art;
    World& world = setup_.world;
    const VehicleId ego = setup_.ego_id;

    for (const auto& v : world.vehicles) {
      if (v.capability == Capability::Cooperative) agents_[v.id].id = v.id;
      if (v.role == Role::Background) background_speed_[v.id] = v.speed;
    }

    std::vector<double> compute_ms, pipeline_ms, delays_ms;
    std::size_t vis_considered = 0, vis_seen = 0;
    double collider_points_sum = 0.0;
    double total_reward = 0.0;
    bool done = false;
    TimeMs still_since = 0;
    bool still = false;

    Rng beacon_rng(cfg_.seed ^ 0xbeac0000beac0000ull);
    const std::size_t max_intervals = cfg_.max_duration_ms / cfg_.channel.decision_interval_ms;

    for (std::size_t interval = 0; interval < max_intervals && !done; ++interval) {
      const TimeMs now = world.clock_ms;
      const bool sharing = cfg_.scheduler != SchedulerKind::Single;

      // Domain membership over cooperative participants.
      std::map<VehicleId, Vec2> positions;
      for (const auto& v : world.vehicles) {
        if (v.capability == Capability::Cooperative) positions[v.id] = v.pose.position();
      }
      const std::vector<VehicleId> members = domain_members(positions, setup_.domain);

      // --- Sense and extract -------------------------------------------------
      const auto pipe_start = std::chrono::steady_clock::now();
      OccupancyGrid ego_grid;
      const auto sense_one = [&](detail::Agent& agent) {
        const VehicleState* v = world.find(agent.id);
        const SensorSpec& spec = (agent.id == ego || agent.id == setup_.occluder_id)
                                     ? cfg_.sensor
                                     : cfg_.background_sensor;
        const PointCloud local = sense_lidar(world, *v, spec);
        const RigidTransform to_map =
            RigidTransform::from_pose(v->pose, local.frame_id, "map");
        const PointCloud map_cloud = apply_transform(to_map, local);
        OccupancyGrid grid =
            build_occupancy_grid(map_cloud, setup_.map_spec, world.road, cfg_.ground_threshold);
        agent.objects = extract_objects(grid, map_cloud, agent.id, now);
        std::erase_if(agent.objects, [&](const RoadObject& o) {
          return o.cells.size() < cfg_.min_object_cells ||
                 o.cloud.points.size() < cfg_.min_object_points;
        });
        detail::update_tracks(agent, now);
        if (agent.id == ego) ego_grid = std::move(grid);
      };
      if (sharing) {
        for (const VehicleId id : members) sense_one(agents_.at(id));
      } else {
        sense_one(agents_.at(ego));
      }
      const auto pipe_sense = std::chrono::steady_clock::now();

      // --- Control messages --------------------------------------------------
      double ego_reason_ms = 0.0;
      if (sharing) {
        std::map<VehicleId, ControlMessage> outgoing;
        for (const VehicleId id : members) {
          detail::Agent& agent = agents_.at(id);
          const VehicleState* v = world.find(id);
          const std::vector<PeerInfo> peers = peer_view(agent, members, id);
          std::vector<std::uint32_t> starvation;
          starvation.reserve(agent.objects.size());
          for (const std::size_t t : agent.object_track) {
            starvation.push_back(agent.tracks[t].starvation);
          }
          const auto t0 = std::chrono::steady_clock::now();
          ControlMessage msg = build_control_message(*v, beacon_trajectory(agent, *v, now),
                                                     agent.objects, peers, starvation, msg_params_);
          if (id == ego) {
            ego_reason_ms = std::chrono::duration<double, std::milli>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
          }
          agent.beacons[id] = msg;
          outgoing[id] = std::move(msg);
        }
        // Lossy broadcast: losers fall back to the compensated previous view.
        for (const VehicleId s : members) {
          const VehicleState* vs = world.find(s);
          for (const VehicleId r : members) {
            if (r == s) continue;
            detail::Agent& receiver = agents_.at(r);
            const VehicleState* vr = world.find(r);
            const double p = link_probability(distance(vs->pose.position(), vr->pose.position()),
                                              cfg_.channel.loss);
            if (beacon_rng.bernoulli(p)) {
              receiver.beacons[s] = outgoing[s];
            } else if (auto it = receiver.beacons.find(s); it != receiver.beacons.end()) {
              it->second = compensate_missing(it->second, peer_view(receiver, members, s),
                                              now, msg_params_);
            }
          }
        }
      }

      // --- Common schedule from the ego's beacon view ------------------------
      FramePlan plan;
      SchedulerInput input;
      if (sharing) {
        input = scheduler_input(agents_.at(ego), members);
        const auto t0 = std::chrono::steady_clock::now();
        plan = dispatch_scheduler(input);
        compute_ms.push_back(
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count());
        if (!plan.feasible(budgets_)) throw std::logic_error("scheduler exceeded frame budgets");
      }

      // --- Execute over the lossy channel ------------------------------------
      ReceptionLog log;
      if (sharing && !plan.assignments.empty()) {
        ChannelMatrix matrix = channel_matrix(members);
        log = execute_plan(plan, matrix, cfg_.channel,
                           fnv1a64(&interval, sizeof(interval), cfg_.seed));
        total_reward += realized_reward(input, log);
        for (const auto& t : log.transmissions) delays_ms.push_back(t.end_ms);
        deliver_to_ego(log, now);
        update_starvation(members, plan, log);
        append_channel_rows(art, interval, log);
      }
      if (sharing) append_plan_row(art, interval, plan);

      if (std::getenv("COOPSIM_DEBUG3") && interval < 15) {
        const VehicleState* dcol = world.find(setup_.collider_id);
        for (const VehicleId sender : members) {
          const auto itb = agents_.at(setup_.ego_id).beacons.find(sender);
          if (itb == agents_.at(setup_.ego_id).beacons.end()) continue;
          const ControlMessage& m = itb->second;
          for (std::size_t k = 0; k < m.object_map.size(); ++k) {
            if (k >= m.hints.size()) continue;
            if (distance(m.hints[k].centroid, dcol->pose.position()) > 4.0) continue;
            const PeerMetric* pm = m.object_map[k].metric_for(setup_.ego_id);
            std::fprintf(stderr,
                         "[i%zu] col entry from %u: hintV=(%.2f,%.2f) v=%d r=%.3f egoTrajInStore=%zu\n",
                         interval, sender, m.hints[k].velocity.x, m.hints[k].velocity.y,
                         pm ? pm->visible : -1, pm ? pm->relevance : -1.0,
                         agents_.at(sender).beacons.count(setup_.ego_id)
                             ? agents_.at(sender).beacons.at(setup_.ego_id).trajectory.waypoints.size()
                             : 0);
          }
        }
      }
      if (std::getenv("COOPSIM_DEBUG") && interval < 12) {
        int pos_items = 0;
        double best_y_ego = 0;
        for (const auto& it : input.items) {
          for (const auto& r : it.receivers) {
            if (r.reward > 0 && r.receiver == setup_.ego_id) best_y_ego = std::max(best_y_ego, r.reward);
          }
          if (object_weight(it) > 0) ++pos_items;
        }
        int ego_deliv = 0;
        for (const auto& t : log.transmissions)
          for (const auto& o : t.outcomes)
            if (o.receiver == setup_.ego_id && o.delivered) ++ego_deliv;
        const VehicleState* dbg_col = world.find(setup_.collider_id);
        double best_rx = 1e9;
        for (const auto& r : received_) {
          const double age_s = static_cast<double>(now - r.received_ms) / 1000.0;
          best_rx = std::min(best_rx, distance(r.capture_centroid + r.velocity * age_s,
                                               dbg_col->pose.position()));
        }
        bool col_item_sched = false, col_item_exists = false;
        for (const auto& it : input.items) {
          bool is_col = false;
          if (const auto* sender = world.find(it.transmitter)) {
            const auto& ag = agents_.at(it.transmitter);
            for (std::size_t k = 0; k < ag.objects.size(); ++k) {
              if (ag.objects[k].id == it.object &&
                  distance(ag.objects[k].centroid, dbg_col->pose.position()) < 3.0)
                is_col = true;
            }
          }
          if (!is_col) continue;
          col_item_exists = true;
          if (plan.scheduled(it.transmitter, it.object)) col_item_sched = true;
        }
        std::fprintf(stderr,
                     "[i%zu] members=%zu items=%zu pos=%d bestYego=%.2f plan=%zu deliv_ego=%d "
                     "rs=%zu colItem=%d colSched=%d bestRxColDist=%.1f ego=(%.1f,%.1f) col=(%.1f,%.1f)\n",
                     interval, members.size(), input.items.size(), pos_items, best_y_ego,
                     plan.assignments.size(), ego_deliv, received_.size(), col_item_exists,
                     col_item_sched, best_rx, world.find(setup_.ego_id)->pose.x,
                     world.find(setup_.ego_id)->pose.y, dbg_col->pose.x, dbg_col->pose.y);
      }

      // --- Fuse and plan (ego) ------------------------------------------------
      const auto pipe_fuse_start = std::chrono::steady_clock::now();
      detail::Agent& ego_agent = agents_.at(ego);
      const FusedView fused = fuse_view(ego_agent, ego_grid, now);
      const bool collider_fused = collider_in_view(fused, world);
      if (const VehicleState* col = world.find(setup_.collider_id)) {
        if (distance(col->pose.position(), world.find(ego)->pose.position()) <=
            cfg_.sensor.range) {
          ++vis_considered;
          if (collider_fused) {
            ++vis_seen;
            collider_points_sum += fused_collider_points(fused, world);
          }
        }
      }
      plan_ego(ego_agent, fused, now);
      if (std::getenv("COOPSIM_DEBUG") && interval < 60) {
        std::vector<RoadObject> dbg_tracks;
        for (const auto& [id, fo] : fused.objects) dbg_tracks.push_back(fo.object);
        const auto dbg_conf = predict_collision(ego_agent.planned, dbg_tracks, 2.6, 10000);
        const VehicleState* dc = world.find(setup_.collider_id);
        double fuse_col = 1e9; Vec2 fc{}; Vec2 fv{};
        for (const auto& [id, fo] : fused.objects) {
          const double d = distance(fo.object.centroid, dc->pose.position());
          if (d < fuse_col) { fuse_col = d; fc = fo.object.centroid; fv = fo.object.velocity; }
        }
        std::fprintf(stderr,
                     "   fused=%zu colFused=%d fuseColDist=%.1f colVel=(%.1f,%.1f) traj_wp=%zu conflict=%s\n",
                     fused.objects.size(), collider_fused, fuse_col, fv.x, fv.y,
                     ego_agent.planned.waypoints.size(),
                     dbg_conf ? (std::to_string(dbg_conf->time_ms) + "ms").c_str() : "none");
      }
      append_trajectory_row(art, interval, ego_agent.planned);
      const auto pipe_end = std::chrono::steady_clock::now();
      pipeline_ms.push_back(
          std::chrono::duration<double, std::milli>(pipe_sense - pipe_start).count() +
          ego_reason_ms +
          std::chrono::duration<double, std::milli>(pipe_end - pipe_fuse_start).count());

      // --- Passive collider control ------------------------------------------
      const DriveCommand collider_cmd = collider_control(world);
      if (std::getenv("COOPSIM_DEBUG4")) {
        const VehicleState* de = world.find(setup_.ego_id);
        const VehicleState* dc = world.find(setup_.collider_id);
        std::fprintf(stderr, "i=%zu ego=(%.1f,%.1f)v=%.1f col=(%.1f,%.1f)v=%.1f brake=%d\n",
                     interval, de->pose.x, de->pose.y, de->speed, dc ? dc->pose.x : 0,
                     dc ? dc->pose.y : 0, dc ? dc->speed : 0, collider_cmd.emergency_brake);
      }

      // --- Physics sub-steps ---------------------------------------------------
      const TimeMs sub_dt = 10;
      const std::size_t substeps = cfg_.channel.decision_interval_ms / sub_dt;
      for (std::size_t sub = 0; sub < substeps; ++sub) {
        for (auto& v : world.vehicles) {
          DriveCommand cmd = DriveCommand::cruise(0.0);
          switch (v.role) {
            case Role::Ego:
              cmd = DriveCommand::cruise(trajectory_speed(ego_agent.planned, world.clock_ms));
              break;
            case Role::Collider:
              cmd = collider_cmd;
              break;
            case Role::Occluder:
              cmd = DriveCommand::cruise(0.0);
              break;
            case Role::Background:
              cmd = DriveCommand::cruise(background_speed_.at(v.id));
              break;
          }
          v = step_vehicle(v, cmd, sub_dt);
        }
        world.clock_ms += sub_dt;

        StepSample sample = sample_step(world, collider_fused);
        art.trace.steps.push_back(sample);
        if (sample.overlap && std::getenv("COOPSIM_DEBUG")) {
          const VehicleState* dbg_e = world.find(setup_.ego_id);
          for (const auto& v : world.vehicles) {
            if (v.id != dbg_e->id &&
                min_distance(dbg_e->pose, dbg_e->footprint, v.pose, v.footprint) == 0.0)
              std::fprintf(stderr, "OVERLAP ego(%u) with %u at t=%llu\n", dbg_e->id, v.id,
                           (unsigned long long)world.clock_ms);
            const VehicleState* dbg_c = world.find(setup_.collider_id);
            if (dbg_c && v.id != dbg_c->id &&
                min_distance(dbg_c->pose, dbg_c->footprint, v.pose, v.footprint) == 0.0)
              std::fprintf(stderr, "OVERLAP collider(%u) with %u at t=%llu\n", dbg_c->id, v.id,
                           (unsigned long long)world.clock_ms);
          }
        }
        if (sample.overlap) {
          done = true;
          break;
        }
        if (sample.has_collider && sample.ego_speed < kDeadlockSpeed &&
            sample.collider_speed < kDeadlockSpeed) {
          if (!still) {
            still = true;
            still_since = sample.t_ms;
          } else if (sample.t_ms - still_since >= kDeadlockWindowMs + 500) {
            done = true;  // deadlock confirmed; nothing more can change
          }
        } else {
          still = false;
        }
      }

      if (run_finished(world)) done = true;
    }

    // --- Metrics -------------------------------------------------------------
    ScenarioResult& res = art.result;
    res.scenario = cfg_.scenario;
    res.scheduler = cfg_.scheduler;
    res.density = cfg_.density;
    res.collider_speed_kmh = cfg_.collider_speed_kmh;
    res.delta_s = cfg_.delta_s;
    res.seed = cfg_.seed;
    res.outcome = classify_outcome(art.trace);
    res.reaction_time_s = compute_reaction_time(art.trace, setup_.conflict_point, 6.0);
    for (const auto& s : art.trace.steps) {
      res.closest_distance_m = std::min(res.closest_distance_m, s.ego_collider_distance);
    }
    res.collider_visible_fraction =
        vis_considered ? static_cast<double>(vis_seen) / static_cast<double>(vis_considered) : 0.0;
    res.mean_collider_points = vis_considered ? collider_points_sum / vis_considered : 0.0;
    res.total_reward = total_reward;
    res.compute_ms_p50 = percentile(compute_ms, 0.50);
    res.compute_ms_p99 = percentile(compute_ms, 0.99);
    res.compute_ms_mean = mean(compute_ms);
    res.pipeline_ms_mean = mean(pipeline_ms);
    res.scheduled_delay_ms_mean = mean(delays_ms);
    res.duration_s = art.trace.steps.empty() ? 0.0 : art.trace.steps.back().t_ms / 1000.0;
    return art;
  }

 private:
  /// Peer set for an object map: every domain member except `exclude` (the
  /// message's sender). Trajectories come from the viewer's beacon store.
  std::vector<PeerInfo> peer_view(const detail::Agent& viewer, const std::vector<VehicleId>& members,
                                  VehicleId exclude) const {
    std::vector<PeerInfo> peers;
    for (const VehicleId id : members) {
      if (id == exclude) continue;
      const VehicleState* v = setup_.world.find(id);
      PeerInfo info;
      info.id = id;
      info.pose = v->pose;
      if (const auto it = viewer.beacons.find(id); it != viewer.beacons.end()) {
        info.trajectory = it->second.trajectory;
      }
      peers.push_back(std::move(info));
    }
    return peers;
  }

  /// The trajectory a participant advertises: current pose followed by the
  /// still-future part of its plan (or its scripted route for drones).
  Trajectory beacon_trajectory(const detail::Agent& agent, const VehicleState& v, TimeMs now) const {
    Trajectory out;
    out.waypoints.push_back({v.pose.x, v.pose.y, now});
    if (agent.id == setup_.ego_id) {
      for (const auto& wp : agent.planned.waypoints) {
        if (wp.timestamp_ms > now) out.waypoints.push_back(wp);
      }
      return out;
    }
    if (v.route.size() >= 2 && v.speed > 0.05) {
      for (int k = 1; k <= 4; ++k) {
        Vec2 pos = v.pose.position();
        double heading = v.pose.heading;
        detail::route_sample(v.route, v.route_s + v.speed * k, pos, heading);
        out.waypoints.push_back({pos.x, pos.y, now + static_cast<TimeMs>(1000 * k)});
      }
    } else {
      out.waypoints.push_back({v.pose.x, v.pose.y, now + 4000});
    }
    return out;
  }

  SchedulerInput scheduler_input(const detail::Agent& ego_agent,
                                 const std::vector<VehicleId>& members) const {
    SchedulerInput input;
    input.peers = members;
    input.frame_budgets = budgets_;
    for (const VehicleId sender : members) {
      const auto it = ego_agent.beacons.find(sender);
      if (it == ego_agent.beacons.end()) continue;
      const ControlMessage& msg = it->second;
      for (std::size_t k = 0; k < msg.object_map.size(); ++k) {
        const ObjectMapEntry& entry = msg.object_map[k];
        ScheduleItem item;
        item.transmitter = sender;
        item.object = entry.object_id;
        item.size_bytes = std::max<std::uint32_t>(entry.size_bytes, 1);
        item.starvation = k < msg.hints.size() ? msg.hints[k].starvation : 0;
        for (const VehicleId rx : members) {
          if (rx == sender) continue;
          double y = 0.0;
          if (const PeerMetric* m = entry.metric_for(rx)) {
            y = pair_reward(m->visible, m->relevance);
          }
          item.receivers.push_back({rx, y, false});
        }
        input.items.push_back(std::move(item));
      }
    }
    return input;
  }

  FramePlan dispatch_scheduler(const SchedulerInput& input) {
    switch (cfg_.scheduler) {
      case SchedulerKind::Greedy: return greedy_schedule(input);
      case SchedulerKind::Optimal: return knapsack_schedule(input, cfg_.knapsack_resolution);
      case SchedulerKind::Fptas: return fptas_schedule(input, cfg_.fptas_eps);
      case SchedulerKind::Agnostic: return agnostic_.schedule(input);
      case SchedulerKind::Single: break;
    }
    return {};
  }

  ChannelMatrix channel_matrix(const std::vector<VehicleId>& members) const {
    ChannelMatrix m = ChannelMatrix::uniform(members, 1.0);
    for (const VehicleId a : members) {
      for (const VehicleId b : members) {
        if (a == b) continue;
        const double d = distance(setup_.world.find(a)->pose.position(),
                                  setup_.world.find(b)->pose.position());
        m.set(a, b, link_probability(d, cfg_.channel.loss));
      }
    }
    return m;
  }

  double realized_reward(const SchedulerInput& input, const ReceptionLog& log) const {
    double total = 0.0;
    for (const auto& t : log.transmissions) {
      const ScheduleItem* item = nullptr;
      for (const auto& i : input.items) {
        if (i.transmitter == t.transmitter && i.object == t.object) {
          item = &i;
          break;
        }
      }
      if (!item) continue;
      for (const auto& o : t.outcomes) {
        if (!o.delivered) continue;
        for (const auto& r : item->receivers) {
          if (r.receiver == o.receiver) total += r.reward;
        }
      }
    }
    return total;
  }

  void deliver_to_ego(const ReceptionLog& log, TimeMs now) {
    for (const auto& t : log.transmissions) {
      if (t.transmitter == setup_.ego_id) continue;
      bool to_ego = false;
      for (const auto& o : t.outcomes) {
        if (o.receiver == setup_.ego_id && o.delivered) to_ego = true;
      }
      if (!to_ego) continue;
      const detail::Agent& sender = agents_.at(t.transmitter);
      const RoadObject* payload = nullptr;
      for (const auto& obj : sender.objects) {
        if (obj.id == t.object) {
          payload = &obj;
          break;
        }
      }
      if (!payload) continue;

      const VehicleState* vs = setup_.world.find(t.transmitter);
      const RigidTransform sender_tf =
          RigidTransform::from_pose(vs->pose, "veh:" + std::to_string(t.transmitter), "map");
      // Ship the payload fully in the sender's frame, as a real transmitter
      // would; fusion maps it back through the carried transform.
      const RigidTransform to_sender = sender_tf.inverse();
      detail::StoredReception rec;
      rec.payload = *payload;
      rec.payload.cloud = apply_transform(to_sender, payload->cloud);
      const Point3 local_centroid =
          to_sender.apply(Point3{payload->centroid.x, payload->centroid.y, 0.0});
      rec.payload.centroid = {local_centroid.x, local_centroid.y};
      const Point3 v0 = to_sender.apply(Point3{0.0, 0.0, 0.0});
      const Point3 v1 = to_sender.apply(Point3{payload->velocity.x, payload->velocity.y, 0.0});
      rec.payload.velocity = {v1.x - v0.x, v1.y - v0.y};
      rec.sender_tf = sender_tf;
      rec.capture_centroid = payload->centroid;
      rec.velocity = payload->velocity;
      rec.sender = t.transmitter;
      rec.received_ms = now;

      // One slot per physical object: replace by id or by predicted position.
      bool replaced = false;
      for (auto& existing : received_) {
        const double age_s = static_cast<double>(now - existing.received_ms) / 1000.0;
        const Vec2 predicted = existing.capture_centroid + existing.velocity * age_s;
        if (existing.payload.id == rec.payload.id ||
            (existing.sender == rec.sender && distance(predicted, payload->centroid) < 3.0)) {
          existing = rec;
          replaced = true;
          break;
        }
      }
      if (!replaced) received_.push_back(std::move(rec));
    }
  }

  void update_starvation(const std::vector<VehicleId>& members, const FramePlan& plan,
                         const ReceptionLog& log) {
    for (const VehicleId id : members) {
      detail::Agent& agent = agents_.at(id);
      const auto it = agent.beacons.find(id);
      if (it == agent.beacons.end()) continue;
      const ControlMessage& msg = it->second;
      for (std::size_t k = 0; k < msg.object_map.size() && k < agent.object_track.size(); ++k) {
        const ObjectMapEntry& entry = msg.object_map[k];
        double weight = 0.0;
        for (const auto& m : entry.peers) weight += pair_reward(m.visible, m.relevance);
        detail::ObjectTrack& track = agent.tracks[agent.object_track[k]];
        if (weight <= 0.0) {
          track.starvation = 0;
          continue;
        }
        bool served = false;
        if (plan.scheduled(id, entry.object_id)) {
          for (const auto& t : log.transmissions) {
            if (t.transmitter != id || t.object != entry.object_id) continue;
            for (const auto& o : t.outcomes) {
              const PeerMetric* m = entry.metric_for(o.receiver);
              if (o.delivered && m && pair_reward(m->visible, m->relevance) > 0.0) served = true;
            }
          }
        }
        track.starvation = served ? 0 : track.starvation + 1;
      }
    }
  }

  FusedView fuse_view(const detail::Agent& ego_agent, const OccupancyGrid& ego_grid, TimeMs now) {
    std::erase_if(received_, [&](const detail::StoredReception& r) {
      return now - r.received_ms > 3000;
    });
    const VehicleState* ego_v = setup_.world.find(setup_.ego_id);
    const Vec2 ego_pos = ego_v->pose.position();
    const Vec2 ego_vel{ego_v->speed * std::cos(ego_v->pose.heading),
                       ego_v->speed * std::sin(ego_v->pose.heading)};
    // Peers legitimately share their view of this vehicle; a track that rides
    // along with the ego over the next second is the ego itself.
    const auto is_self_echo = [&](const detail::StoredReception& r, double age_s) {
      for (const double tau : {0.0, 0.4, 0.8, 1.2}) {
        const Vec2 track = r.capture_centroid + r.velocity * (age_s + tau);
        if (distance(track, ego_pos + ego_vel * tau) < 3.0) return true;
      }
      return false;
    };
    std::vector<ReceivedObject> received;
    received.reserve(received_.size());
    for (const auto& r : received_) {
      const double age_s = static_cast<double>(now - r.received_ms) / 1000.0;
      if (is_self_echo(r, age_s)) continue;
      ReceivedObject ro;
      ro.object = r.payload;  // still in the sender frame, velocity included
      ro.object.last_update = now;
      // Extrapolate by composing the drift onto the capture transform.
      RigidTransform drift = RigidTransform::identity("map");
      drift.matrix(0, 3) = r.velocity.x * age_s;
      drift.matrix(1, 3) = r.velocity.y * age_s;
      ro.sender_transform = compose(drift, r.sender_tf);
      received.push_back(std::move(ro));
    }
    return fuse_received(ego_grid, ego_agent.objects, received,
                         RigidTransform::identity("map"));
  }

  bool collider_in_view(const FusedView& fused, const World& world) const {
    const VehicleState* col = world.find(setup_.collider_id);
    if (!col) return false;
    for (const auto& [id, fo] : fused.objects) {
      if (distance(fo.object.centroid, col->pose.position()) < 3.0) return true;
    }
    return false;
  }

  double fused_collider_points(const FusedView& fused, const World& world) const {
    const VehicleState* col = world.find(setup_.collider_id);
    if (!col) return 0.0;
    double best = 0.0;
    for (const auto& [id, fo] : fused.objects) {
      if (distance(fo.object.centroid, col->pose.position()) < 3.0) {
        best = std::max(best, static_cast<double>(fo.object.cloud.points.size()));
      }
    }
    return best;
  }

  void plan_ego(detail::Agent& ego_agent, const FusedView& fused, TimeMs now) {
    VehicleState* ego = setup_.world.find(setup_.ego_id);
    const auto src = grid_index(ego->pose.position(), setup_.map_spec);
    const auto dst = grid_index(setup_.ego_goal, setup_.map_spec);
    if (!src || !dst) return;

    const double curvature = ego->speed <= 6.0 ? std::numbers::pi / 2.0 : std::numbers::pi / 4.0;
    if (ego_path_ && !path_clear(fused, trim_path(*ego_path_, ego->pose.position()))) {
      ego_path_.reset();
    }
    if (!ego_path_) {
      ego_path_ = plan_path(fused, *src, *dst, ego->footprint.width, curvature, ego->pose.heading);
    }

    if (!ego_path_) {
      if (std::getenv("COOPSIM_DEBUG2")) std::fprintf(stderr, "t=%llu NOPATH\n", (unsigned long long)now);
      // Boxed in: stop and report; retried next interval.
      Trajectory hold;
      hold.waypoints.push_back({ego->pose.x, ego->pose.y, now});
      ego_agent.planned = hold;
      ego->route.clear();
      return;
    }

    const Path remaining = trim_path(*ego_path_, ego->pose.position());
    TrajectoryParams params;
    params.cruise_speed = cfg_.ego_cruise_mps;
    params.initial_speed = ego->speed;
    params.decel = 6.0;
    params.conflict_threshold = 3.0;
    params.stop_margin = 10.0;
    params.horizon_ms = 10000;
    ego_agent.planned = plan_trajectory(remaining, fused, now, params);
    if (std::getenv("COOPSIM_DEBUG2") && ego_agent.planned.waypoints.size() <= 1) {
      for (const auto& [id, fo] : fused.objects) {
        if (distance(fo.object.centroid, ego->pose.position()) < 8.0) {
          std::fprintf(stderr, "  near-track id=%llx c=(%.2f,%.2f) v=(%.2f,%.2f) prov=%d cells=%zu\n",
                       (unsigned long long)id, fo.object.centroid.x, fo.object.centroid.y,
                       fo.object.velocity.x, fo.object.velocity.y,
                       fo.provenance == Provenance::Received ? 1 : 0, fo.object.cells.size());
        }
      }
    }
    if (std::getenv("COOPSIM_DEBUG2")) {
      std::vector<RoadObject> dbg_tracks;
      for (const auto& [id, fo] : fused.objects) dbg_tracks.push_back(fo.object);
      const auto c = predict_collision(ego_agent.planned, dbg_tracks, 3.0, 10000);
      std::fprintf(stderr,
                   "t=%llu ego=(%.2f,%.2f) v=%.2f wps=%zu last=(%.1f,%.1f) conflict=%d\n",
                   (unsigned long long)now, ego->pose.x, ego->pose.y, ego->speed,
                   ego_agent.planned.waypoints.size(),
                   ego_agent.planned.waypoints.empty() ? 0.0 : ego_agent.planned.waypoints.back().x,
                   ego_agent.planned.waypoints.empty() ? 0.0 : ego_agent.planned.waypoints.back().y,
                   c ? 1 : 0);
    }
    ego->route = remaining.points;
    ego->route_s = 0.0;
  }

  static Path trim_path(const Path& path, const Vec2& pos) {
    Path out;
    out.width = path.width;
    if (path.points.size() < 2) {
      out.points = path.points;
      return out;
    }
    std::size_t best_i = 0;
    double best_d = std::numeric_limits<double>::infinity();
    Vec2 best_p = path.points.front();
    for (std::size_t i = 0; i + 1 < path.points.size(); ++i) {
      const Vec2 a = path.points[i];
      const Vec2 b = path.points[i + 1];
      const Vec2 ab = b - a;
      const double len2 = ab.squared_norm();
      const double t = len2 > 0.0 ? std::clamp((pos - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
      const Vec2 proj = a + ab * t;
      const double d = distance(pos, proj);
      if (d < best_d) {
        best_d = d;
        best_i = i;
        best_p = proj;
      }
    }
    out.points.push_back(best_p);
    for (std::size_t i = best_i + 1; i < path.points.size(); ++i) {
      out.points.push_back(path.points[i]);
    }
    return out;
  }

  /// Target speed implied by the planned trajectory at time t: the segment
  /// speed of the bracketing waypoints, zero beyond the final one.
  static double trajectory_speed(const Trajectory& traj, TimeMs t) {
    const auto& wps = traj.waypoints;
    if (wps.size() < 2) return 0.0;
    if (t >= wps.back().timestamp_ms) return 0.0;
    std::size_t i = 0;
    while (i + 1 < wps.size() && wps[i + 1].timestamp_ms <= t) ++i;
    if (i + 1 >= wps.size()) return 0.0;
    const double ds = distance(wps[i].position(), wps[i + 1].position());
    const double dt = static_cast<double>(wps[i + 1].timestamp_ms - wps[i].timestamp_ms) / 1000.0;
    return dt > 0.0 ? ds / dt : 0.0;
  }

  DriveCommand collider_control(const World& world) {
    const VehicleState* col = world.find(setup_.collider_id);
    if (!col) return DriveCommand::cruise(0.0);
    const PointCloud local = sense_lidar(world, *col, cfg_.sensor);
    const RigidTransform to_map = RigidTransform::from_pose(col->pose, local.frame_id, "map");
    const PointCloud map_cloud = apply_transform(to_map, local);
    const OccupancyGrid grid =
        build_occupancy_grid(map_cloud, setup_.map_spec, world.road, cfg_.ground_threshold);
    std::vector<RoadObject> objects =
        extract_objects(grid, map_cloud, setup_.collider_id, world.clock_ms);
    std::erase_if(objects, [&](const RoadObject& o) {
      return o.cells.size() < cfg_.min_object_cells ||
             o.cloud.points.size() < cfg_.min_object_points;
    });

    const Vec2 dir{std::cos(col->pose.heading), std::sin(col->pose.heading)};
    const double react = stopping_distance(col->speed, 6.0) + 4.0;
    for (const auto& obj : objects) {
      const Vec2 rel = obj.centroid - col->pose.position();
      const double along = rel.dot(dir);
      const double lateral = std::abs(rel.x * dir.y - rel.y * dir.x);
      if (along > 0.5 && along <= react && lateral <= 1.7) return DriveCommand::brake();
    }
    return DriveCommand::cruise(setup_.collider_speed_mps);
  }

  StepSample sample_step(const World& world, bool collider_fused) const {
    StepSample s;
    s.t_ms = world.clock_ms;
    const VehicleState* ego = world.find(setup_.ego_id);
    const VehicleState* col = world.find(setup_.collider_id);
    s.ego_pos = ego->pose.position();
    s.ego_heading = ego->pose.heading;
    s.ego_speed = ego->speed;
    s.collider_in_fused_view = collider_fused;
    s.has_collider = col != nullptr;
    if (col) {
      s.collider_pos = col->pose.position();
      s.collider_speed = col->speed;
      s.ego_collider_distance = min_distance(ego->pose, ego->footprint, col->pose, col->footprint);
    }
    for (const auto& v : world.vehicles) {
      if (v.id != ego->id &&
          min_distance(ego->pose, ego->footprint, v.pose, v.footprint) == 0.0) {
        s.overlap = true;
      }
      if (col && v.id != col->id && v.id != ego->id &&
          min_distance(col->pose, col->footprint, v.pose, v.footprint) == 0.0) {
        s.overlap = true;
      }
    }
    return s;
  }

  bool run_finished(const World& world) const {
    const VehicleState* ego = world.find(setup_.ego_id);
    const double len = detail::route_length(ego->route);
    if (len > 0.0 && ego->route_s >= len - 2.0 &&
        distance(ego->pose.position(), setup_.ego_goal) < 4.0) {
      return true;
    }
    // Conflict resolved: ego is well past the crossing and clear of the collider.
    const Vec2 to_conflict = setup_.conflict_point - ego->pose.position();
    const bool passed =
        to_conflict.dot({std::cos(ego->pose.heading), std::sin(ego->pose.heading)}) < -15.0;
    const VehicleState* col = world.find(setup_.collider_id);
    if (passed && (!col || distance(col->pose.position(), ego->pose.position()) > 20.0)) {
      return true;
    }
    return false;
  }

  void append_channel_rows(RunArtifacts& art, std::size_t interval, const ReceptionLog& log) const {
    if (!cfg_.write_traces) return;
    for (const auto& t : log.transmissions) {
      std::string outcomes;
      for (const auto& o : t.outcomes) {
        if (!outcomes.empty()) outcomes += '|';
        outcomes += std::to_string(o.receiver) + ':' + (o.delivered ? '1' : '0');
      }
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%zu,%d,%u,%s,%u,%s,%s,%s", interval, t.frame,
                    t.transmitter, detail::hex_id(t.object).c_str(), t.size_bytes,
                    detail::format_double(t.start_ms, 3).c_str(),
                    detail::format_double(t.end_ms, 3).c_str(), outcomes.c_str());
      art.channel_rows.emplace_back(buf);
    }
  }

  void append_plan_row(RunArtifacts& art, std::size_t interval, const FramePlan& plan) const {
    if (!cfg_.write_traces) return;
    nlohmann::json j;
    j["interval"] = interval;
    j["scheduler"] = to_string(cfg_.scheduler);
    auto items = nlohmann::json::array();
    for (const auto& a : plan.assignments) {
      items.push_back({{"frame", a.frame},
                       {"tx", a.transmitter},
                       {"object", detail::hex_id(a.object)},
                       {"size", a.size_bytes}});
    }
    j["assignments"] = std::move(items);
    j["used_bytes"] = plan.used_bytes;
    art.plan_rows.push_back(j.dump());
  }

  void append_trajectory_row(RunArtifacts& art, std::size_t interval, const Trajectory& traj) const {
    if (!cfg_.write_traces) return;
    nlohmann::json j;
    j["interval"] = interval;
    auto wps = nlohmann::json::array();
    for (const auto& wp : traj.waypoints) {
      wps.push_back({detail::format_double(wp.x, 3), detail::format_double(wp.y, 3),
                     wp.timestamp_ms});
    }
    j["waypoints"] = std::move(wps);
    art.trajectory_rows.push_back(j.dump());
  }

  ScenarioConfig cfg_;
  ScenarioSetup setup_;
  ControlMessageParams msg_params_;
  std::vector<std::uint64_t> budgets_;
  std::map<VehicleId, detail::Agent> agents_;
  std::map<VehicleId, double> background_speed_;
  std::vector<detail::StoredReception> received_;
  std::optional<Path> ego_path_;
  AgnosticScheduler agnostic_;
};

inline RunArtifacts run_scenario(const ScenarioConfig& cfg) {
  return ScenarioRunner(cfg).run();
}

/// Writes the trace files for one run; returns the directory used.
inline std::string write_run_artifacts(const RunArtifacts& art, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(dir + "/channel_trace.csv", std::ios::binary);
    out << "interval,frame,tx,object,size_bytes,start_ms,end_ms,outcomes\n";
    for (const auto& row : art.channel_rows) out << row << "\n";
  }
  {
    std::ofstream out(dir + "/plans.jsonl", std::ios::binary);
    for (const auto& row : art.plan_rows) out << row << "\n";
  }
  {
    std::ofstream out(dir + "/trajectories.jsonl", std::ios::binary);
    for (const auto& row : art.trajectory_rows) out << row << "\n";
  }
  {
    nlohmann::json j = art.result;
    std::ofstream out(dir + "/result.json", std::ios::binary);
    out << j.dump(2) << "\n";
  }
  return dir;
}

}  // namespace coopsim

#pragma once

#include <cstring>
#include <map>
#include <span>

#include "coopsim/spatial.hpp"

namespace coopsim {

/// Kinematic sidecar carried with a beacon so receivers can compensate a
/// lost update by extrapolation. Not part of the wire format.
struct ObjectHint {
  ObjectId object_id = 0;
  Vec2 centroid;   // map frame
  Vec2 velocity;   // m/s
  std::uint32_t cell_count = 0;
  std::uint32_t starvation = 0;
};

/// Per-interval beacon: the sender's downsampled trajectory plus visibility
/// and relevance metadata for every (object, peer) pair.
struct ControlMessage {
  VehicleId sender = 0;
  TimeMs timestamp_ms = 0;
  Trajectory trajectory;
  std::vector<ObjectMapEntry> object_map;
  std::vector<ObjectHint> hints;  // parallel to object_map
};

struct DomainConfig {
  Vec2 center;
  double radio_range_m = 170.0;
  double membership_radius_m = 85.0;  // at most half the radio range
  double guard_band_m = 1.8;          // one interval of drift at ~40 mph
};

/// Vehicles within the effective domain radius (membership radius minus the
/// guard band), boundary inclusive. Ascending ids, so every member derives
/// the same set from the same beacon snapshot.
inline std::vector<VehicleId> domain_members(const std::map<VehicleId, Vec2>& positions,
                                             const DomainConfig& cfg) {
  const double effective = cfg.membership_radius_m - cfg.guard_band_m;
  std::vector<VehicleId> out;
  for (const auto& [id, pos] : positions) {
    if (distance(pos, cfg.center) <= effective) out.push_back(id);
  }
  return out;
}

struct PeerInfo {
  VehicleId id = 0;
  Pose pose;
  Trajectory trajectory;
};

struct ControlMessageParams {
  double downsample_tolerance_m = 0.25;
  double sensor_range_m = 100.0;
  RelevanceParams relevance;
  double cell_size = 0.5;
};

/// Builds the beacon for one interval: visibility of every extracted object
/// from every peer's position (the sender's own body counts as an occluder)
/// and relevance against every peer's trajectory. Entries are kept even when
/// an object is visible everywhere; the reward model zeroes them later.
inline ControlMessage build_control_message(const VehicleState& self, const Trajectory& planned,
                                            std::span<const RoadObject> objects,
                                            std::span<const PeerInfo> peers,
                                            std::span<const std::uint32_t> starvation = {},
                                            const ControlMessageParams& params = {}) {
  ControlMessage msg;
  msg.sender = self.id;
  msg.timestamp_ms = self.pose.timestamp_ms;
  msg.trajectory = downsample_trajectory(planned, params.downsample_tolerance_m);
  if (msg.trajectory.waypoints.empty()) {
    msg.trajectory.waypoints.push_back({self.pose.x, self.pose.y, self.pose.timestamp_ms});
  }

  // Shapes shared by every per-peer scene: all extracted objects plus the
  // sender's own body, which shadows objects behind it.
  std::vector<RoadObject> shapes(objects.begin(), objects.end());
  shapes.push_back(footprint_as_object(self.pose, self.footprint, params.cell_size, self.id));

  for (std::size_t k = 0; k < objects.size(); ++k) {
    const RoadObject& obj = objects[k];
    ObjectMapEntry entry;
    entry.object_id = obj.id;
    entry.size_bytes = obj.size_bytes;
    entry.peers.resize(peers.size());

    ObjectHint hint;
    hint.object_id = obj.id;
    hint.centroid = obj.centroid;
    hint.velocity = obj.velocity;
    hint.cell_count = static_cast<std::uint32_t>(obj.cells.size());
    hint.starvation = k < starvation.size() ? starvation[k] : 0;
    msg.hints.push_back(hint);
    msg.object_map.push_back(std::move(entry));
  }

  for (std::size_t p = 0; p < peers.size(); ++p) {
    const PeerInfo& peer = peers[p];
    const ShadowScene scene(peer.pose.position(), shapes);
    for (std::size_t k = 0; k < objects.size(); ++k) {
      PeerMetric& m = msg.object_map[k].peers[p];
      m.peer = peer.id;
      m.visible = scene.visible(k, params.sensor_range_m);
      m.relevance = compute_relevance(objects[k], peer.trajectory, params.relevance);
    }
  }
  for (auto& entry : msg.object_map) {
    std::sort(entry.peers.begin(), entry.peers.end(),
              [](const PeerMetric& a, const PeerMetric& b) { return a.peer < b.peer; });
  }
  return msg;
}

/// Reconstitutes an occluder/target shape from a beacon hint: a square cell
/// block of the reported area centered on the (extrapolated) centroid.
inline RoadObject object_from_hint(const ObjectHint& hint, double cell_size, TimeMs now_ms,
                                   VehicleId owner) {
  RoadObject obj;
  obj.id = hint.object_id;
  obj.owner = owner;
  obj.cell_size = cell_size;
  obj.centroid = hint.centroid;
  obj.velocity = hint.velocity;
  obj.last_update = now_ms;
  const int side = std::max(1, static_cast<int>(std::ceil(std::sqrt(hint.cell_count))));
  const int cx = static_cast<int>(std::floor(hint.centroid.x / cell_size)) - side / 2;
  const int cy = static_cast<int>(std::floor(hint.centroid.y / cell_size)) - side / 2;
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) obj.cells.push_back({cx + x, cy + y});
  }
  std::sort(obj.cells.begin(), obj.cells.end());
  return obj;
}

/// Stand-in beacon for a sender whose update was lost this interval: stale
/// waypoints are evicted, object positions are extrapolated to `now_ms`, and
/// visibility/relevance are recomputed against the current peer view.
inline ControlMessage compensate_missing(const ControlMessage& last,
                                         std::span<const PeerInfo> peers, TimeMs now_ms,
                                         const ControlMessageParams& params = {}) {
  ControlMessage msg;
  msg.sender = last.sender;
  msg.timestamp_ms = now_ms;

  for (const auto& wp : last.trajectory.waypoints) {
    if (wp.timestamp_ms >= now_ms) msg.trajectory.waypoints.push_back(wp);
  }
  if (msg.trajectory.waypoints.empty() && !last.trajectory.waypoints.empty()) {
    Waypoint hold = last.trajectory.waypoints.back();
    hold.timestamp_ms = now_ms;
    msg.trajectory.waypoints.push_back(hold);
  }

  const double dt_s =
      (static_cast<double>(now_ms) - static_cast<double>(last.timestamp_ms)) / 1000.0;

  std::vector<RoadObject> shapes;
  shapes.reserve(last.hints.size());
  for (const auto& hint : last.hints) {
    ObjectHint moved = hint;
    moved.centroid = hint.centroid + hint.velocity * dt_s;
    shapes.push_back(object_from_hint(moved, params.cell_size, now_ms, last.sender));
  }

  for (std::size_t k = 0; k < last.hints.size(); ++k) {
    ObjectHint hint = last.hints[k];
    hint.centroid = shapes[k].centroid;
    msg.hints.push_back(hint);

    ObjectMapEntry entry;
    entry.object_id = last.object_map[k].object_id;
    entry.size_bytes = last.object_map[k].size_bytes;
    entry.peers.resize(peers.size());
    msg.object_map.push_back(std::move(entry));
  }

  for (std::size_t p = 0; p < peers.size(); ++p) {
    const PeerInfo& peer = peers[p];
    const ShadowScene scene(peer.pose.position(), shapes);
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      PeerMetric& m = msg.object_map[k].peers[p];
      m.peer = peer.id;
      m.visible = scene.visible(k, params.sensor_range_m);
      m.relevance = compute_relevance(shapes[k], peer.trajectory, params.relevance);
    }
  }
  for (auto& entry : msg.object_map) {
    std::sort(entry.peers.begin(), entry.peers.end(),
              [](const PeerMetric& a, const PeerMetric& b) { return a.peer < b.peer; });
  }
  return msg;
}

// ---------------------------------------------------------------------------
// Wire format (little-endian):
//   u32 sender | u64 timestamp_ms | u16 waypoint_count |
//   waypoints: (f32 x, f32 y, u64 t) each |
//   u16 entry_count | entries: u64 object_id, u32 size_bytes,
//   ceil(P/8) visibility bitmask bytes, P f32 relevances
// where P is the size of the sorted peer list both ends agree on. Bit k of
// the mask corresponds to the k-th peer; set means visible.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get(std::span<const std::uint8_t> in, std::size_t& off) {
  if (off + sizeof(T) > in.size()) throw std::runtime_error("control message: truncated buffer");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_control_message(const ControlMessage& msg,
                                                        std::span<const VehicleId> peers) {
  std::vector<std::uint8_t> out;
  detail::put<std::uint32_t>(out, msg.sender);
  detail::put<std::uint64_t>(out, msg.timestamp_ms);
  detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(msg.trajectory.waypoints.size()));
  for (const auto& wp : msg.trajectory.waypoints) {
    detail::put<float>(out, static_cast<float>(wp.x));
    detail::put<float>(out, static_cast<float>(wp.y));
    detail::put<std::uint64_t>(out, wp.timestamp_ms);
  }
  detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(msg.object_map.size()));
  const std::size_t mask_bytes = (peers.size() + 7) / 8;
  for (const auto& entry : msg.object_map) {
    detail::put<std::uint64_t>(out, entry.object_id);
    detail::put<std::uint32_t>(out, entry.size_bytes);
    std::vector<std::uint8_t> mask(mask_bytes, 0);
    for (std::size_t k = 0; k < peers.size(); ++k) {
      const PeerMetric* m = entry.metric_for(peers[k]);
      if (m && m->visible) mask[k / 8] |= static_cast<std::uint8_t>(1u << (k % 8));
    }
    out.insert(out.end(), mask.begin(), mask.end());
    for (std::size_t k = 0; k < peers.size(); ++k) {
      const PeerMetric* m = entry.metric_for(peers[k]);
      detail::put<float>(out, m ? static_cast<float>(m->relevance) : 0.0f);
    }
  }
  return out;
}

inline ControlMessage decode_control_message(std::span<const std::uint8_t> buf,
                                             std::span<const VehicleId> peers) {
  ControlMessage msg;
  std::size_t off = 0;
  msg.sender = detail::get<std::uint32_t>(buf, off);
  msg.timestamp_ms = detail::get<std::uint64_t>(buf, off);
  const auto wp_count = detail::get<std::uint16_t>(buf, off);
  for (std::uint16_t i = 0; i < wp_count; ++i) {
    Waypoint wp;
    wp.x = detail::get<float>(buf, off);
    wp.y = detail::get<float>(buf, off);
    wp.timestamp_ms = detail::get<std::uint64_t>(buf, off);
    msg.trajectory.waypoints.push_back(wp);
  }
  const auto entry_count = detail::get<std::uint16_t>(buf, off);
  const std::size_t mask_bytes = (peers.size() + 7) / 8;
  for (std::uint16_t e = 0; e < entry_count; ++e) {
    ObjectMapEntry entry;
    entry.object_id = detail::get<std::uint64_t>(buf, off);
    entry.size_bytes = detail::get<std::uint32_t>(buf, off);
    std::vector<std::uint8_t> mask(mask_bytes);
    for (auto& b : mask) b = detail::get<std::uint8_t>(buf, off);
    entry.peers.resize(peers.size());
    for (std::size_t k = 0; k < peers.size(); ++k) {
      entry.peers[k].peer = peers[k];
      entry.peers[k].visible = (mask[k / 8] >> (k % 8)) & 1u;
    }
    for (std::size_t k = 0; k < peers.size(); ++k) {
      entry.peers[k].relevance = detail::get<float>(buf, off);
    }
    msg.object_map.push_back(std::move(entry));
  }
  if (off != buf.size()) throw std::runtime_error("control message: trailing bytes");
  return msg;
}

}  // namespace coopsim

#pragma once

#include <cmath>
#include <variant>
#include <vector>

#include "coopsim/scheduler.hpp"

namespace coopsim {

struct ConstantLoss {
  double p = 0.95;
};

struct ExponentialLoss {
  double p0 = 0.95;
  double decay_m = 200.0;  // e-folding distance
};

/// Piecewise-linear delivery probability over distance, clamped at the ends.
struct TableLoss {
  std::vector<std::pair<double, double>> points;  // (distance m, probability), ascending
};

using LossModel = std::variant<ConstantLoss, ExponentialLoss, TableLoss>;

struct ChannelConfig {
  double bandwidth_bps = 7.2e6;
  TimeMs decision_interval_ms = 100;
  TimeMs frame_ms = 10;  // uniform TDMA frames; frame count = interval / frame
  LossModel loss = ExponentialLoss{};
  double radio_range_m = 170.0;
  double control_overhead_fraction = 0.02;  // beacon airtime share, charged to frame 0

  std::size_t frame_count() const {
    return frame_ms == 0 ? 0 : static_cast<std::size_t>(decision_interval_ms / frame_ms);
  }
};

/// Byte budget of frame n: S = B * T / 8, with the control-message overhead
/// share subtracted from frame 0.
inline std::uint64_t frame_budget(const ChannelConfig& cfg, std::size_t n) {
  if (n >= cfg.frame_count()) throw std::out_of_range("frame_budget: frame index out of range");
  const double frame_bytes = cfg.bandwidth_bps * (static_cast<double>(cfg.frame_ms) / 1000.0) / 8.0;
  double budget = frame_bytes;
  if (n == 0) {
    const double interval_bytes =
        cfg.bandwidth_bps * (static_cast<double>(cfg.decision_interval_ms) / 1000.0) / 8.0;
    budget -= cfg.control_overhead_fraction * interval_bytes;
  }
  return static_cast<std::uint64_t>(std::max(0.0, budget));
}

inline std::vector<std::uint64_t> frame_budgets(const ChannelConfig& cfg) {
  std::vector<std::uint64_t> out;
  out.reserve(cfg.frame_count());
  for (std::size_t n = 0; n < cfg.frame_count(); ++n) out.push_back(frame_budget(cfg, n));
  return out;
}

inline double link_probability(double distance_m, const LossModel& model) {
  if (distance_m < 0.0) throw std::invalid_argument("link_probability: negative distance");
  double p = 0.0;
  if (const auto* c = std::get_if<ConstantLoss>(&model)) {
    p = c->p;
  } else if (const auto* e = std::get_if<ExponentialLoss>(&model)) {
    p = e->p0 * std::exp(-distance_m / e->decay_m);
  } else if (const auto* t = std::get_if<TableLoss>(&model)) {
    const auto& pts = t->points;
    if (pts.empty()) return 0.0;
    if (distance_m <= pts.front().first) {
      p = pts.front().second;
    } else if (distance_m >= pts.back().first) {
      p = pts.back().second;
    } else {
      for (std::size_t i = 1; i < pts.size(); ++i) {
        if (distance_m <= pts[i].first) {
          const double span = pts[i].first - pts[i - 1].first;
          const double f = span > 0.0 ? (distance_m - pts[i - 1].first) / span : 0.0;
          p = pts[i - 1].second + f * (pts[i].second - pts[i - 1].second);
          break;
        }
      }
    }
  }
  return std::clamp(p, 0.0, 1.0);
}

struct ReceiverOutcome {
  VehicleId receiver = 0;
  bool delivered = false;
};

struct TransmissionRecord {
  int frame = 0;
  VehicleId transmitter = 0;
  ObjectId object = 0;
  std::uint32_t size_bytes = 0;
  double start_ms = 0.0;  // offset from the interval start
  double end_ms = 0.0;    // completion time (scheduled delay)
  std::vector<ReceiverOutcome> outcomes;
};

struct ReceptionLog {
  std::vector<TransmissionRecord> transmissions;  // plan execution order
  std::vector<std::uint64_t> frame_bytes_sent;

  bool delivered(VehicleId receiver, VehicleId tx, ObjectId obj) const {
    for (const auto& t : transmissions) {
      if (t.transmitter != tx || t.object != obj) continue;
      for (const auto& o : t.outcomes) {
        if (o.receiver == receiver) return o.delivered;
      }
    }
    return false;
  }
};

/// Executes a budget-feasible plan over the lossy broadcast channel. Frames
/// run on the TDMA grid; within a frame items transmit back to back, and each
/// broadcast draws one independent Bernoulli per receiver. Deterministic for
/// a given (plan, matrix, seed).
inline ReceptionLog execute_plan(const FramePlan& plan, const ChannelMatrix& channel,
                                 const ChannelConfig& cfg, std::uint64_t seed) {
  ReceptionLog log;
  log.frame_bytes_sent.assign(cfg.frame_count(), 0);
  Rng rng(seed);

  double cursor_ms = 0.0;
  int current_frame = -1;
  for (const auto& a : plan.assignments) {
    if (a.frame != current_frame) {
      current_frame = a.frame;
      cursor_ms = static_cast<double>(a.frame) * static_cast<double>(cfg.frame_ms);
    }
    TransmissionRecord rec;
    rec.frame = a.frame;
    rec.transmitter = a.transmitter;
    rec.object = a.object;
    rec.size_bytes = a.size_bytes;
    rec.start_ms = cursor_ms;
    const double airtime_ms = static_cast<double>(a.size_bytes) * 8.0 / cfg.bandwidth_bps * 1000.0;
    cursor_ms += airtime_ms;
    rec.end_ms = cursor_ms;

    for (const VehicleId rx : channel.ids) {
      if (rx == a.transmitter) continue;
      const double p = channel.get(a.transmitter, rx);
      rec.outcomes.push_back({rx, rng.bernoulli(p)});
    }
    log.frame_bytes_sent[static_cast<std::size_t>(a.frame)] += a.size_bytes;
    log.transmissions.push_back(std::move(rec));
  }
  return log;
}

}  // namespace coopsim

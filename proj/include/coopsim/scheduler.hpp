#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "coopsim/common.hpp"

namespace coopsim {

class scale_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Delivery reward for one (object, receiver) pair: the object is worth
/// sending only to a receiver that cannot see it but needs it.
inline double pair_reward(bool visible, double relevance) {
  if (relevance < 0.0 || relevance > 1.0) {
    throw std::invalid_argument("pair_reward: relevance outside [0,1]");
  }
  return (visible ? 0.0 : 1.0) * relevance;
}

struct ReceiverReward {
  VehicleId receiver = 0;
  double reward = 0.0;   // y for this pair
  bool received = false; // h: already delivered this interval
};

struct ScheduleItem {
  VehicleId transmitter = 0;
  ObjectId object = 0;
  std::uint32_t size_bytes = 0;
  std::uint32_t starvation = 0;  // decision intervals unserved while still rewarding
  std::vector<ReceiverReward> receivers;
};

struct SchedulerInput {
  std::vector<VehicleId> peers;  // scheduling domain, ascending ids
  std::vector<ScheduleItem> items;
  std::vector<std::uint64_t> frame_budgets;  // bytes per TDMA frame
};

/// Remaining system reward of one broadcast: sum of undelivered pair rewards.
inline double object_weight(const ScheduleItem& item) {
  double h = 0.0;
  for (const auto& r : item.receivers) {
    if (!r.received) h += r.reward;
  }
  return h;
}

struct PendingStats {
  double size_variance = 1.0;
  double starvation_variance = 1.0;
};

/// Population variances of size and starvation over the pending set, floored
/// at 1e-6 so degenerate (all-equal) populations stay usable.
inline PendingStats pending_stats(std::span<const ScheduleItem* const> pending) {
  PendingStats stats;
  const double n = static_cast<double>(pending.size());
  if (n == 0.0) return stats;
  double mean_s = 0.0, mean_m = 0.0;
  for (const auto* it : pending) {
    mean_s += it->size_bytes;
    mean_m += it->starvation;
  }
  mean_s /= n;
  mean_m /= n;
  double var_s = 0.0, var_m = 0.0;
  for (const auto* it : pending) {
    var_s += (it->size_bytes - mean_s) * (it->size_bytes - mean_s);
    var_m += (it->starvation - mean_m) * (it->starvation - mean_m);
  }
  stats.size_variance = std::max(var_s / n, 1e-6);
  stats.starvation_variance = std::max(var_m / n, 1e-6);
  return stats;
}

/// Starvation-compensated priority. Reduces to a positive multiple of H/s
/// when all starvation counters are equal; the max(m,1) floor keeps fresh
/// items from being zeroed out.
inline double starvation_priority(double weight, double size_bytes, std::uint32_t starvation,
                                  const PendingStats& stats) {
  const double m = std::max<double>(starvation, 1.0);
  return (weight * stats.size_variance / size_bytes) * (m / stats.starvation_variance);
}

struct Assignment {
  int frame = 0;
  VehicleId transmitter = 0;
  ObjectId object = 0;
  std::uint32_t size_bytes = 0;
};

struct FramePlan {
  std::vector<Assignment> assignments;  // execution order
  std::vector<std::uint64_t> used_bytes;

  bool scheduled(VehicleId tx, ObjectId obj) const {
    for (const auto& a : assignments) {
      if (a.transmitter == tx && a.object == obj) return true;
    }
    return false;
  }

  bool feasible(std::span<const std::uint64_t> budgets) const {
    if (used_bytes.size() > budgets.size()) return false;
    for (std::size_t n = 0; n < used_bytes.size(); ++n) {
      if (used_bytes[n] > budgets[n]) return false;
    }
    return true;
  }
};

namespace detail {

inline bool item_order(const ScheduleItem& a, const ScheduleItem& b) {
  return a.transmitter != b.transmitter ? a.transmitter < b.transmitter : a.object < b.object;
}

/// Appends zero-weight items to the plan's spare capacity, first fitting
/// frame in order. Called only when no rewarding item was left behind.
inline void pack_zero_weight(const SchedulerInput& input, const std::vector<bool>& scheduled,
                             FramePlan& plan) {
  std::vector<const ScheduleItem*> zeros;
  for (std::size_t i = 0; i < input.items.size(); ++i) {
    if (!scheduled[i]) zeros.push_back(&input.items[i]);
  }
  std::sort(zeros.begin(), zeros.end(),
            [](const ScheduleItem* a, const ScheduleItem* b) { return item_order(*a, *b); });
  for (const auto* it : zeros) {
    for (std::size_t n = 0; n < input.frame_budgets.size(); ++n) {
      if (plan.used_bytes[n] + it->size_bytes <= input.frame_budgets[n]) {
        plan.assignments.push_back({static_cast<int>(n), it->transmitter, it->object, it->size_bytes});
        plan.used_bytes[n] += it->size_bytes;
        break;
      }
    }
  }
  // Re-sort execution order by frame, keeping insertion order within a frame.
  std::stable_sort(plan.assignments.begin(), plan.assignments.end(),
                   [](const Assignment& a, const Assignment& b) { return a.frame < b.frame; });
}

}  // namespace detail

struct GreedyOptions {
  bool starvation_compensation = true;
};

/// Greedy max-weight scheduler. Per frame, repeatedly selects the pending
/// item with the highest normalized priority that fits the remaining budget;
/// a scheduled broadcast is optimistically treated as delivered when weights
/// are recomputed for later frames. Ties break on (transmitter, object) so
/// every domain member derives the identical plan.
inline FramePlan greedy_schedule(const SchedulerInput& input, const GreedyOptions& opts = {}) {
  const std::size_t n_items = input.items.size();
  FramePlan plan;
  plan.used_bytes.assign(input.frame_budgets.size(), 0);

  std::vector<bool> scheduled(n_items, false);
  // Working copy of the reception flags for optimistic planning updates.
  std::vector<std::vector<bool>> h(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    h[i].reserve(input.items[i].receivers.size());
    for (const auto& r : input.items[i].receivers) h[i].push_back(r.received);
  }

  const auto weight_of = [&](std::size_t i) {
    double w = 0.0;
    const auto& rs = input.items[i].receivers;
    for (std::size_t j = 0; j < rs.size(); ++j) {
      if (!h[i][j]) w += rs[j].reward;
    }
    return w;
  };

  for (std::size_t n = 0; n < input.frame_budgets.size(); ++n) {
    while (true) {
      std::vector<const ScheduleItem*> pending;
      std::vector<std::size_t> pending_idx;
      for (std::size_t i = 0; i < n_items; ++i) {
        if (!scheduled[i] && weight_of(i) > 0.0) {
          pending.push_back(&input.items[i]);
          pending_idx.push_back(i);
        }
      }
      if (pending.empty()) break;
      const PendingStats stats = pending_stats(pending);

      const std::uint64_t remaining = input.frame_budgets[n] - plan.used_bytes[n];
      std::optional<std::size_t> best;
      double best_priority = -1.0;
      for (std::size_t k = 0; k < pending.size(); ++k) {
        const ScheduleItem& it = *pending[k];
        if (it.size_bytes > remaining) continue;  // does not fit; keep scanning
        const double w = weight_of(pending_idx[k]);
        const double priority = opts.starvation_compensation
                                    ? starvation_priority(w, it.size_bytes, it.starvation, stats)
                                    : w / it.size_bytes;
        if (!best || priority > best_priority ||
            (priority == best_priority && detail::item_order(it, input.items[*best]))) {
          best = pending_idx[k];
          best_priority = priority;
        }
      }
      if (!best) break;  // nothing pending fits this frame

      const ScheduleItem& it = input.items[*best];
      plan.assignments.push_back({static_cast<int>(n), it.transmitter, it.object, it.size_bytes});
      plan.used_bytes[n] += it.size_bytes;
      scheduled[*best] = true;
    }
    // Frame filled: optimistic reception update for everything scheduled.
    for (std::size_t i = 0; i < n_items; ++i) {
      if (scheduled[i]) std::fill(h[i].begin(), h[i].end(), true);
    }
  }

  bool rewarding_left = false;
  for (std::size_t i = 0; i < n_items; ++i) {
    if (!scheduled[i] && weight_of(i) > 0.0) rewarding_left = true;
  }
  if (!rewarding_left) detail::pack_zero_weight(input, scheduled, plan);
  return plan;
}

struct KnapsackItem {
  double value = 0.0;
  std::uint64_t size = 0;
};

struct KnapsackSolution {
  std::vector<std::size_t> selected;  // indices into the item list
  double value = 0.0;
};

/// Exact 0/1 knapsack via dynamic programming over sizes quantized to
/// `resolution` bytes (quantized up, so the byte budget is never exceeded).
inline KnapsackSolution knapsack_exact(std::span<const KnapsackItem> items, std::uint64_t budget,
                                       std::uint64_t resolution = 64) {
  KnapsackSolution sol;
  if (budget == 0 || items.empty() || resolution == 0) return sol;
  const std::size_t n = items.size();
  const std::uint64_t cap = budget / resolution;
  if (cap == 0) return sol;

  std::vector<std::uint64_t> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = (items[i].size + resolution - 1) / resolution;

  std::vector<std::vector<double>> table(n + 1, std::vector<double>(cap + 1, 0.0));
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::uint64_t c = 0; c <= cap; ++c) {
      table[i][c] = table[i - 1][c];
      if (w[i - 1] <= c) {
        table[i][c] = std::max(table[i][c], table[i - 1][c - w[i - 1]] + items[i - 1].value);
      }
    }
  }
  sol.value = table[n][cap];

  std::uint64_t c = cap;
  for (std::size_t i = n; i > 0; --i) {
    if (table[i][c] != table[i - 1][c]) {
      sol.selected.push_back(i - 1);
      c -= w[i - 1];
    }
  }
  std::reverse(sol.selected.begin(), sol.selected.end());
  return sol;
}

/// (1-eps)-approximate 0/1 knapsack: profits scaled to integers, then an
/// exact min-size DP over the scaled profit domain. Polynomial in items and
/// 1/eps.
inline KnapsackSolution fptas_knapsack(std::span<const KnapsackItem> items, std::uint64_t budget,
                                       double eps) {
  if (eps <= 0.0 || eps >= 1.0) throw std::invalid_argument("fptas: eps must be in (0,1)");
  KnapsackSolution sol;
  const std::size_t n = items.size();
  if (n == 0 || budget == 0) return sol;

  double max_value = 0.0;
  for (const auto& it : items) {
    if (it.size <= budget) max_value = std::max(max_value, it.value);
  }
  if (max_value <= 0.0) return sol;

  const double scale = eps * max_value / static_cast<double>(n);
  std::vector<std::uint64_t> profit(n, 0);
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    profit[i] = static_cast<std::uint64_t>(items[i].value / scale);
    total += profit[i];
  }

  constexpr std::uint64_t kInfSize = std::numeric_limits<std::uint64_t>::max();
  std::vector<std::uint64_t> min_size(total + 1, kInfSize);
  min_size[0] = 0;
  std::vector<std::vector<bool>> take(n, std::vector<bool>(total + 1, false));
  for (std::size_t i = 0; i < n; ++i) {
    if (items[i].size > budget) continue;
    for (std::uint64_t q = total; q >= profit[i]; --q) {
      const std::uint64_t base = min_size[q - profit[i]];
      if (base == kInfSize) continue;
      const std::uint64_t cand = base + items[i].size;
      if (cand < min_size[q]) {
        min_size[q] = cand;
        take[i][q] = true;
      }
      if (profit[i] == 0) break;  // q is unsigned; avoid wraparound
    }
  }

  std::uint64_t best_q = 0;
  for (std::uint64_t q = 0; q <= total; ++q) {
    if (min_size[q] <= budget) best_q = q;
  }
  std::uint64_t q = best_q;
  for (std::size_t i = n; i > 0; --i) {
    if (take[i - 1][q]) {
      sol.selected.push_back(i - 1);
      sol.value += items[i - 1].value;
      q -= profit[i - 1];
    }
  }
  std::reverse(sol.selected.begin(), sol.selected.end());
  return sol;
}

namespace detail {

enum class PerFrameSolver { ExactDp, Fptas };

/// Sequential per-frame selection with optimistic reception updates, shared
/// by the exact-knapsack baseline and the FPTAS scheduler.
inline FramePlan per_frame_schedule(const SchedulerInput& input, PerFrameSolver solver,
                                    std::uint64_t resolution, double eps) {
  const std::size_t n_items = input.items.size();
  FramePlan plan;
  plan.used_bytes.assign(input.frame_budgets.size(), 0);
  std::vector<bool> scheduled(n_items, false);

  for (std::size_t n = 0; n < input.frame_budgets.size(); ++n) {
    std::vector<std::size_t> pending;
    std::vector<KnapsackItem> kitems;
    for (std::size_t i = 0; i < n_items; ++i) {
      if (scheduled[i]) continue;
      const double w = object_weight(input.items[i]);
      if (w <= 0.0) continue;
      pending.push_back(i);
      kitems.push_back({w, input.items[i].size_bytes});
    }
    if (pending.empty()) break;

    const KnapsackSolution sol = solver == PerFrameSolver::ExactDp
                                     ? knapsack_exact(kitems, input.frame_budgets[n], resolution)
                                     : fptas_knapsack(kitems, input.frame_budgets[n], eps);

    // Execute higher normalized reward first within the frame.
    std::vector<std::size_t> chosen;
    for (const std::size_t k : sol.selected) chosen.push_back(pending[k]);
    std::sort(chosen.begin(), chosen.end(), [&](std::size_t a, std::size_t b) {
      const double da = object_weight(input.items[a]) / input.items[a].size_bytes;
      const double db = object_weight(input.items[b]) / input.items[b].size_bytes;
      if (da != db) return da > db;
      return item_order(input.items[a], input.items[b]);
    });
    for (const std::size_t i : chosen) {
      const auto& it = input.items[i];
      plan.assignments.push_back({static_cast<int>(n), it.transmitter, it.object, it.size_bytes});
      plan.used_bytes[n] += it.size_bytes;
      scheduled[i] = true;
    }
  }

  bool rewarding_left = false;
  for (std::size_t i = 0; i < n_items; ++i) {
    if (!scheduled[i] && object_weight(input.items[i]) > 0.0) rewarding_left = true;
  }
  if (!rewarding_left) pack_zero_weight(input, scheduled, plan);
  return plan;
}

}  // namespace detail

/// Per-frame exact knapsack applied sequentially ("optimal" baseline).
inline FramePlan knapsack_schedule(const SchedulerInput& input, std::uint64_t resolution = 64) {
  return detail::per_frame_schedule(input, detail::PerFrameSolver::ExactDp, resolution, 0.1);
}

inline FramePlan fptas_schedule(const SchedulerInput& input, double eps = 0.1) {
  return detail::per_frame_schedule(input, detail::PerFrameSolver::Fptas, 64, eps);
}

/// Relevance-blind round-robin baseline. Serves vehicles in ascending id
/// order, one object per visit in extraction order, and remembers which
/// vehicle to serve first next interval.
class AgnosticScheduler {
 public:
  FramePlan schedule(const SchedulerInput& input) {
    FramePlan plan;
    plan.used_bytes.assign(input.frame_budgets.size(), 0);

    std::map<VehicleId, std::vector<std::size_t>> queues;
    for (std::size_t i = 0; i < input.items.size(); ++i) {
      queues[input.items[i].transmitter].push_back(i);
    }
    if (queues.empty()) return plan;

    std::vector<VehicleId> order;
    for (const auto& [id, q] : queues) order.push_back(id);
    std::size_t start = 0;
    while (start < order.size() && order[start] < cursor_) ++start;
    if (start == order.size()) start = 0;

    std::vector<std::size_t> heads(order.size(), 0);
    std::optional<VehicleId> first_unserved;
    bool progressed = true;
    std::size_t last_served = start;
    while (progressed) {
      progressed = false;
      for (std::size_t k = 0; k < order.size(); ++k) {
        const std::size_t vi = (start + k) % order.size();
        auto& queue = queues[order[vi]];
        if (heads[vi] >= queue.size()) continue;
        const auto& item = input.items[queue[heads[vi]]];
        ++heads[vi];
        progressed = true;
        bool placed = false;
        for (std::size_t n = 0; n < input.frame_budgets.size(); ++n) {
          if (plan.used_bytes[n] + item.size_bytes <= input.frame_budgets[n]) {
            plan.assignments.push_back(
                {static_cast<int>(n), item.transmitter, item.object, item.size_bytes});
            plan.used_bytes[n] += item.size_bytes;
            placed = true;
            last_served = vi;
            break;
          }
        }
        if (!placed && !first_unserved) first_unserved = order[vi];
      }
    }
    cursor_ = first_unserved ? *first_unserved : order[(last_served + 1) % order.size()];
    std::stable_sort(plan.assignments.begin(), plan.assignments.end(),
                     [](const Assignment& a, const Assignment& b) { return a.frame < b.frame; });
    return plan;
  }

  VehicleId cursor() const { return cursor_; }

 private:
  VehicleId cursor_ = 0;
};

/// Per-link delivery probabilities; p[i][i] = 1.
struct ChannelMatrix {
  std::vector<VehicleId> ids;  // ascending
  std::vector<double> p;       // row-major, ids.size()^2

  static ChannelMatrix uniform(std::vector<VehicleId> ids_in, double prob) {
    ChannelMatrix m;
    m.ids = std::move(ids_in);
    std::sort(m.ids.begin(), m.ids.end());
    const std::size_t n = m.ids.size();
    m.p.assign(n * n, prob);
    for (std::size_t i = 0; i < n; ++i) m.p[i * n + i] = 1.0;
    return m;
  }

  std::size_t index_of(VehicleId id) const {
    const auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) throw std::out_of_range("ChannelMatrix: unknown vehicle");
    return static_cast<std::size_t>(it - ids.begin());
  }

  double get(VehicleId from, VehicleId to) const {
    return p[index_of(from) * ids.size() + index_of(to)];
  }

  void set(VehicleId from, VehicleId to, double prob) {
    p[index_of(from) * ids.size() + index_of(to)] = prob;
  }
};

struct MdpResult {
  double value = 0.0;
  std::vector<std::size_t> first_action;  // item indices to transmit in frame 0
};

/// Exact finite-horizon value iteration over reception states. Exponential in
/// (items x receivers), so it refuses anything beyond oracle scale.
inline MdpResult mdp_optimal(const SchedulerInput& input, const ChannelMatrix& channel,
                             std::size_t horizon) {
  if (input.peers.size() > 3 || input.items.size() > 4 || horizon > 3) {
    throw scale_error("mdp_optimal: instance exceeds the tractable oracle scale");
  }
  if (horizon > input.frame_budgets.size()) {
    throw std::invalid_argument("mdp_optimal: horizon exceeds frame budgets");
  }
  const std::size_t n_items = input.items.size();

  struct Pair {
    std::size_t item;
    std::size_t slot;  // index within the item's receiver list
    double reward;
    double prob;
  };
  std::vector<Pair> pairs;
  std::vector<std::vector<std::size_t>> item_pairs(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    for (std::size_t s = 0; s < input.items[i].receivers.size(); ++s) {
      const auto& r = input.items[i].receivers[s];
      item_pairs[i].push_back(pairs.size());
      pairs.push_back({i, s, r.reward,
                       channel.get(input.items[i].transmitter, r.receiver)});
    }
  }
  if (pairs.size() > 16) throw scale_error("mdp_optimal: too many (item, receiver) pairs");

  std::uint32_t initial = 0;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (input.items[pairs[k].item].receivers[pairs[k].slot].received) initial |= (1u << k);
  }

  // All budget-feasible actions (subsets of items), shared across frames with
  // equal budgets; recomputed per frame otherwise.
  const auto feasible_actions = [&](std::uint64_t budget) {
    std::vector<std::uint32_t> actions;
    for (std::uint32_t a = 0; a < (1u << n_items); ++a) {
      std::uint64_t used = 0;
      for (std::size_t i = 0; i < n_items; ++i) {
        if (a & (1u << i)) used += input.items[i].size_bytes;
      }
      if (used <= budget) actions.push_back(a);
    }
    return actions;
  };

  std::vector<std::map<std::uint32_t, std::pair<double, std::uint32_t>>> memo(horizon);

  const auto solve = [&](auto&& self, std::uint32_t state, std::size_t n) -> double {
    if (n == horizon) return 0.0;
    if (const auto it = memo[n].find(state); it != memo[n].end()) return it->second.first;

    double best = -1.0;
    std::uint32_t best_action = 0;
    for (const std::uint32_t action : feasible_actions(input.frame_budgets[n])) {
      // Pairs that can flip under this action.
      std::vector<std::size_t> open;
      for (std::size_t i = 0; i < n_items; ++i) {
        if (!(action & (1u << i))) continue;
        for (const std::size_t k : item_pairs[i]) {
          if (!(state & (1u << k))) open.push_back(k);
        }
      }
      double expect = 0.0;
      const std::uint32_t outcomes = 1u << open.size();
      for (std::uint32_t o = 0; o < outcomes; ++o) {
        double prob = 1.0;
        double reward = 0.0;
        std::uint32_t next = state;
        for (std::size_t b = 0; b < open.size(); ++b) {
          const Pair& pr = pairs[open[b]];
          if (o & (1u << b)) {
            prob *= pr.prob;
            reward += pr.reward;
            next |= (1u << open[b]);
          } else {
            prob *= 1.0 - pr.prob;
          }
        }
        if (prob > 0.0) expect += prob * (reward + self(self, next, n + 1));
      }
      if (expect > best) {
        best = expect;
        best_action = action;
      }
    }
    memo[n][state] = {best, best_action};
    return best;
  };

  MdpResult result;
  result.value = solve(solve, initial, 0);
  const std::uint32_t action = memo[0][initial].second;
  for (std::size_t i = 0; i < n_items; ++i) {
    if (action & (1u << i)) result.first_action.push_back(i);
  }
  return result;
}

}  // namespace coopsim

#pragma once

// Platoon formation on the controlled lanes: one vehicle is enrolled per
// lane per step, adjacent platoons heading the same way merge up to the size
// cap, and platoons disband once they have left the intersection behind.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "vtlev/core_model.hpp"
#include "vtlev/kinematics.hpp"

namespace vtlev {

enum class DisbandReason : std::uint8_t { Merged, LeftZone, RouteDiverged };

inline std::string_view to_string(DisbandReason r) {
  switch (r) {
    case DisbandReason::Merged: return "Merged";
    case DisbandReason::LeftZone: return "LeftZone";
    case DisbandReason::RouteDiverged: return "RouteDiverged";
  }
  return "?";
}

struct PlatoonParams {
  int max_size = 12;
  double max_length = 35.0;  // m, summed vehicle lengths
  double length_tolerance = 1.0;
  double merge_dist = 10.0;          // m, front platoon's tail to back leader
  double downstream_horizon = 40.0;  // m past the box before LeftZone
  double gap = 1.0;                  // m, member spacing handed to followers
};

struct Platoon {
  PlatoonId id = 0;
  LaneId lane = 0;
  std::vector<VehicleId> members;  // front to back
  double target_speed = 0.0;
  double gap = 1.0;
  bool contains_ev = false;
  bool eligible_for_merging = true;
  std::optional<DisbandReason> disband_reason;

  [[nodiscard]] VehicleId leader() const { return members.front(); }
  [[nodiscard]] VehicleId tail() const { return members.back(); }
  [[nodiscard]] int size() const { return static_cast<int>(members.size()); }
  [[nodiscard]] bool active() const { return !disband_reason.has_value(); }
};

/// Sum of member lengths.
inline double vehicle_length_sum(const Platoon& p, const VehicleTable& vehicles) {
  double total = 0.0;
  for (VehicleId id : p.members) total += vehicles.at(id).length;
  return total;
}

/// Length the platoon occupies when its members keep the commanded gap.
inline double nominal_length(const Platoon& p, const VehicleTable& vehicles) {
  return vehicle_length_sum(p, vehicles) + (p.size() - 1) * p.gap;
}

/// Leader front to tail rear, as currently on the road.
inline double physical_length(const Platoon& p, const VehicleTable& vehicles) {
  return vehicles.at(p.leader()).pos - vehicles.at(p.tail()).rear();
}

inline Platoon add_vehicle(PlatoonId id, LaneId lane, Vehicle& v,
                           double gap = 1.0) {
  if (v.platoon)
    throw ContractError(fmt::format("vehicle {} already in platoon {}", v.id,
                                    *v.platoon));
  Platoon p;
  p.id = id;
  p.lane = lane;
  p.members = {v.id};
  p.gap = gap;
  p.target_speed = v.speed;
  p.contains_ev = v.is_emergency();
  v.platoon = id;
  return p;
}

/// Facts about the surroundings a merge decision needs.
struct MergeContext {
  IntersectionGeometry geometry;
  double b_max = 4.5;
  double dt = 0.1;
  bool preempting = false;  // EV platoons stay closed while preemption runs
};

struct MergeResult {
  std::optional<Platoon> merged;  // empty == NotEligible

  [[nodiscard]] bool is_merged() const { return merged.has_value(); }
};

inline bool same_route(const Platoon& a, const Platoon& b,
                       const VehicleTable& vehicles) {
  const Movement m = vehicles.at(a.leader()).movement;
  auto matches = [&](VehicleId id) { return vehicles.at(id).movement == m; };
  return std::all_of(a.members.begin(), a.members.end(), matches) &&
         std::all_of(b.members.begin(), b.members.end(), matches);
}

/// Merges `back` into `front` when both head the same way, sit within
/// merge distance and fit under the caps. Both inputs are disbanded on
/// success; otherwise `back` loses merge eligibility for this step.
///
/// A merge also requires the pair to be wholly upstream of the stop line,
/// with the front leader still able to stop there, so a merged platoon
/// never needs a new reservation it cannot honour.
inline MergeResult try_merge(Platoon& front, Platoon& back,
                             const VehicleTable& vehicles,
                             const PlatoonParams& params,
                             const MergeContext& ctx, PlatoonId new_id) {
  if (front.lane != back.lane) {
    back.eligible_for_merging = false;
    return {};
  }
  const Vehicle& tail = vehicles.at(front.tail());
  const Vehicle& head = vehicles.at(back.leader());
  const double gap = tail.rear() - head.pos;
  if (gap < 0.0)
    throw ContractError(fmt::format("platoons {} and {} overlap", front.id, back.id));

  const Vehicle& front_leader = vehicles.at(front.leader());
  const double d_front = distance_to_stop_line(front_leader, ctx.geometry);
  const double vehicle_len =
      vehicle_length_sum(front, vehicles) + vehicle_length_sum(back, vehicles);

  const bool eligible =
      back.eligible_for_merging && same_route(front, back, vehicles) &&
      gap <= params.merge_dist && front.size() + back.size() <= params.max_size &&
      vehicle_len <= params.max_length + params.length_tolerance &&
      !(ctx.preempting && (front.contains_ev || back.contains_ev)) &&
      d_front >= 0.0 &&
      can_stop_within(d_front, front_leader.speed, ctx.b_max, ctx.dt);
  if (!eligible) {
    back.eligible_for_merging = false;
    return {};
  }

  Platoon merged;
  merged.id = new_id;
  merged.lane = front.lane;
  merged.members = front.members;
  merged.members.insert(merged.members.end(), back.members.begin(), back.members.end());
  merged.gap = front.gap;
  merged.target_speed = front.target_speed;
  merged.contains_ev = front.contains_ev || back.contains_ev;
  front.disband_reason = DisbandReason::Merged;
  back.disband_reason = DisbandReason::Merged;
  return {std::move(merged)};
}

/// Per-vehicle commands for one platoon: the leader gets the speed (or a
/// stop), every follower regulates its gap to the vehicle ahead.
inline std::vector<std::pair<VehicleId, MotionCommand>> apply_platoon_command(
    Platoon& p, double speed, double gap, double v_max, bool stop_at_line = false) {
  if (speed < 0.0 || speed > v_max + 1e-9)
    throw ContractError(fmt::format("platoon speed {} outside [0, {}]", speed, v_max));
  p.target_speed = speed;
  p.gap = gap;
  std::vector<std::pair<VehicleId, MotionCommand>> out;
  out.reserve(p.members.size());
  out.emplace_back(p.leader(), stop_at_line ? MotionCommand::stop_at_line()
                                            : MotionCommand::target_speed(speed));
  for (std::size_t i = 1; i < p.members.size(); ++i)
    out.emplace_back(p.members[i], MotionCommand::follow_leader(gap));
  return out;
}

/// Once every member is through the box the platoon survives only while its
/// members still share an exit and it is inside the tracking horizon.
inline std::optional<DisbandReason> disband_check(const Platoon& p,
                                                  const IntersectionGeometry& g,
                                                  const VehicleTable& vehicles,
                                                  const PlatoonParams& params) {
  for (VehicleId id : p.members)
    if (!rear_cleared_box(vehicles.at(id), g)) return std::nullopt;
  const Approach exit = vehicles.at(p.leader()).movement.exit();
  for (VehicleId id : p.members)
    if (vehicles.at(id).movement.exit() != exit) return DisbandReason::RouteDiverged;
  if (vehicles.at(p.tail()).rear() - g.box_end() > params.downstream_horizon)
    return DisbandReason::LeftZone;
  return std::nullopt;
}

struct PlatoonEvent {
  enum class Kind { Formed, Merged, Disbanded };
  std::int64_t tick = 0;
  Kind kind = Kind::Formed;
  PlatoonId platoon = 0;
  int size = 0;
  std::optional<DisbandReason> reason;
};

/// `tick,event{Formed|Merged|Disbanded},platoon_id,size,reason`
inline void write_platoon_event(std::ostream& os, const PlatoonEvent& e) {
  static constexpr std::string_view kNames[] = {"Formed", "Merged", "Disbanded"};
  os << fmt::format("{},{},{},{},{}\n", e.tick, kNames[static_cast<int>(e.kind)],
                    e.platoon, e.size, e.reason ? to_string(*e.reason) : "");
}

/// Owns every platoon of a run and performs the per-tick maintenance pass.
class PlatoonManager {
 public:
  explicit PlatoonManager(PlatoonParams params = {}) : params_(params) {}

  [[nodiscard]] const PlatoonParams& params() const { return params_; }
  [[nodiscard]] const std::map<PlatoonId, Platoon>& platoons() const { return active_; }
  [[nodiscard]] const Platoon* find(PlatoonId id) const {
    auto it = active_.find(id);
    return it == active_.end() ? nullptr : &it->second;
  }
  Platoon* find(PlatoonId id) {
    auto it = active_.find(id);
    return it == active_.end() ? nullptr : &it->second;
  }
  [[nodiscard]] const std::vector<PlatoonEvent>& events() const { return events_; }
  [[nodiscard]] int max_size_observed() const { return max_size_; }
  [[nodiscard]] std::int64_t disbanded_count() const { return disbanded_; }
  [[nodiscard]] std::int64_t merged_mixed_movements() const { return mixed_merges_; }

  /// Active platoons of one lane, front first.
  [[nodiscard]] std::vector<const Platoon*> lane_platoons(LaneId lane,
                                                          const VehicleTable& vehicles) const {
    std::vector<const Platoon*> out;
    for (const auto& [id, p] : active_)
      if (p.lane == lane) out.push_back(&p);
    std::sort(out.begin(), out.end(), [&](const Platoon* a, const Platoon* b) {
      return vehicles.at(a->leader()).pos > vehicles.at(b->leader()).pos;
    });
    return out;
  }

  /// One maintenance pass. `lanes` lists each lane's vehicles front first.
  void maintain(const std::vector<std::vector<VehicleId>>& lanes, VehicleTable& vehicles,
                const MergeContext& ctx, std::int64_t tick) {
    disband_finished(vehicles, ctx.geometry, tick);
    for (LaneId lane = 0; lane < static_cast<LaneId>(lanes.size()); ++lane) {
      enroll_one(lane, lanes[lane], vehicles, ctx.geometry, tick);
      merge_one(lane, vehicles, ctx, tick);
    }
  }

  void clear_events() { events_.clear(); }

  /// Drops a departed vehicle that no platoon holds any more.
  void forget_vehicle(Vehicle& v) { v.platoon.reset(); }

 private:
  void log(std::int64_t tick, PlatoonEvent::Kind kind, const Platoon& p,
           std::optional<DisbandReason> reason = std::nullopt) {
    events_.push_back({tick, kind, p.id, p.size(), reason});
  }

  void disband(Platoon& p, DisbandReason reason, VehicleTable& vehicles, std::int64_t tick) {
    p.disband_reason = reason;
    for (VehicleId id : p.members) vehicles.at(id).platoon.reset();
    log(tick, PlatoonEvent::Kind::Disbanded, p, reason);
    ++disbanded_;
  }

  void disband_finished(VehicleTable& vehicles, const IntersectionGeometry& g,
                        std::int64_t tick) {
    for (auto it = active_.begin(); it != active_.end();) {
      if (auto reason = disband_check(it->second, g, vehicles, params_)) {
        disband(it->second, *reason, vehicles, tick);
        it = active_.erase(it);
      } else {
        ++it;
      }
    }
  }

  void enroll_one(LaneId lane, const std::vector<VehicleId>& order, VehicleTable& vehicles,
                  const IntersectionGeometry& g, std::int64_t tick) {
    for (VehicleId id : order) {
      Vehicle& v = vehicles.at(id);
      if (v.platoon || !inside_control_zone(v, g) || distance_to_stop_line(v, g) < 0.0)
        continue;
      Platoon p = add_vehicle(next_id_++, lane, v, params_.gap);
      log(tick, PlatoonEvent::Kind::Formed, p);
      max_size_ = std::max(max_size_, 1);
      active_.emplace(p.id, std::move(p));
      return;
    }
  }

  void merge_one(LaneId lane, VehicleTable& vehicles, const MergeContext& ctx,
                 std::int64_t tick) {
    auto order = lane_platoons(lane, vehicles);
    for (const Platoon* p : order) active_.at(p->id).eligible_for_merging = true;
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
      Platoon& front = active_.at(order[i]->id);
      Platoon& back = active_.at(order[i + 1]->id);
      MergeResult r = try_merge(front, back, vehicles, params_, ctx, next_id_);
      if (!r.is_merged()) continue;
      ++next_id_;
      Platoon merged = std::move(*r.merged);
      const Movement m = vehicles.at(merged.leader()).movement;
      for (VehicleId id : merged.members) {
        vehicles.at(id).platoon = merged.id;
        if (vehicles.at(id).movement != m) ++mixed_merges_;
      }
      log(tick, PlatoonEvent::Kind::Disbanded, front, DisbandReason::Merged);
      log(tick, PlatoonEvent::Kind::Disbanded, back, DisbandReason::Merged);
      log(tick, PlatoonEvent::Kind::Merged, merged);
      disbanded_ += 2;
      max_size_ = std::max(max_size_, merged.size());
      const PlatoonId front_id = front.id;
      const PlatoonId back_id = back.id;
      active_.erase(front_id);
      active_.erase(back_id);
      active_.emplace(merged.id, std::move(merged));
      return;  // one merge per lane per step
    }
  }

  PlatoonParams params_;
  std::map<PlatoonId, Platoon> active_;
  std::vector<PlatoonEvent> events_;
  PlatoonId next_id_ = 1;
  int max_size_ = 0;
  std::int64_t disbanded_ = 0;
  std::int64_t mixed_merges_ = 0;
};

}  // namespace vtlev

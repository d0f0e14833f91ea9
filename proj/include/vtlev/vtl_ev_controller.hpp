#pragma once

// Reservation-based intersection control with dynamic emergency-vehicle
// priority. Every platoon in range holds an exclusive time window for the
// conflict box; platoons are zipped EV-first, then by distance to the stop
// line, and each leader is given the speed that lands it on its window.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string_view>
#include <tuple>
#include <utility>
#include <variant>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "vtlev/comms.hpp"
#include "vtlev/controller.hpp"
#include "vtlev/core_model.hpp"
#include "vtlev/kinematics.hpp"
#include "vtlev/platooning.hpp"

namespace vtlev {

struct ControllerParams {
  double epsilon = 0.5;             // s between conflicting windows
  double control_period = 1.0;      // s between full scheduling rounds
  double revocation_horizon = 2.0;  // s; closer than this a window is kept
};

struct Reservation {
  PlatoonId platoon_id = 0;
  LaneId lane = 0;
  Movement movement;
  double window_start = 0.0;
  double window_end = 0.0;
  bool committed = false;
  // Planning by-products used to sequence platoons on the same lane.
  double line_speed = 0.0;    // predicted leader speed at the stop line
  double tail_at_line = 0.0;  // predicted time the tail passes the stop line
};

struct NormalMode {};

struct PreemptingMode {
  std::vector<std::pair<VehicleId, LaneId>> evs;  // detection order
};

struct ControllerState {
  std::variant<NormalMode, PreemptingMode> mode;
  std::map<PlatoonId, Reservation> schedule;
  std::set<PlatoonId> controlled;

  [[nodiscard]] bool preempting() const {
    return std::holds_alternative<PreemptingMode>(mode);
  }
  [[nodiscard]] const PreemptingMode* preemption() const {
    return std::get_if<PreemptingMode>(&mode);
  }
  /// During preemption only the EV lanes may hold new reservations.
  [[nodiscard]] bool lane_allowed(LaneId lane) const {
    const auto* pm = preemption();
    if (pm == nullptr) return true;
    return std::any_of(pm->evs.begin(), pm->evs.end(),
                       [&](const auto& e) { return e.second == lane; });
  }
};

struct ScheduleEvent {
  enum class Kind { Commit, Shift, Revoke, Complete };
  std::int64_t tick = 0;
  PlatoonId platoon = 0;
  LaneId lane = 0;
  double window_start = 0.0;
  double window_end = 0.0;
  Kind kind = Kind::Commit;
};

/// `tick,platoon_id,lane,window_start_s,window_end_s,event`
inline void write_schedule_event(std::ostream& os, const ScheduleEvent& e) {
  static constexpr std::string_view kNames[] = {"Commit", "Shift", "Revoke", "Complete"};
  os << fmt::format("{},{},{},{:.6f},{:.6f},{}\n", e.tick, e.platoon, e.lane,
                    e.window_start, e.window_end, kNames[static_cast<int>(e.kind)]);
}

using PlatoonTable = std::map<PlatoonId, Platoon>;

/// Everything the scheduling operations read besides the controller state.
struct PlanContext {
  const IntersectionGeometry& geometry;
  const KinematicsParams& kinematics;
  const ControllerParams& params;
  const VehicleTable& vehicles;
  const PlatoonTable& platoons;
  double dt = 0.1;
  std::int64_t tick = 0;
  std::vector<ScheduleEvent>* events = nullptr;

  [[nodiscard]] double now() const { return static_cast<double>(tick) * dt; }

  void emit(ScheduleEvent::Kind kind, const Reservation& r) const {
    if (events) events->push_back({tick, r.platoon_id, r.lane, r.window_start, r.window_end, kind});
  }
};

// ---------------------------------------------------------------------------
// Reserved time

/// Window for a platoon whose leader is `d` metres from the stop line, whose
/// length is `L`, crossing a box of length `B` at constant `v_cross`: it
/// opens when the leader reaches the line and closes once the tail has
/// cleared the box, plus the buffer.
inline std::pair<double, double> reserved_window(double d, double L, double B,
                                                 double v_cross, double now,
                                                 double epsilon) {
  if (!(v_cross > 0.0)) throw ContractError("reserved_window: v_cross must be > 0");
  const double start = now + std::max(d, 0.0) / v_cross;
  return {start, start + (L + B) / v_cross + epsilon};
}

inline Reservation reserved_duration(const Platoon& p, const VehicleTable& vehicles,
                                     double v_cross, const IntersectionGeometry& g,
                                     double now, double epsilon) {
  const Vehicle& leader = vehicles.at(p.leader());
  const auto [start, end] =
      reserved_window(distance_to_stop_line(leader, g), nominal_length(p, vehicles),
                      g.box_length, v_cross, now, epsilon);
  Reservation r;
  r.platoon_id = p.id;
  r.lane = p.lane;
  r.movement = leader.movement;
  r.window_start = start;
  r.window_end = end;
  r.line_speed = v_cross;
  r.tail_at_line = start + nominal_length(p, vehicles) / v_cross;
  return r;
}

// ---------------------------------------------------------------------------
// Registration

inline void add_platoon(ControllerState& st, const Platoon& p, const VehicleTable& vehicles,
                        const IntersectionGeometry& g) {
  if (st.controlled.contains(p.id))
    throw ContractError(fmt::format("platoon {} is already controlled", p.id));
  if (!inside_control_zone(vehicles.at(p.leader()), g))
    throw ContractError(fmt::format("platoon {} is outside the control radius", p.id));
  st.controlled.insert(p.id);
}

/// Drops platoons that disbanded or whose tail is through the box, releasing
/// their reservations. Returns the ids removed.
inline std::vector<PlatoonId> remove_uncontrolled(ControllerState& st, const PlanContext& c) {
  std::vector<PlatoonId> removed;
  for (auto it = st.controlled.begin(); it != st.controlled.end();) {
    const PlatoonId id = *it;
    auto p = c.platoons.find(id);
    const bool gone = p == c.platoons.end();
    const bool cleared = !gone && rear_cleared_box(c.vehicles.at(p->second.tail()), c.geometry);
    if (!gone && !cleared) {
      ++it;
      continue;
    }
    if (auto r = st.schedule.find(id); r != st.schedule.end()) {
      c.emit(cleared ? ScheduleEvent::Kind::Complete : ScheduleEvent::Kind::Revoke, r->second);
      st.schedule.erase(r);
    }
    removed.push_back(id);
    it = st.controlled.erase(it);
  }
  return removed;
}

// ---------------------------------------------------------------------------
// Zip ordering

/// EV platoons first, then everything else by ascending leader distance to
/// the stop line; ties by lane then platoon id.
inline std::vector<const Platoon*> zip_order(std::vector<const Platoon*> pending,
                                             const VehicleTable& vehicles,
                                             const IntersectionGeometry& g) {
  auto key = [&](const Platoon* p) {
    return std::tuple{!p->contains_ev, distance_to_stop_line(vehicles.at(p->leader()), g),
                      p->lane, p->id};
  };
  std::stable_sort(pending.begin(), pending.end(),
                   [&](const Platoon* a, const Platoon* b) { return key(a) < key(b); });
  return pending;
}

// ---------------------------------------------------------------------------
// Scheduling

namespace detail {

struct WindowPlan {
  double start = 0.0;
  double end = 0.0;
  double line_speed = 0.0;
  double tail_at_line = 0.0;
};

/// Window for a leader `d` out at speed `v0` if it is told to reach the line
/// at `start`. The leader either arrives flat out, cruises and ramps up late
/// (see plan_arrival), or, when even creeping would be early, stops at the
/// line and starts from rest.
inline WindowPlan plan_window(double d, double v0, double length, double start,
                              const PlanContext& c) {
  const DynamicsLimits& lim = c.kinematics.limits;
  const double t_avail = start - c.now();
  const double t_free = travel_time(d, v0, lim.a_max, lim.v_max);
  double v_line = v0;
  if (d > 0.0) {
    if (t_avail <= t_free + c.dt)
      v_line = std::min(lim.v_max, std::sqrt(v0 * v0 + 2.0 * lim.a_max * d));
    else
      v_line = plan_arrival(d, t_avail, v0, lim, c.kinematics.creep_speed).line_speed;
  }
  WindowPlan w;
  w.start = start;
  w.line_speed = v_line;
  w.end = start + travel_time(length + c.geometry.box_length, v_line, lim.a_max, lim.v_max) +
          c.dt + c.params.epsilon;
  w.tail_at_line = start + travel_time(length, v_line, lim.a_max, lim.v_max);
  return w;
}

inline double earliest_start(const Platoon& p, const PlanContext& c) {
  const Vehicle& leader = c.vehicles.at(p.leader());
  const double d = std::max(distance_to_stop_line(leader, c.geometry), 0.0);
  const DynamicsLimits& lim = c.kinematics.limits;
  const Reservation nominal =
      reserved_duration(p, c.vehicles, lim.v_max, c.geometry, c.now(), c.params.epsilon);
  const double t_free = travel_time(d, leader.speed, lim.a_max, lim.v_max);
  return std::max(nominal.window_start, c.now() + t_free + (d > 0.0 ? c.dt : 0.0));
}

/// Headway a platoon keeps behind the tail of the one ahead on its lane.
inline double same_lane_headway(const Reservation& ahead, const KinematicsParams& k) {
  return k.individual_headway + k.individual_min_gap / std::max(ahead.line_speed, 1.0);
}

inline bool separated(const WindowPlan& w, const Reservation& r, double eps) {
  return w.start >= r.window_end + eps - 1e-9 || w.end + eps <= r.window_start + 1e-9;
}

/// A committed window is kept as is once its leader is in the box or
/// closer to the stop line than the revocation horizon at current speed.
inline bool is_locked(const Platoon& p, const PlanContext& c) {
  const Vehicle& leader = c.vehicles.at(p.leader());
  const double d = distance_to_stop_line(leader, c.geometry);
  return d < 0.0 || d < c.params.revocation_horizon * leader.speed;
}

/// Earliest sound window for `p` given what is already committed.
inline Reservation fit_window(const Platoon& p, const std::map<PlatoonId, Reservation>& committed,
                              const Reservation* ahead, const PlanContext& c) {
  const Vehicle& leader = c.vehicles.at(p.leader());
  const double d = std::max(distance_to_stop_line(leader, c.geometry), 0.0);
  const double length = std::max(nominal_length(p, c.vehicles), physical_length(p, c.vehicles));
  const double eps = c.params.epsilon;

  double start = earliest_start(p, c);
  if (ahead != nullptr)
    start = std::max(start, ahead->tail_at_line + same_lane_headway(*ahead, c.kinematics));

  std::vector<const Reservation*> conflicts;
  for (const auto& [id, r] : committed)
    if (movements_conflict(r.movement, leader.movement)) conflicts.push_back(&r);

  std::vector<double> candidates{start};
  for (const Reservation* r : conflicts)
    if (r->window_end + eps > start) candidates.push_back(r->window_end + eps);
  std::sort(candidates.begin(), candidates.end());

  WindowPlan chosen;
  for (double cand : candidates) {
    WindowPlan w = plan_window(d, leader.speed, length, cand, c);
    if (std::all_of(conflicts.begin(), conflicts.end(),
                    [&](const Reservation* r) { return separated(w, *r, eps); })) {
      chosen = w;
      break;
    }
  }

  Reservation r;
  r.platoon_id = p.id;
  r.lane = p.lane;
  r.movement = leader.movement;
  r.window_start = chosen.start;
  r.window_end = chosen.end;
  r.committed = true;
  r.line_speed = chosen.line_speed;
  r.tail_at_line = chosen.tail_at_line;
  return r;
}

/// Pushes a locked window's end out if its platoon is running late.
inline bool extend_if_late(Reservation& r, const Platoon& p, const PlanContext& c) {
  const Vehicle& tail = c.vehicles.at(p.tail());
  const DynamicsLimits& lim = c.kinematics.limits;
  const double to_clear = c.geometry.box_end() - tail.rear();
  const double end = c.now() + travel_time(to_clear, tail.speed, lim.a_max, lim.v_max) + c.dt +
                     c.params.epsilon;
  const double to_line = c.geometry.approach_length - tail.rear();
  r.tail_at_line = to_line <= 0.0
                       ? c.now()
                       : std::max(r.tail_at_line,
                                  c.now() + travel_time(to_line, tail.speed, lim.a_max, lim.v_max));
  if (end > r.window_end + 1e-9) {
    r.window_end = end;
    return true;
  }
  return false;
}

}  // namespace detail

/// Walks `ordered` and commits each platoon at its earliest window that keeps
/// conflicting windows apart by epsilon. Windows already locked stay put.
/// Platoons on the same lane are placed front to back since they cannot
/// overtake. During preemption, platoons off the EV lanes are left
/// uncommitted.
inline void commit_schedule(ControllerState& st, const std::vector<const Platoon*>& ordered,
                            const PlanContext& c) {
  std::map<PlatoonId, Reservation> previous;
  std::map<PlatoonId, Reservation> placed;
  for (auto& [id, r] : st.schedule) {
    auto p = c.platoons.find(id);
    if (p != c.platoons.end() && detail::is_locked(p->second, c)) {
      if (detail::extend_if_late(r, p->second, c)) c.emit(ScheduleEvent::Kind::Shift, r);
      placed.emplace(id, r);
    } else {
      previous.emplace(id, r);
    }
  }

  // Lane order of the candidates, front first.
  std::map<LaneId, std::vector<const Platoon*>> by_lane;
  for (const Platoon* p : ordered) by_lane[p->lane].push_back(p);
  for (auto& [lane, list] : by_lane)
    std::sort(list.begin(), list.end(), [&](const Platoon* a, const Platoon* b) {
      return c.vehicles.at(a->leader()).pos > c.vehicles.at(b->leader()).pos;
    });

  auto nearest_ahead = [&](const Platoon& p) -> const Reservation* {
    const double my_pos = c.vehicles.at(p.leader()).pos;
    const Reservation* best = nullptr;
    double best_pos = 0.0;
    for (const auto& [id, r] : placed) {
      if (r.lane != p.lane || id == p.id) continue;
      auto q = c.platoons.find(id);
      if (q == c.platoons.end()) continue;
      const double pos = c.vehicles.at(q->second.leader()).pos;
      if (pos > my_pos && (best == nullptr || pos < best_pos)) {
        best = &r;
        best_pos = pos;
      }
    }
    return best;
  };

  std::set<PlatoonId> visited;
  std::function<void(const Platoon*)> place = [&](const Platoon* p) {
    if (placed.contains(p->id) || visited.contains(p->id)) return;
    visited.insert(p->id);
    if (!st.lane_allowed(p->lane)) return;
    for (const Platoon* q : by_lane[p->lane]) {
      if (q == p) break;
      place(q);
    }
    Reservation r = detail::fit_window(*p, placed, nearest_ahead(*p), c);
    auto prev = previous.find(p->id);
    if (prev == previous.end()) {
      c.emit(ScheduleEvent::Kind::Commit, r);
    } else if (std::abs(prev->second.window_start - r.window_start) > 1e-6 ||
               std::abs(prev->second.window_end - r.window_end) > 1e-6) {
      c.emit(ScheduleEvent::Kind::Shift, r);
    }
    placed.emplace(p->id, r);
  };
  // Platoons that already hold a window are re-fitted first, in their
  // current window order: a round may pull a window earlier but never lets
  // a newcomer jump ahead of it. Newcomers follow in zip order.
  std::vector<std::pair<double, const Platoon*>> holders;
  for (const Platoon* p : ordered)
    if (auto it = previous.find(p->id); it != previous.end())
      holders.emplace_back(it->second.window_start, p);
  std::stable_sort(holders.begin(), holders.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [start, p] : holders) place(p);
  for (const Platoon* p : ordered) place(p);

  for (const auto& [id, r] : previous)
    if (!placed.contains(id)) c.emit(ScheduleEvent::Kind::Revoke, r);
  st.schedule = std::move(placed);
}

/// Speed command for a platoon leader holding reservation `r`.
inline MotionCommand set_new_speed(const Platoon& p, const Reservation& r, double now,
                                   const VehicleTable& vehicles, const IntersectionGeometry& g,
                                   const KinematicsParams& k) {
  const double v_max = k.limits.v_max;
  const double d = distance_to_stop_line(vehicles.at(p.leader()), g);
  if (d < 0.0 || now >= r.window_start) return MotionCommand::target_speed(v_max);
  const double t = r.window_start - now;
  const double v0 = vehicles.at(p.leader()).speed;
  const ArrivalPlan a = plan_arrival(d, t, v0, k.limits, k.creep_speed);
  if (a.stop) return MotionCommand::stop_at_line();
  // Re-planned every tick, so the switch into the final ramp has to be
  // explicit or the leader would keep cruising.
  const double ramp = (a.line_speed - v0) / k.limits.a_max;
  if (t <= ramp + 1e-9) return MotionCommand::target_speed(a.line_speed);
  return MotionCommand::target_speed(a.cruise);
}

// ---------------------------------------------------------------------------
// Preemption

/// Switches to (or extends) preemption for the EV in `ev_platoon`, revokes
/// every revocable reservation off the EV lanes and schedules the EV lane.
inline void on_ev_detected(ControllerState& st, VehicleId ev, const Platoon& ev_platoon,
                           const PlanContext& c) {
  if (auto* pm = std::get_if<PreemptingMode>(&st.mode)) {
    pm->evs.emplace_back(ev, ev_platoon.lane);
  } else {
    st.mode = PreemptingMode{{{ev, ev_platoon.lane}}};
  }
  for (auto it = st.schedule.begin(); it != st.schedule.end();) {
    auto p = c.platoons.find(it->first);
    const bool locked = p != c.platoons.end() && detail::is_locked(p->second, c);
    if (!st.lane_allowed(it->second.lane) && !locked) {
      c.emit(ScheduleEvent::Kind::Revoke, it->second);
      it = st.schedule.erase(it);
    } else {
      ++it;
    }
  }
  std::vector<const Platoon*> pending;
  for (PlatoonId id : st.controlled)
    if (auto p = c.platoons.find(id); p != c.platoons.end()) pending.push_back(&p->second);
  commit_schedule(st, zip_order(std::move(pending), c.vehicles, c.geometry), c);
}

/// Ends preemption for the acknowledging EV. Returns false (and logs) for an
/// ack that matches no outstanding EV.
inline bool on_ack(ControllerState& st, const Ack& ack) {
  auto* pm = std::get_if<PreemptingMode>(&st.mode);
  if (pm == nullptr) {
    spdlog::warn("ack from EV {} while not preempting; ignored", ack.sender);
    return false;
  }
  auto it = std::find_if(pm->evs.begin(), pm->evs.end(),
                         [&](const auto& e) { return e.first == ack.sender; });
  if (it == pm->evs.end()) {
    spdlog::warn("ack from unknown EV {}; ignored", ack.sender);
    return false;
  }
  pm->evs.erase(it);
  if (pm->evs.empty()) st.mode = NormalMode{};
  return true;
}

/// Checks that no two committed conflicting windows overlap or sit closer
/// than epsilon. Windows stretched after locking are exempt from the buffer
/// but still must not overlap.
inline bool schedule_sound(const ControllerState& st, double epsilon) {
  std::vector<const Reservation*> rs;
  for (const auto& [id, r] : st.schedule)
    if (r.committed) rs.push_back(&r);
  for (std::size_t i = 0; i < rs.size(); ++i)
    for (std::size_t j = i + 1; j < rs.size(); ++j) {
      const Reservation& a = *rs[i];
      const Reservation& b = *rs[j];
      if (!movements_conflict(a.movement, b.movement)) continue;
      const bool apart = a.window_end + epsilon <= b.window_start + 1e-9 ||
                         b.window_end + epsilon <= a.window_start + 1e-9;
      if (!apart) return false;
    }
  return true;
}

// ---------------------------------------------------------------------------

class VtlEvController final : public Controller {
 public:
  explicit VtlEvController(ControllerParams params = {}) : params_(params) {}

  [[nodiscard]] std::string_view name() const override { return "vtl-ev"; }
  [[nodiscard]] bool uses_platooning() const override { return true; }
  [[nodiscard]] bool preempting() const override { return state_.preempting(); }
  [[nodiscard]] const ControllerState& state() const { return state_; }
  [[nodiscard]] const ControllerParams& params() const { return params_; }

  CommandMap control(const ControlContext& ctx) override {
    if (ctx.platoons == nullptr) throw ContractError("vtl-ev needs platooning");
    std::vector<ScheduleEvent> events;
    const PlanContext c{ctx.geometry, ctx.kinematics, params_, ctx.vehicles,
                        ctx.platoons->platoons(), ctx.now.dt, ctx.now.step, &events};
    const auto period_ticks =
        std::max<std::int64_t>(1, std::llround(params_.control_period / ctx.now.dt));
    bool replan = ctx.now.step % period_ticks == 0;

    for (const Ack& a : ctx.acks)
      if (on_ack(state_, a)) replan = true;

    remove_uncontrolled(state_, c);
    for (const auto& [id, p] : c.platoons) {
      const Vehicle& leader = ctx.vehicles.at(p.leader());
      if (!state_.controlled.contains(id) && inside_control_zone(leader, ctx.geometry) &&
          distance_to_stop_line(leader, ctx.geometry) >= 0.0)
        add_platoon(state_, p, ctx.vehicles, ctx.geometry);
    }

    for (VehicleId ev : ctx.snapshot.evs) {
      if (detected_.contains(ev)) continue;
      const auto& v = ctx.vehicles.at(ev);
      if (!v.platoon || !state_.controlled.contains(*v.platoon)) continue;
      detected_.insert(ev);
      on_ev_detected(state_, ev, c.platoons.at(*v.platoon), c);
    }

    if (!replan) replan = late_window_collides(c);

    std::vector<const Platoon*> pending;
    for (PlatoonId id : state_.controlled)
      if (replan || !state_.schedule.contains(id)) pending.push_back(&c.platoons.at(id));
    if (replan || !pending.empty()) {
      if (!replan) {
        // Append-only: place newcomers around the existing schedule.
        std::vector<const Platoon*> ordered = zip_order(std::move(pending), ctx.vehicles, ctx.geometry);
        append(ordered, c);
      } else {
        commit_schedule(state_, zip_order(std::move(pending), ctx.vehicles, ctx.geometry), c);
      }
    }

    if (trace_)
      for (const ScheduleEvent& e : events) write_schedule_event(*trace_, e);

    CommandMap out;
    const double v_max = ctx.kinematics.limits.v_max;
    for (const auto& [id, p] : c.platoons) {
      Platoon copy = p;
      MotionCommand lead = MotionCommand::target_speed(v_max);
      if (state_.controlled.contains(id)) {
        auto r = state_.schedule.find(id);
        lead = set_new_speed(p, r == state_.schedule.end() ? provisional_window(p, c) : r->second,
                             c.now(), ctx.vehicles, ctx.geometry, ctx.kinematics);
      }
      const bool stop = lead.kind == MotionCommand::Kind::StopAtLine;
      for (auto& [vid, cmd] :
           apply_platoon_command(copy, stop ? 0.0 : lead.value, p.gap, v_max, stop))
        out.emplace(vid, cmd);
    }
    return out;
  }

 private:
  /// Places platoons that have no reservation yet without moving anyone else.
  void append(const std::vector<const Platoon*>& ordered, const PlanContext& c) {
    for (const Platoon* p : ordered) {
      if (state_.schedule.contains(p->id) || !state_.lane_allowed(p->lane)) continue;
      const Reservation* ahead = nullptr;
      double best_pos = 0.0;
      const double my_pos = c.vehicles.at(p->leader()).pos;
      for (const auto& [id, r] : state_.schedule) {
        if (r.lane != p->lane) continue;
        auto q = c.platoons.find(id);
        if (q == c.platoons.end()) continue;
        const double pos = c.vehicles.at(q->second.leader()).pos;
        if (pos > my_pos && (ahead == nullptr || pos < best_pos)) {
          ahead = &r;
          best_pos = pos;
        }
      }
      Reservation r = detail::fit_window(*p, state_.schedule, ahead, c);
      c.emit(ScheduleEvent::Kind::Commit, r);
      state_.schedule.emplace(p->id, r);
    }
  }

  /// Uncommitted slot for a platoon held back by preemption: after every
  /// conflicting window now on the books. It only shapes the approach speed
  /// so the platoon slows down early instead of queueing at the line.
  Reservation provisional_window(const Platoon& p, const PlanContext& c) const {
    Reservation r = detail::fit_window(p, state_.schedule, nullptr, c);
    const Movement m = c.vehicles.at(p.leader()).movement;
    double after = r.window_start;
    for (const auto& [id, q] : state_.schedule)
      if (movements_conflict(q.movement, m)) after = std::max(after, q.window_end + params_.epsilon);
    r.window_start = after;
    r.committed = false;
    return r;
  }

  /// True when a locked window has overrun into a conflicting one, which
  /// calls for an immediate full round.
  bool late_window_collides(const PlanContext& c) {
    bool stretched = false;
    for (auto& [id, r] : state_.schedule) {
      auto p = c.platoons.find(id);
      if (p == c.platoons.end() || !detail::is_locked(p->second, c)) continue;
      if (detail::extend_if_late(r, p->second, c)) {
        c.emit(ScheduleEvent::Kind::Shift, r);
        stretched = true;
      }
    }
    return stretched && !schedule_sound(state_, 0.0);
  }

  ControllerParams params_;
  ControllerState state_;
  std::set<VehicleId> detected_;
};

}  // namespace vtlev

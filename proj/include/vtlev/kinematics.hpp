#pragma once

// Per-tick longitudinal motion: command interpretation, car-following and
// the speed planning helpers the controllers use to meet a reservation.

#include <algorithm>
#include <cmath>

#include "vtlev/core_model.hpp"

namespace vtlev {

struct KinematicsParams {
  DynamicsLimits limits;
  double k_gap = 0.5;        // 1/s, proportional gap gain
  double gap_target = 1.0;   // m, inside platoons
  double gap_min = 0.5;      // m, hard floor for any follower
  double creep_speed = 0.5;  // m/s
  double ttc_brake_s = 2.0;  // time-to-collision that triggers the hard brake
  // Vehicles outside a platoon follow with a standstill gap plus a time
  // headway, the usual microscopic-simulator defaults.
  double individual_min_gap = 2.5;  // m
  double individual_headway = 1.0;  // s
};

struct MotionCommand {
  enum class Kind { TargetSpeed, StopAtLine, FollowLeader };

  Kind kind = Kind::TargetSpeed;
  double value = 0.0;  // speed for TargetSpeed, gap target for FollowLeader
  // Intersection interlock: additionally cap speed so the front can halt at
  // the stop line, whatever the command says.
  bool hold_at_line = false;

  static MotionCommand target_speed(double v) {
    return {Kind::TargetSpeed, v, false};
  }
  static MotionCommand stop_at_line() { return {Kind::StopAtLine, 0.0, false}; }
  static MotionCommand follow_leader(double gap) {
    return {Kind::FollowLeader, gap, false};
  }

  friend bool operator==(const MotionCommand&, const MotionCommand&) = default;
};

/// Bumper-to-bumper distance from the follower's front to the leader's rear.
inline double bumper_gap(const Vehicle& leader, const Vehicle& follower) {
  return leader.rear() - follower.pos;
}

/// Largest speed for the coming tick such that, after advancing one tick at
/// that speed, the vehicle can still come to rest within `room` metres.
inline double max_speed_within(double room, double b_max, double dt) {
  if (room <= 0.0) return 0.0;
  const double bdt = b_max * dt;
  return -bdt + std::sqrt(bdt * bdt + 2.0 * b_max * room);
}

inline double stopping_distance(double speed, double b_max) {
  return speed * speed / (2.0 * b_max);
}

/// True if a vehicle at `speed`, `distance` metres before a line, can still
/// halt at or before it with one tick of maximum braking per step.
inline bool can_stop_within(double distance, double speed, double b_max,
                            double dt) {
  if (distance < 0.0) return false;
  return max_speed_within(distance, b_max, dt) >= speed - b_max * dt - 1e-9;
}

/// Time to cover `dist` starting at `v0`, accelerating at `a` up to `v_max`.
inline double travel_time(double dist, double v0, double a, double v_max) {
  if (dist <= 0.0) return 0.0;
  v0 = std::clamp(v0, 0.0, v_max);
  const double t_ramp = (v_max - v0) / a;
  const double d_ramp = 0.5 * (v0 + v_max) * t_ramp;
  if (dist <= d_ramp) return (-v0 + std::sqrt(v0 * v0 + 2.0 * a * dist)) / a;
  return t_ramp + (dist - d_ramp) / v_max;
}

namespace detail {

inline double ttc_capped(double desired, const Vehicle& leader,
                         const Vehicle& follower, double gap, double ttc_s) {
  const double closing = follower.speed - leader.speed;
  if (closing > 0.0 && gap / closing < ttc_s) desired = std::min(desired, leader.speed);
  return desired;
}

}  // namespace detail

/// Proportional gap controller for platoon followers.
inline double follower_speed(const Vehicle& leader, const Vehicle& follower,
                             double gap_target, const KinematicsParams& p) {
  const double gap = bumper_gap(leader, follower);
  if (gap < 0.0)
    throw SafetyViolation("vehicles " + std::to_string(leader.id) + " and " +
                          std::to_string(follower.id) + " overlap");
  double v = std::clamp(leader.speed + p.k_gap * (gap - gap_target), 0.0,
                        p.limits.v_max);
  return detail::ttc_capped(v, leader, follower, gap, p.ttc_brake_s);
}

/// Same law with a speed-dependent desired gap, for vehicles that are not
/// riding inside a platoon.
inline double individual_follow_speed(const Vehicle& leader,
                                      const Vehicle& follower,
                                      const KinematicsParams& p) {
  const double gap = bumper_gap(leader, follower);
  if (gap < 0.0)
    throw SafetyViolation("vehicles " + std::to_string(leader.id) + " and " +
                          std::to_string(follower.id) + " overlap");
  const double desired_gap =
      p.individual_min_gap + p.individual_headway * follower.speed;
  double v = std::clamp(leader.speed + p.k_gap * (gap - desired_gap), 0.0,
                        p.limits.v_max);
  return detail::ttc_capped(v, leader, follower, gap, p.ttc_brake_s);
}

/// Speed that brings a vehicle `d` metres out to the stop line after
/// `t_remaining` seconds, or v_max when that is unreachable anyway.
inline double speed_to_arrive(double d, double t_remaining, double v_max,
                              double creep_speed = 0.5) {
  if (d <= 0.0) return v_max;
  if (t_remaining <= d / v_max) return v_max;
  const double v = d / t_remaining;
  if (v > 0.0 && v < creep_speed) return creep_speed;
  return v;
}

/// How a leader should approach a line `d` metres out that it may cross no
/// earlier than `t` seconds from now: cruise at `cruise`, then accelerate
/// at a_max so it reaches the line on time at `line_speed`. Crossing fast
/// keeps the box occupied for the shortest time.
struct ArrivalPlan {
  bool stop = false;  // even creeping would be early
  double cruise = 0.0;
  double line_speed = 0.0;
};

namespace detail {

struct Profile {
  double distance = 0.0;
  double line_speed = 0.0;
};

/// Distance covered in `t` when the speed goes from `v0` to `x` (at a_max
/// or b_max), holds, then ramps at a_max so as to reach v_max at the end.
inline Profile cruise_profile(double v0, double x, double t, const DynamicsLimits& lim) {
  const double rate = x < v0 ? -lim.b_max : lim.a_max;
  const double t1 = (x - v0) / rate;
  if (t1 >= t) {
    const double v_end = v0 + rate * t;
    return {0.5 * (v0 + v_end) * t, v_end};
  }
  const double rest = t - t1;
  const double d1 = 0.5 * (v0 + x) * t1;
  const double t3 = (lim.v_max - x) / lim.a_max;
  if (t3 <= rest) return {d1 + x * (rest - t3) + 0.5 * (x + lim.v_max) * t3, lim.v_max};
  const double v_end = x + lim.a_max * rest;
  return {d1 + 0.5 * (x + v_end) * rest, v_end};
}

}  // namespace detail

/// Plans a leader `d` metres out at speed `v0` to reach the line in `t`
/// seconds: change to a cruise speed, hold it, and ramp up late so the
/// line is crossed as fast as possible. The cruise speed is found by
/// bisection; distance covered grows with it.
inline ArrivalPlan plan_arrival(double d, double t, double v0, const DynamicsLimits& lim,
                                double creep_speed) {
  if (t <= 0.0) return {false, lim.v_max, lim.v_max};
  if (d <= 0.0) return {true, 0.0, 0.0};  // at the line early: wait
  v0 = std::clamp(v0, 0.0, lim.v_max);
  const detail::Profile fastest = detail::cruise_profile(v0, lim.v_max, t, lim);
  if (fastest.distance <= d) return {false, lim.v_max, fastest.line_speed};
  const detail::Profile slowest = detail::cruise_profile(v0, creep_speed, t, lim);
  if (slowest.distance > d) return {true, 0.0, 0.0};
  double lo = creep_speed, hi = lim.v_max;
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    (detail::cruise_profile(v0, mid, t, lim).distance > d ? hi : lo) = mid;
  }
  return {false, lo, detail::cruise_profile(v0, lo, t, lim).line_speed};
}

/// Advances one vehicle by one tick. `leader` is the vehicle directly ahead
/// in the same lane, already advanced for this tick.
inline Vehicle integrate(const Vehicle& v, const MotionCommand& cmd,
                         const Vehicle* leader, double dt,
                         const IntersectionGeometry& g,
                         const KinematicsParams& p) {
  if (!(dt > 0.0)) throw ContractError("integrate: dt must be > 0");
  const DynamicsLimits& lim = p.limits;
  const double d_line = distance_to_stop_line(v, g);

  double desired = lim.v_max;
  switch (cmd.kind) {
    case MotionCommand::Kind::TargetSpeed:
      if (cmd.value < 0.0 || cmd.value > lim.v_max + 1e-9)
        throw ContractError("TargetSpeed outside [0, v_max]");
      desired = cmd.value;
      break;
    case MotionCommand::Kind::StopAtLine:
      if (d_line >= 0.0)
        desired = std::min(lim.v_max, max_speed_within(d_line, lim.b_max, dt));
      break;
    case MotionCommand::Kind::FollowLeader:
      if (leader == nullptr)
        throw ContractError("FollowLeader without a leader");
      desired = follower_speed(*leader, v, cmd.value, p);
      break;
  }

  const bool line_bound = (cmd.hold_at_line || cmd.kind == MotionCommand::Kind::StopAtLine) &&
                          can_stop_within(d_line, v.speed, lim.b_max, dt);
  if (cmd.hold_at_line && d_line >= 0.0)
    desired = std::min(desired, max_speed_within(d_line, lim.b_max, dt));

  if (leader != nullptr) {
    if (cmd.kind != MotionCommand::Kind::FollowLeader)
      desired = std::min(desired, individual_follow_speed(*leader, v, p));
    // Non-collision bound: stay able to stop behind the leader even if it
    // brakes at b_max from now on.
    const double room = bumper_gap(*leader, v) - p.gap_min +
                        stopping_distance(leader->speed, lim.b_max);
    desired = std::min(desired, max_speed_within(room, lim.b_max, dt));
  }

  const double accel = std::clamp((desired - v.speed) / dt, -lim.b_max, lim.a_max);
  Vehicle out = v;
  out.speed = std::clamp(v.speed + accel * dt, 0.0, lim.v_max);
  // The stop bound converges on the line; rounding must not carry the
  // front over it.
  if (line_bound && out.speed * dt > d_line) out.speed = d_line / dt;
  out.accel = (out.speed - v.speed) / dt;
  out.pos = line_bound ? std::min(v.pos + out.speed * dt, g.approach_length)
                       : v.pos + out.speed * dt;
  return out;
}

}  // namespace vtlev

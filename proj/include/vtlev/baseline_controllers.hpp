#pragma once

// Signal-based comparison controllers. Both run a four-phase plan with an
// all-red clearance between greens; they differ in how greens are timed:
//  * fixed-time with phase-completion EV preemption (VTL-PIC style), and
//  * queue-proportional adaptive greens with EV promotion (ETLSA style).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "vtlev/controller.hpp"
#include "vtlev/core_model.hpp"
#include "vtlev/kinematics.hpp"

namespace vtlev {

using ApproachMask = std::uint8_t;

constexpr ApproachMask mask_of(Approach a) {
  return static_cast<ApproachMask>(1u << static_cast<unsigned>(a));
}

inline std::string mask_to_string(ApproachMask m) {
  std::string s;
  for (Approach a : kApproaches)
    if (m & mask_of(a)) s += to_string(a);
  return s;
}

struct Phase {
  ApproachMask approaches = 0;
  double green_s = 30.0;
};

struct PhasePlan {
  std::vector<Phase> phases;
  double all_red_s = 3.0;
  std::size_t cursor = 0;
  double elapsed = 0.0;  // into the current phase, green then all-red

  [[nodiscard]] double cycle_length() const {
    double c = 0.0;
    for (const Phase& p : phases) c += p.green_s + all_red_s;
    return c;
  }

  void validate(double g_min) const {
    if (phases.empty()) throw ContractError("phase plan has no phases");
    if (all_red_s < 0.0) throw ContractError("all_red_s must be >= 0");
    for (const Phase& p : phases)
      if (p.green_s < g_min) throw ContractError("phase green below g_min");
  }
};

/// Four single-approach phases N, E, S, W.
inline PhasePlan default_phase_plan(double green_s = 30.0, double all_red_s = 3.0) {
  PhasePlan plan;
  for (Approach a : kApproaches) plan.phases.push_back({mask_of(a), green_s});
  plan.all_red_s = all_red_s;
  return plan;
}

/// Phase index whose green-plus-all-red slot contains `t` for an
/// unpreempted cycle starting at 0.
inline std::size_t phase_at(const PhasePlan& plan, double t) {
  double r = std::fmod(t, plan.cycle_length());
  for (std::size_t i = 0; i < plan.phases.size(); ++i) {
    const double slot = plan.phases[i].green_s + plan.all_red_s;
    if (r < slot) return i;
    r -= slot;
  }
  return 0;
}

/// Advances the plan by `dt` and returns the approaches that are green
/// afterwards (empty during all-red).
inline ApproachMask fixed_time_step(PhasePlan& plan, double dt) {
  plan.elapsed += dt;
  while (plan.elapsed >= plan.phases[plan.cursor].green_s + plan.all_red_s - 1e-9) {
    plan.elapsed -= plan.phases[plan.cursor].green_s + plan.all_red_s;
    plan.cursor = (plan.cursor + 1) % plan.phases.size();
  }
  if (plan.elapsed < plan.phases[plan.cursor].green_s - 1e-9)
    return plan.phases[plan.cursor].approaches;
  return 0;
}

/// When an EV on `ev_approach` gets its green if detected at `elapsed`
/// into the current phase: immediately if that phase already serves it,
/// otherwise once the phase's green and all-red have run out.
inline double vtl_pic_preempt(const PhasePlan& plan, Approach ev_approach, double now) {
  const Phase& cur = plan.phases[plan.cursor];
  const bool in_green = plan.elapsed < cur.green_s;
  if (in_green && (cur.approaches & mask_of(ev_approach))) return now;
  return now + (cur.green_s + plan.all_red_s - plan.elapsed);
}

struct SignalParams {
  double green_s = 30.0;
  double all_red_s = 3.0;
  double t_pass = 2.0;  // s per queued vehicle
  double g_min = 5.0;
  double g_max = 60.0;
};

/// Queue-proportional green for one phase.
inline double etlsa_green(int queued, const SignalParams& p) {
  if (queued < 0) throw ContractError("etlsa_green: negative queue");
  return std::clamp(p.t_pass * queued, p.g_min, p.g_max);
}

inline std::vector<double> etlsa_greens(std::span<const int> queues, const SignalParams& p) {
  std::vector<double> out;
  out.reserve(queues.size());
  for (int q : queues) out.push_back(etlsa_green(q, p));
  return out;
}

/// Timing of one EV preemption, for checking phase-completion behaviour.
struct PreemptionRecord {
  VehicleId ev = 0;
  Approach approach = Approach::N;
  double detected_s = 0.0;
  double phase_end_s = 0.0;  // scheduled end (green + all-red) of the phase running at detection
  std::optional<double> ev_green_s;
  std::optional<double> ack_s;
};

enum class SignalPolicy { FixedTime, Adaptive };

/// Signal state machine shared by both baselines. Vehicles run individually
/// (no platooning): green approaches drive, red approaches stop at the line
/// unless already too close to stop.
class SignalController final : public Controller {
 public:
  SignalController(SignalPolicy policy, SignalParams params)
      : policy_(policy), params_(params), plan_(default_phase_plan(params.green_s, params.all_red_s)) {
    plan_.validate(policy == SignalPolicy::Adaptive ? 0.0 : 0.0);
    green_duration_ = plan_.phases[0].green_s;
    green_mask_ = plan_.phases[0].approaches;
  }

  [[nodiscard]] std::string_view name() const override {
    return policy_ == SignalPolicy::FixedTime ? "vtl-pic" : "etlsa";
  }
  [[nodiscard]] bool uses_platooning() const override { return false; }
  [[nodiscard]] bool preempting() const override { return !holding_.empty() || !ev_queue_.empty(); }

  [[nodiscard]] ApproachMask green_mask() const { return all_red_ ? 0 : green_mask_; }
  [[nodiscard]] const std::vector<PreemptionRecord>& preemptions() const { return records_; }
  [[nodiscard]] int phase_index() const { return ev_green_ ? -1 : static_cast<int>(phase_); }
  /// Count of ticks where a green started without a preceding all-red.
  [[nodiscard]] std::int64_t unsafe_transitions() const { return unsafe_transitions_; }

  CommandMap control(const ControlContext& ctx) override {
    const double now = ctx.now.seconds();
    // elapsed_ is time since the current phase began, as of this tick.
    if (started_) elapsed_ += ctx.now.dt;
    if (!started_) {
      started_ = true;
      if (policy_ == SignalPolicy::Adaptive) green_duration_ = adaptive_green(0, ctx);
      trace(ctx.now.step);
    }

    for (const Ack& a : ctx.acks) handle_ack(a.sender, now);
    for (VehicleId ev : ctx.snapshot.evs) {
      if (seen_.contains(ev)) continue;
      seen_.insert(ev);
      detect(ev, ctx.geometry.approach_of(ctx.vehicles.at(ev).lane), now);
    }

    advance(ctx);

    CommandMap out;
    const double v_max = ctx.kinematics.limits.v_max;
    const double b_max = ctx.kinematics.limits.b_max;
    const ApproachMask green = green_mask();
    for (LaneId lane = 0; lane < static_cast<LaneId>(ctx.lanes.size()); ++lane) {
      const bool go = green & mask_of(ctx.geometry.approach_of(lane));
      for (VehicleId id : ctx.lanes[lane]) {
        const Vehicle& v = ctx.vehicles.at(id);
        const double d = distance_to_stop_line(v, ctx.geometry);
        if (go || d < 0.0 || !can_stop_within(d, v.speed, b_max, ctx.now.dt))
          out.emplace(id, MotionCommand::target_speed(v_max));
        else
          out.emplace(id, MotionCommand::stop_at_line());
      }
    }
    return out;
  }

 private:
  void detect(VehicleId ev, Approach a, double now) {
    PreemptionRecord rec{ev, a, now, now, std::nullopt, std::nullopt};
    if (!all_red_ && (green_mask_ & mask_of(a))) {
      rec.phase_end_s = now;
      rec.ev_green_s = now;
      holding_.insert(ev);
    } else {
      rec.phase_end_s = all_red_ ? now + (params_.all_red_s - elapsed_)
                                 : now + (green_duration_ - elapsed_) + params_.all_red_s;
      ev_queue_.push_back({ev, a});
    }
    records_.push_back(rec);
  }

  void handle_ack(VehicleId ev, double now) {
    auto rec = std::find_if(records_.begin(), records_.end(),
                            [&](const PreemptionRecord& r) { return r.ev == ev; });
    if (rec == records_.end()) {
      spdlog::warn("signal controller: ack from unknown EV {}", ev);
      return;
    }
    rec->ack_s = now;
    holding_.erase(ev);
    std::erase_if(ev_queue_, [&](const auto& e) { return e.first == ev; });
  }

  int queued_on(ApproachMask m, const ControlContext& ctx) const {
    int q = 0;
    for (LaneId lane = 0; lane < static_cast<LaneId>(ctx.lanes.size()); ++lane) {
      if (!(m & mask_of(ctx.geometry.approach_of(lane)))) continue;
      for (VehicleId id : ctx.lanes[lane]) {
        const Vehicle& v = ctx.vehicles.at(id);
        if (inside_control_zone(v, ctx.geometry) && distance_to_stop_line(v, ctx.geometry) >= 0.0) ++q;
      }
    }
    return q;
  }

  double adaptive_green(std::size_t phase, const ControlContext& ctx) const {
    return etlsa_green(queued_on(plan_.phases[phase].approaches, ctx), params_);
  }

  void advance(const ControlContext& ctx) {
    const double now = ctx.now.seconds();
    if (!all_red_) {
      if (!holding_.empty()) return;  // green held for an EV until its ack
      if (ev_green_ || elapsed_ >= green_duration_ - 1e-9) {
        all_red_ = true;
        elapsed_ = 0.0;
        trace(ctx.now.step);
      }
      return;
    }
    if (elapsed_ < params_.all_red_s - 1e-9) return;

    all_red_ = false;
    elapsed_ = 0.0;
    if (!ev_queue_.empty()) {
      const Approach a = ev_queue_.front().second;
      ev_green_ = true;
      green_mask_ = mask_of(a);
      green_duration_ = 0.0;
      for (auto it = ev_queue_.begin(); it != ev_queue_.end();) {
        if (it->second == a) {
          holding_.insert(it->first);
          for (PreemptionRecord& r : records_)
            if (r.ev == it->first && !r.ev_green_s) r.ev_green_s = now;
          it = ev_queue_.erase(it);
        } else {
          ++it;
        }
      }
    } else {
      ev_green_ = false;
      phase_ = (phase_ + 1) % plan_.phases.size();
      green_mask_ = plan_.phases[phase_].approaches;
      green_duration_ = policy_ == SignalPolicy::Adaptive ? adaptive_green(phase_, ctx)
                                                          : plan_.phases[phase_].green_s;
    }
    trace(ctx.now.step);
  }

  void trace(std::int64_t tick) {
    if (!trace_) return;
    *trace_ << fmt::format("{},{},{},{}\n", tick, all_red_ ? -1 : phase_index(),
                           mask_to_string(green_mask()), preempting() ? 1 : 0);
  }

  SignalPolicy policy_;
  SignalParams params_;
  PhasePlan plan_;
  std::size_t phase_ = 0;
  bool all_red_ = false;
  bool ev_green_ = false;
  bool started_ = false;
  double elapsed_ = 0.0;
  double green_duration_ = 0.0;
  ApproachMask green_mask_ = 0;
  std::set<VehicleId> holding_;
  std::deque<std::pair<VehicleId, Approach>> ev_queue_;
  std::set<VehicleId> seen_;
  std::vector<PreemptionRecord> records_;
  std::int64_t unsafe_transitions_ = 0;
};

}  // namespace vtlev

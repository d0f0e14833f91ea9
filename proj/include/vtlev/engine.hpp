#pragma once

// Deterministic tick loop, scenario configuration and the comparison runner.
//
// Phase order inside one tick (changing it changes every trace):
//   1. spawn arrivals          4. controller round / command refresh
//   2. beacons + message drain 5. integration in road order, lane by lane
//   3. platoon maintenance     6. crossings, departures, acks, safety checks

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "vtlev/baseline_controllers.hpp"
#include "vtlev/comms.hpp"
#include "vtlev/controller.hpp"
#include "vtlev/core_model.hpp"
#include "vtlev/kinematics.hpp"
#include "vtlev/metrics.hpp"
#include "vtlev/platooning.hpp"
#include "vtlev/traffic_gen.hpp"
#include "vtlev/vtl_ev_controller.hpp"

namespace vtlev {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ControllerKind { VtlEv, VtlPic, Etlsa };

inline std::string_view to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::VtlEv: return "vtl-ev";
    case ControllerKind::VtlPic: return "vtl-pic";
    case ControllerKind::Etlsa: return "etlsa";
  }
  return "?";
}

inline ControllerKind parse_controller(std::string_view s) {
  if (s == "vtl-ev") return ControllerKind::VtlEv;
  if (s == "vtl-pic") return ControllerKind::VtlPic;
  if (s == "etlsa") return ControllerKind::Etlsa;
  throw ConfigError(fmt::format("unknown controller '{}'", s));
}

/// Hand-placed vehicle for scripted scenarios.
struct ScriptedArrival {
  double t = 0.0;
  LaneId lane = 0;
  VehicleClass vclass = VehicleClass::Normal;
  Turn turn = Turn::Through;
};

struct Scenario {
  IntersectionGeometry geometry;
  DemandProfile demand;
  bool demand_enabled = true;
  std::vector<ScriptedArrival> script;
  ControllerKind controller = ControllerKind::VtlEv;
  std::uint64_t seed = 1;
  double horizon_s = 3000.0;
  double dt = 0.1;
  double drain_s = 300.0;
  double exit_length = 60.0;  // m past the box before a vehicle leaves the world
  double vehicle_length = 3.0;
  KinematicsParams kinematics;
  PlatoonParams platoon;
  ControllerParams vtl;
  SignalParams signal;
  MetricsParams metrics;

  [[nodiscard]] std::int64_t horizon_ticks() const { return std::llround(horizon_s / dt); }

  void validate() const {
    try {
      geometry.validate();
      demand.validate();
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    auto require = [](bool ok, std::string_view what) {
      if (!ok) throw ConfigError(std::string(what));
    };
    require(dt > 0.0, "dt must be > 0");
    require(horizon_s > 0.0, "horizon_s must be > 0");
    if (demand_enabled)
      require(horizon_s >= demand.total_duration() - 1e-9,
              "horizon_s must cover the demand stages");
    require(drain_s >= 0.0, "drain_s must be >= 0");
    auto divides = [&](double period) {
      const double n = period / dt;
      return period > 0.0 && std::abs(n - std::round(n)) < 1e-6;
    };
    require(divides(vtl.control_period), "dt must divide controller.control_period_s");
    require(divides(metrics.sample_s), "dt must divide metrics.sample_s");
    require(vtl.epsilon >= 0.0 && vtl.revocation_horizon >= 0.0, "controller timings must be >= 0");
    const auto& lim = kinematics.limits;
    require(lim.v_max > 0.0 && lim.a_max > 0.0 && lim.b_max > 0.0, "dynamics limits must be > 0");
    require(kinematics.gap_min >= 0.0 && kinematics.gap_target >= kinematics.gap_min,
            "need 0 <= gap_min <= gap_target");
    require(vehicle_length > 0.0, "vehicle.length must be > 0");
    require(platoon.max_size >= 1 && platoon.max_length > 0.0, "platoon caps must be positive");
    require(signal.green_s >= signal.g_min && signal.all_red_s >= 0.0,
            "baseline.green_s must be >= etlsa.g_min");
    require(signal.g_min > 0.0 && signal.g_max >= signal.g_min && signal.t_pass > 0.0,
            "etlsa timings inconsistent");
    require(metrics.wait_threshold >= 0.0, "metrics.wait_threshold must be >= 0");
    if (demand_enabled)
      for (const DemandStage& s : demand.stages)
        require(s.volume / 3600.0 * dt < 1.0,
                fmt::format("lambda*dt >= 1 for {} pcu/ln/hr; use a smaller dt", s.volume));
    for (const ScriptedArrival& a : script)
      require(a.t >= 0.0 && a.lane >= 0 && a.lane < geometry.lane_count(),
              "scripted arrival outside the run");
  }
};

// --- config file -----------------------------------------------------------

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto p = s.find(sep, start);
    out.push_back(trim(s.substr(start, p == std::string_view::npos ? p : p - start)));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  double x = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(x))
    throw ConfigError(fmt::format("{}: '{}' is not a number", key, v));
  return x;
}

inline std::int64_t to_int(const std::string& key, const std::string& v) {
  std::int64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError(fmt::format("{}: '{}' is not an integer", key, v));
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(fmt::format("{}: '{}' is not a boolean", key, v));
}

inline VehicleClass to_class(const std::string& v) {
  if (v == "Normal") return VehicleClass::Normal;
  if (v == "Emergency") return VehicleClass::Emergency;
  throw ConfigError(fmt::format("unknown vehicle class '{}'", v));
}

inline Turn to_turn(const std::string& v) {
  if (v == "Through") return Turn::Through;
  if (v == "Left") return Turn::Left;
  if (v == "Right") return Turn::Right;
  throw ConfigError(fmt::format("unknown turn '{}'", v));
}

}  // namespace detail

/// Parses flat `key = value` text. `#` starts a comment; unknown or
/// repeated keys are errors.
inline Scenario parse_scenario(std::string_view text) {
  using namespace detail;
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(fmt::format("line {}: expected key = value", lineno));
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError(fmt::format("line {}: empty key", lineno));
    if (!kv.emplace(key, value).second) throw ConfigError(fmt::format("duplicate key '{}'", key));
  }

  Scenario s;
  std::optional<double> stage_s;
  if (auto it = kv.find("demand.stage_s"); it != kv.end()) {
    stage_s = to_double(it->first, it->second);
    kv.erase(it);
  }

  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto num = [](double& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) { field = to_double(k, v); };
  };
  std::map<std::string, Setter> setters{
      {"seed", [&](auto& k, auto& v) { s.seed = static_cast<std::uint64_t>(to_int(k, v)); }},
      {"controller", [&](auto&, auto& v) { s.controller = parse_controller(v); }},
      {"horizon_s", num(s.horizon_s)},
      {"dt", num(s.dt)},
      {"drain_s", num(s.drain_s)},
      {"geometry.approach_length", num(s.geometry.approach_length)},
      {"geometry.box_length", num(s.geometry.box_length)},
      {"geometry.control_radius", num(s.geometry.control_radius)},
      {"geometry.exit_length", num(s.exit_length)},
      {"geometry.lanes_per_approach",
       [&](auto& k, auto& v) { s.geometry.lanes_per_approach = static_cast<int>(to_int(k, v)); }},
      {"vehicle.length", num(s.vehicle_length)},
      {"vehicle.v_max", num(s.kinematics.limits.v_max)},
      {"vehicle.a_max", num(s.kinematics.limits.a_max)},
      {"vehicle.b_max", num(s.kinematics.limits.b_max)},
      {"kinematics.k_gap", num(s.kinematics.k_gap)},
      {"kinematics.gap_target", num(s.kinematics.gap_target)},
      {"kinematics.gap_min", num(s.kinematics.gap_min)},
      {"kinematics.creep_speed", num(s.kinematics.creep_speed)},
      {"kinematics.ttc_brake_s", num(s.kinematics.ttc_brake_s)},
      {"kinematics.individual_min_gap", num(s.kinematics.individual_min_gap)},
      {"kinematics.individual_headway", num(s.kinematics.individual_headway)},
      {"demand.enabled", [&](auto& k, auto& v) { s.demand_enabled = to_bool(k, v); }},
      {"demand.ev_share", num(s.demand.ev_share)},
      {"demand.stages",
       [&](auto& k, auto& v) {
         s.demand.stages.clear();
         for (const std::string& item : split(v, ',')) {
           const auto parts = split(item, ':');
           if (parts.size() > 2 || parts[0].empty()) throw ConfigError(k + ": bad stage '" + item + "'");
           DemandStage st;
           st.volume = to_double(k, parts[0]);
           st.duration = parts.size() == 2 ? to_double(k, parts[1]) : stage_s.value_or(600.0);
           s.demand.stages.push_back(st);
         }
       }},
      {"demand.turn_mix",
       [&](auto& k, auto& v) {
         const auto parts = split(v, ',');
         if (parts.size() != 3) throw ConfigError(k + ": need Through,Left,Right");
         for (int i = 0; i < 3; ++i) s.demand.turn_mix[i] = to_double(k, parts[i]);
       }},
      {"platoon.max_size", [&](auto& k, auto& v) { s.platoon.max_size = static_cast<int>(to_int(k, v)); }},
      {"platoon.max_length", num(s.platoon.max_length)},
      {"platoon.merge_dist_m", num(s.platoon.merge_dist)},
      {"platoon.gap", num(s.platoon.gap)},
      {"platoon.downstream_horizon", num(s.platoon.downstream_horizon)},
      {"controller.epsilon_s", num(s.vtl.epsilon)},
      {"controller.control_period_s", num(s.vtl.control_period)},
      {"controller.revocation_horizon_s", num(s.vtl.revocation_horizon)},
      {"baseline.green_s", num(s.signal.green_s)},
      {"baseline.all_red_s", num(s.signal.all_red_s)},
      {"etlsa.t_pass", num(s.signal.t_pass)},
      {"etlsa.g_min", num(s.signal.g_min)},
      {"etlsa.g_max", num(s.signal.g_max)},
      {"metrics.wait_threshold", num(s.metrics.wait_threshold)},
      {"metrics.sample_s", num(s.metrics.sample_s)},
      {"script.vehicles",
       [&](auto& k, auto& v) {
         // t:lane:class:turn, comma separated
         for (const std::string& item : split(v, ',')) {
           const auto p = split(item, ':');
           if (p.size() != 4) throw ConfigError(k + ": bad entry '" + item + "'");
           s.script.push_back({to_double(k, p[0]), static_cast<LaneId>(to_int(k, p[1])),
                               to_class(p[2]), to_turn(p[3])});
         }
       }},
  };

  // demand.stages may rely on demand.stage_s, which was consumed above.
  for (const auto& [key, value] : kv) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(fmt::format("unknown key '{}'", key));
    it->second(key, value);
  }
  if (stage_s && !kv.contains("demand.stages"))
    for (DemandStage& st : s.demand.stages) st.duration = *stage_s;
  std::sort(s.script.begin(), s.script.end(),
            [](const ScriptedArrival& a, const ScriptedArrival& b) {
              return std::tie(a.t, a.lane) < std::tie(b.t, b.lane);
            });
  return s;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

inline std::unique_ptr<Controller> make_controller(const Scenario& s) {
  switch (s.controller) {
    case ControllerKind::VtlEv: return std::make_unique<VtlEvController>(s.vtl);
    case ControllerKind::VtlPic: return std::make_unique<SignalController>(SignalPolicy::FixedTime, s.signal);
    case ControllerKind::Etlsa: return std::make_unique<SignalController>(SignalPolicy::Adaptive, s.signal);
  }
  throw ConfigError("unknown controller");
}

// --- simulation --------------------------------------------------------------

struct TraceSinks {
  std::ostream* spawns = nullptr;
  std::ostream* schedule = nullptr;
  std::ostream* platoon = nullptr;
  std::ostream* signal = nullptr;
  std::ostream* messages = nullptr;
};

/// Lane and time an EV was first seen by the RSU and when it acked.
struct EvTimeline {
  VehicleId ev = 0;
  LaneId lane = 0;
  double detected_s = 0.0;
  std::optional<double> ack_s;
};

struct CrossingEvent {
  VehicleId id = 0;
  LaneId lane = 0;
  VehicleClass vclass = VehicleClass::Normal;
  double t = 0.0;
};

struct RunResult {
  std::string controller;
  std::uint64_t seed = 0;
  std::vector<KpiRecord> kpis;
  std::string summary_csv;
  std::string vehicles_csv;
  std::string timeseries_csv;
  std::string spawns_csv;
  std::int64_t ticks = 0;
  bool drained = false;
  std::uint64_t final_hash = 0;
  int max_platoon_size = 0;
  std::vector<int> max_platoon_by_stage;
  std::int64_t mixed_movement_merges = 0;
  std::int64_t interlock_holds = 0;
  std::vector<EvTimeline> evs;
  std::vector<CrossingEvent> crossings;
  std::vector<PreemptionRecord> signal_preemptions;
};

class Simulation {
 public:
  explicit Simulation(Scenario s, TraceSinks traces = {})
      : sc_((s.validate(), std::move(s))),
        traces_(traces),
        gen_(sc_.demand, sc_.geometry, sc_.seed),
        metrics_(sc_.demand, sc_.geometry.lane_count(), sc_.metrics),
        controller_(make_controller(sc_)),
        lanes_(static_cast<std::size_t>(sc_.geometry.lane_count())) {
    if (controller_->uses_platooning()) platoons_.emplace(sc_.platoon);
    controller_->set_trace(sc_.controller == ControllerKind::VtlEv ? traces_.schedule : traces_.signal);
    if (traces_.spawns) write_spawn_header(*traces_.spawns);
    if (traces_.schedule && sc_.controller == ControllerKind::VtlEv)
      *traces_.schedule << "tick,platoon_id,lane,window_start_s,window_end_s,event\n";
    if (traces_.signal && sc_.controller != ControllerKind::VtlEv)
      *traces_.signal << "tick,phase_index,green_approaches,preempting\n";
    if (traces_.platoon) *traces_.platoon << "tick,event,platoon_id,size,reason\n";
    if (traces_.messages) *traces_.messages << "tick,type,sender,lane,pos_m,speed_mps,vclass\n";
    stage_max_platoon_.assign(sc_.demand.stages.size(), 0);
  }

  [[nodiscard]] const Scenario& scenario() const { return sc_; }
  [[nodiscard]] SimTime now() const { return {step_, sc_.dt}; }
  [[nodiscard]] const VehicleTable& vehicles() const { return vehicles_; }
  [[nodiscard]] const std::vector<std::vector<VehicleId>>& lanes() const { return lanes_; }
  [[nodiscard]] const Controller& controller() const { return *controller_; }
  [[nodiscard]] const MetricsCollector& metrics() const { return metrics_; }
  [[nodiscard]] const PlatoonManager* platoons() const { return platoons_ ? &*platoons_ : nullptr; }
  [[nodiscard]] const std::vector<EvTimeline>& ev_timelines() const { return evs_; }
  [[nodiscard]] const std::vector<CrossingEvent>& crossings() const { return crossings_; }

  /// True while the run has work left: before the horizon, or during the
  /// drain while vehicles remain.
  [[nodiscard]] bool running() const {
    if (step_ < sc_.horizon_ticks()) return true;
    if (step_ >= sc_.horizon_ticks() + std::llround(sc_.drain_s / sc_.dt)) return false;
    return !empty();
  }

  [[nodiscard]] bool empty() const {
    return in_world_not_departed() == 0 && gen_.backlog_size() == 0 && next_script_ >= sc_.script.size();
  }

  /// FNV-1a over the tick number and every vehicle's state in road order.
  [[nodiscard]] std::uint64_t world_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t x) {
      for (int i = 0; i < 8; ++i) {
        h ^= (x >> (8 * i)) & 0xFF;
        h *= 0x100000001b3ULL;
      }
    };
    mix(static_cast<std::uint64_t>(step_));
    for (const auto& lane : lanes_)
      for (VehicleId id : lane) {
        const Vehicle& v = vehicles_.at(id);
        mix(static_cast<std::uint64_t>(v.id));
        mix(std::bit_cast<std::uint64_t>(v.pos));
        mix(std::bit_cast<std::uint64_t>(v.speed));
        mix(v.platoon ? static_cast<std::uint64_t>(*v.platoon) : ~0ULL);
      }
    return h;
  }

  void tick() {
    const SimTime t = now();
    spawn(t);
    const auto [snapshot, acks] = communicate(t);
    if (platoons_) {
      platoons_->maintain(lanes_, vehicles_,
                          {sc_.geometry, sc_.kinematics.limits.b_max, sc_.dt, controller_->preempting()},
                          t.step);
      flush_platoon_events(t);
    }
    const ControlContext ctx{t, sc_.geometry, sc_.kinematics, vehicles_, lanes_, snapshot, acks,
                             platoons_ ? &*platoons_ : nullptr};
    CommandMap commands = controller_->control(ctx);
    integrate_all(commands);
    ++step_;
    post_step(now());
  }

  RunResult run() {
    while (running()) tick();
    RunResult r;
    r.controller = std::string(controller_->name());
    r.seed = sc_.seed;
    r.kpis = metrics_.finalize(r.controller, sc_.seed);
    std::ostringstream sum, veh, ts;
    write_summary_csv(sum, r.kpis);
    metrics_.write_vehicles_csv(veh);
    metrics_.write_timeseries_csv(ts);
    r.summary_csv = sum.str();
    r.vehicles_csv = veh.str();
    r.timeseries_csv = ts.str();
    r.spawns_csv = spawn_log_.str();
    r.ticks = step_;
    r.drained = empty();
    r.final_hash = world_hash();
    if (platoons_) {
      r.max_platoon_size = platoons_->max_size_observed();
      r.mixed_movement_merges = platoons_->merged_mixed_movements();
    }
    r.max_platoon_by_stage = stage_max_platoon_;
    r.interlock_holds = interlock_holds_;
    r.evs = evs_;
    r.crossings = crossings_;
    if (const auto* sig = dynamic_cast<const SignalController*>(controller_.get()))
      r.signal_preemptions = sig->preemptions();
    if (!r.drained)
      spdlog::warn("{} seed {}: {} vehicles still present after the drain", r.controller, sc_.seed,
                   in_world_not_departed() + gen_.backlog_size());
    return r;
  }

 private:
  void spawn(SimTime t) {
    std::vector<Arrival> fresh;
    if (sc_.demand_enabled) fresh = gen_.generate(t);
    while (next_script_ < sc_.script.size() &&
           std::llround(sc_.script[next_script_].t / sc_.dt) <= t.step) {
      const ScriptedArrival& s = sc_.script[next_script_++];
      Arrival a{script_id_++, t.step, s.lane, s.vclass, {sc_.geometry.approach_of(s.lane), s.turn}};
      gen_.backlog(s.lane).push_back(a);
      fresh.push_back(a);
    }
    for (const Arrival& a : fresh) {
      write_spawn(spawn_log_, a);
      if (traces_.spawns) write_spawn(*traces_.spawns, a);
      metrics_.on_arrival();
    }

    const auto& lim = sc_.kinematics.limits;
    for (LaneId lane = 0; lane < static_cast<LaneId>(lanes_.size()); ++lane) {
      auto& backlog = gen_.backlog(lane);
      if (backlog.empty()) continue;
      double speed = lim.v_max;
      if (!lanes_[lane].empty()) {
        const Vehicle& last = vehicles_.at(lanes_[lane].back());
        const double gap = last.rear();
        if (gap < sc_.vehicle_length + sc_.kinematics.gap_min) continue;  // entry blocked
        const double room = gap - sc_.kinematics.gap_min + stopping_distance(last.speed, lim.b_max);
        speed = std::min(speed, max_speed_within(room, lim.b_max, sc_.dt));
        speed = std::min(speed, individual_follow_cap(last, gap));
      }
      const Arrival a = backlog.front();
      backlog.pop_front();
      Vehicle v;
      v.id = a.id;
      v.vclass = a.vclass;
      v.movement = a.movement;
      v.lane = lane;
      v.pos = 0.0;
      v.speed = speed;
      v.length = sc_.vehicle_length;
      v.spawn_time = t.seconds();
      vehicles_.emplace(v.id, v);
      lanes_[lane].push_back(v.id);
      metrics_.on_spawn(v);
    }
  }

  double individual_follow_cap(const Vehicle& leader, double gap) const {
    const auto& k = sc_.kinematics;
    // Speed whose time headway fits the available gap.
    return std::max(0.0, std::min(k.limits.v_max,
                                  leader.speed + k.k_gap * (gap - k.individual_min_gap) /
                                                     (1.0 + k.k_gap * k.individual_headway)));
  }

  std::pair<ZoneSnapshot, std::vector<Ack>> communicate(SimTime t) {
    std::vector<Vehicle> in_order;
    for (const auto& lane : lanes_)
      for (VehicleId id : lane) in_order.push_back(vehicles_.at(id));
    for (Beacon& b : broadcast_beacons(in_order, sc_.geometry, t)) bus_.post(b);

    std::vector<Beacon> beacons;
    std::vector<Ack> acks;
    for (auto& m : bus_.drain()) {
      if (traces_.messages) write_message_trace(*traces_.messages, m);
      if (auto* b = std::get_if<Beacon>(&m))
        beacons.push_back(*b);
      else
        acks.push_back(std::get<Ack>(m));
    }
    ZoneSnapshot snap = rsu_collect(beacons);
    for (VehicleId ev : snap.evs)
      if (!seen_evs_.contains(ev)) {
        seen_evs_.insert(ev);
        evs_.push_back({ev, vehicles_.at(ev).lane, t.seconds(), std::nullopt});
      }
    for (const Ack& a : acks)
      for (EvTimeline& e : evs_)
        if (e.ev == a.sender) e.ack_s = t.seconds();
    return {std::move(snap), std::move(acks)};
  }

  void flush_platoon_events(SimTime t) {
    const auto& events = platoons_->events();
    for (; platoon_event_cursor_ < events.size(); ++platoon_event_cursor_) {
      const PlatoonEvent& e = events[platoon_event_cursor_];
      if (traces_.platoon) write_platoon_event(*traces_.platoon, e);
      const double now = t.seconds();
      if (sc_.demand_enabled && now < sc_.demand.total_duration() - 1e-9) {
        int& m = stage_max_platoon_[sc_.demand.stage_index(now)];
        m = std::max(m, e.size);
      }
    }
    // Events are only needed once written.
    if (platoon_event_cursor_ > 4096) {
      platoons_->clear_events();
      platoon_event_cursor_ = 0;
    }
  }

  /// Approach currently holding the conflict box, if any.
  std::optional<Approach> box_owner() const {
    for (const auto& lane : lanes_)
      for (VehicleId id : lane) {
        const Vehicle& v = vehicles_.at(id);
        if (inside_box(v, sc_.geometry)) return v.movement.approach;
      }
    return std::nullopt;
  }

  /// In the box, or past the point where it could still stop at the line.
  bool committed_to_box(const Vehicle& v) const {
    if (inside_box(v, sc_.geometry)) return true;
    const double d = distance_to_stop_line(v, sc_.geometry);
    return d >= 0.0 && !can_stop_within(d, v.speed, sc_.kinematics.limits.b_max, sc_.dt);
  }

  /// Box interlock. Every vehicle is integrated tentatively; if that leaves
  /// two approaches committed to the box, the vehicles of the losing
  /// approach that could still stop are held at the line and the tick is
  /// integrated again. The approach already committed before the tick wins,
  /// otherwise the one whose vehicle is furthest through the line.
  void integrate_all(const CommandMap& commands) {
    const double v_max = sc_.kinematics.limits.v_max;
    std::optional<Approach> owner = box_owner();
    for (const auto& lane : lanes_)
      for (VehicleId id : lane)
        if (!owner && committed_to_box(vehicles_.at(id))) owner = vehicles_.at(id).movement.approach;

    std::set<VehicleId> held;
    auto can_hold = [&](const Vehicle& v) {
      const double d = distance_to_stop_line(v, sc_.geometry);
      return d >= 0.0 && can_stop_within(d, v.speed, sc_.kinematics.limits.b_max, sc_.dt);
    };
    if (owner)
      for (const auto& [id, v] : vehicles_)
        if (v.movement.approach != *owner && can_hold(v)) held.insert(id);

    std::map<VehicleId, Vehicle> next;
    for (int round = 0; round < 4; ++round) {
      next.clear();
      for (const auto& lane : lanes_) {
        const Vehicle* leader = nullptr;
        for (VehicleId id : lane) {
          const Vehicle& v = vehicles_.at(id);
          auto it = commands.find(id);
          MotionCommand cmd = it == commands.end() ? MotionCommand::target_speed(v_max) : it->second;
          if (cmd.kind == MotionCommand::Kind::FollowLeader && leader == nullptr)
            cmd = MotionCommand::target_speed(v_max);
          if (held.count(id)) cmd.hold_at_line = true;
          leader = &next.insert_or_assign(
                             id, integrate(v, cmd, leader, sc_.dt, sc_.geometry, sc_.kinematics))
                        .first->second;
        }
      }
      // Committed approaches after this tentative step, keyed by the
      // furthest distance any of their vehicles has gone past the line.
      std::map<Approach, double> claim;
      for (const auto& [id, v] : next)
        if (committed_to_box(v)) {
          const double past = -distance_to_stop_line(v, sc_.geometry);
          auto [it, fresh] = claim.try_emplace(v.movement.approach, past);
          if (!fresh) it->second = std::max(it->second, past);
        }
      if (claim.size() <= 1) break;
      Approach winner = owner ? *owner : claim.begin()->first;
      if (!owner)
        for (const auto& [a, past] : claim)
          if (past > claim.at(winner)) winner = a;
      owner = winner;
      bool grew = false;
      for (const auto& [id, v] : vehicles_)
        if (v.movement.approach != winner && can_hold(v)) grew |= held.insert(id).second;
      if (!grew) break;  // nothing left to hold; the safety check reports it
    }

    for (VehicleId id : held) {
      const Vehicle& v = vehicles_.at(id);
      auto it = commands.find(id);
      const bool stopping = it != commands.end() && (it->second.hold_at_line ||
                                                     it->second.kind == MotionCommand::Kind::StopAtLine);
      const double d = distance_to_stop_line(v, sc_.geometry);
      if (!stopping && d < stopping_distance(v.speed, sc_.kinematics.limits.b_max) + v.speed * sc_.dt + 0.5)
        ++interlock_holds_;
    }
    for (auto& [id, v] : next) vehicles_.at(id) = v;
  }

  void post_step(SimTime t) {
    const double now = t.seconds();
    const auto& g = sc_.geometry;
    std::int64_t in_zone = 0;
    std::optional<Approach> box;
    for (auto& lane : lanes_) {
      const Vehicle* ahead = nullptr;
      for (VehicleId id : lane) {
        Vehicle& v = vehicles_.at(id);
        if (ahead != nullptr && bumper_gap(*ahead, v) < 0.0)
          throw SafetyViolation(fmt::format("t={:.1f}: rear-end overlap between {} and {}", now,
                                            ahead->id, v.id));
        ahead = &v;
        if (inside_box(v, g)) {
          if (box && *box != v.movement.approach)
            throw SafetyViolation(fmt::format("t={:.1f}: conflict box shared by {} and {}", now,
                                              to_string(*box), to_string(v.movement.approach)));
          box = v.movement.approach;
        }
        if (inside_control_zone(v, g)) {
          ++in_zone;
          metrics_.accumulate_wait(v, sc_.dt);
        }
        if (!crossed_.contains(id) && v.pos > g.approach_length) {
          crossed_.insert(id);
          metrics_.on_cross(v, now);
          crossings_.push_back({id, v.lane, v.vclass, now});
        }
        if (!departed_.contains(id) && rear_cleared_box(v, g)) {
          departed_.insert(id);
          metrics_.on_departure(v, now);
          if (v.is_emergency())
            if (auto ack = emit_ack_if_cleared(v, g, t, acked_)) bus_.post(*ack);
        }
      }
    }

    // Vehicles far enough downstream and outside any platoon leave.
    for (auto& lane : lanes_) {
      while (!lane.empty()) {
        const Vehicle& v = vehicles_.at(lane.front());
        if (v.platoon || v.rear() - g.box_end() <= sc_.exit_length) break;
        departed_.erase(v.id);
        crossed_.erase(v.id);
        vehicles_.erase(lane.front());
        lane.erase(lane.begin());
        ++removed_;
      }
    }

    const std::int64_t arrivals = metrics_.cum_arrivals();
    if (arrivals != in_world_not_departed() + metrics_.cum_departures() + gen_.backlog_size())
      throw SafetyViolation(fmt::format("t={:.1f}: vehicle conservation broken", now));
    metrics_.sample(t, in_zone);
  }

  [[nodiscard]] std::int64_t in_world_not_departed() const {
    return static_cast<std::int64_t>(vehicles_.size()) - static_cast<std::int64_t>(departed_.size());
  }

  Scenario sc_;
  TraceSinks traces_;
  TrafficGenerator gen_;
  MetricsCollector metrics_;
  std::unique_ptr<Controller> controller_;
  std::optional<PlatoonManager> platoons_;
  std::vector<std::vector<VehicleId>> lanes_;
  VehicleTable vehicles_;
  MessageBus bus_;
  std::set<VehicleId> acked_, seen_evs_, crossed_, departed_;
  std::vector<EvTimeline> evs_;
  std::vector<CrossingEvent> crossings_;
  std::vector<int> stage_max_platoon_;
  std::ostringstream spawn_log_;
  std::size_t next_script_ = 0;
  VehicleId script_id_ = 1'000'000'000;
  std::size_t platoon_event_cursor_ = 0;
  std::int64_t step_ = 0;
  std::int64_t interlock_holds_ = 0;
  std::int64_t removed_ = 0;
};

inline RunResult run_scenario(const Scenario& s, TraceSinks traces = {}) {
  Simulation sim(s, traces);
  return sim.run();
}

// --- comparison ----------------------------------------------------------------

inline std::vector<std::uint64_t> parse_seed_list(std::string_view spec) {
  std::vector<std::uint64_t> out;
  for (const std::string& item : detail::split(spec, ',')) {
    if (item.empty()) throw ConfigError("empty seed entry");
    if (auto dots = item.find(".."); dots != std::string::npos) {
      const auto lo = detail::to_int("seeds", item.substr(0, dots));
      const auto hi = detail::to_int("seeds", item.substr(dots + 2));
      if (lo > hi || lo < 0) throw ConfigError("bad seed range '" + item + "'");
      for (auto s = lo; s <= hi; ++s) out.push_back(static_cast<std::uint64_t>(s));
    } else {
      const auto v = detail::to_int("seeds", item);
      if (v < 0) throw ConfigError("negative seed");
      out.push_back(static_cast<std::uint64_t>(v));
    }
  }
  return out;
}

/// Seed-averaged value of one KPI for (controller, stage); empty when no
/// seed produced a value.
struct KpiMean {
  std::string controller;
  std::string stage;
  std::optional<double> mean_wait_normal_s, mean_wait_ev_s;
  double mean_queue_veh = 0.0, peak_queue_veh = 0.0, throughput_pcu_ln_hr = 0.0;
};

inline std::vector<KpiMean> seed_average(const std::vector<RunResult>& runs) {
  std::map<std::pair<std::string, std::string>, std::vector<const KpiRecord*>> groups;
  std::vector<std::pair<std::string, std::string>> order;
  for (const RunResult& r : runs)
    for (const KpiRecord& k : r.kpis) {
      auto key = std::make_pair(k.controller, k.stage);
      if (!groups.contains(key)) order.push_back(key);
      groups[key].push_back(&k);
    }
  std::vector<KpiMean> out;
  for (const auto& key : order) {
    const auto& ks = groups[key];
    KpiMean m{key.first, key.second, {}, {}, 0, 0, 0};
    auto avg_opt = [&](auto field) -> std::optional<double> {
      double s = 0;
      int n = 0;
      for (const KpiRecord* k : ks)
        if ((k->*field)) {
          s += *(k->*field);
          ++n;
        }
      if (n == 0) return std::nullopt;
      return s / n;
    };
    auto avg = [&](auto field) {
      double s = 0;
      for (const KpiRecord* k : ks) s += k->*field;
      return s / static_cast<double>(ks.size());
    };
    m.mean_wait_normal_s = avg_opt(&KpiRecord::mean_wait_normal_s);
    m.mean_wait_ev_s = avg_opt(&KpiRecord::mean_wait_ev_s);
    m.mean_queue_veh = avg(&KpiRecord::mean_queue_veh);
    m.peak_queue_veh = avg(&KpiRecord::peak_queue_veh);
    m.throughput_pcu_ln_hr = avg(&KpiRecord::throughput_pcu_ln_hr);
    out.push_back(std::move(m));
  }
  return out;
}

inline const KpiMean* find_mean(const std::vector<KpiMean>& means, std::string_view controller,
                                std::string_view stage) {
  for (const KpiMean& m : means)
    if (m.controller == controller && m.stage == stage) return &m;
  return nullptr;
}

/// Plain-text ranking, best first, per KPI per stage.
inline std::string ranking_report(const std::vector<KpiMean>& means) {
  std::vector<std::string> stages, controllers;
  for (const KpiMean& m : means) {
    if (std::find(stages.begin(), stages.end(), m.stage) == stages.end()) stages.push_back(m.stage);
    if (std::find(controllers.begin(), controllers.end(), m.controller) == controllers.end())
      controllers.push_back(m.controller);
  }
  struct Kpi {
    const char* name;
    std::function<std::optional<double>(const KpiMean&)> get;
    bool higher_is_better;
  };
  const std::vector<Kpi> kpis{
      {"mean_wait_normal_s", [](const KpiMean& m) { return m.mean_wait_normal_s; }, false},
      {"mean_wait_ev_s", [](const KpiMean& m) { return m.mean_wait_ev_s; }, false},
      {"mean_queue_veh", [](const KpiMean& m) { return std::optional(m.mean_queue_veh); }, false},
      {"throughput_pcu_ln_hr", [](const KpiMean& m) { return std::optional(m.throughput_pcu_ln_hr); }, true},
  };
  std::ostringstream os;
  for (const Kpi& k : kpis) {
    os << k.name << "\n";
    for (const std::string& st : stages) {
      std::vector<std::pair<double, std::string>> row;
      for (const std::string& c : controllers)
        if (const KpiMean* m = find_mean(means, c, st))
          if (auto v = k.get(*m)) row.emplace_back(*v, c);
      std::stable_sort(row.begin(), row.end(), [&](const auto& a, const auto& b) {
        return k.higher_is_better ? a.first > b.first : a.first < b.first;
      });
      os << fmt::format("  {:<10}", st);
      for (std::size_t i = 0; i < row.size(); ++i)
        os << fmt::format("{}{} {:.3f}", i ? "  >  " : "", row[i].second, row[i].first);
      if (row.empty()) os << "(no data)";
      os << "\n";
    }
  }
  return os.str();
}

/// Runs every (controller, seed) pair. Runs are independent so they go to
/// worker threads; results come back in (controller, seed) order.
inline std::vector<RunResult> run_cross_product(const Scenario& base,
                                                const std::vector<ControllerKind>& controllers,
                                                const std::vector<std::uint64_t>& seeds,
                                                unsigned workers = std::thread::hardware_concurrency()) {
  if (controllers.empty() || seeds.empty()) throw ConfigError("compare needs controllers and seeds");
  base.validate();
  std::vector<Scenario> jobs;
  for (ControllerKind c : controllers)
    for (std::uint64_t seed : seeds) {
      Scenario s = base;
      s.controller = c;
      s.seed = seed;
      jobs.push_back(std::move(s));
    }
  std::vector<RunResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::future<void>> pool;
  for (unsigned w = 0; w < std::max(1u, workers); ++w)
    pool.push_back(std::async(std::launch::async, [&] {
      for (std::size_t i = next++; i < jobs.size(); i = next++) results[i] = run_scenario(jobs[i]);
    }));
  for (auto& f : pool) f.get();  // rethrows the first failure
  return results;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

inline void write_run_outputs(const std::filesystem::path& dir, const RunResult& r) {
  std::filesystem::create_directories(dir);
  write_text(dir / "summary.csv", r.summary_csv);
  write_text(dir / "vehicles.csv", r.vehicles_csv);
  write_text(dir / "timeseries.csv", r.timeseries_csv);
  write_text(dir / "spawns.csv", "tick,vehicle_id,lane,class,turn\n" + r.spawns_csv);
}

}  // namespace vtlev

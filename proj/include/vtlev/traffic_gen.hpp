#pragma once

// Seeded stochastic demand. Arrivals are Bernoulli(lambda*dt) per tick and
// lane; each lane owns its own generator so lanes never perturb each other.

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "vtlev/core_model.hpp"

namespace vtlev {

/// splitmix64 finaliser; used only to derive substream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

enum class StreamPurpose : std::uint64_t { Arrivals = 1, Scripted = 2 };

/// mt19937_64 keyed by (seed, purpose, lane). Both the engine and the
/// seeding are fully specified by the C++ standard, so draws are identical
/// on every conforming platform.
class Rng {
 public:
  Rng(std::uint64_t seed, StreamPurpose purpose, std::uint64_t lane)
      : eng_(splitmix64(splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(purpose)) ^ lane)) {}

  /// Uniform in [0, 1) with 53 random bits. std::uniform_real_distribution
  /// is implementation-defined, so it is avoided.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

 private:
  std::mt19937_64 eng_;
};

struct DemandStage {
  double volume = 400.0;    // pcu/ln/hr
  double duration = 600.0;  // s
};

struct DemandProfile {
  std::vector<DemandStage> stages{{400, 600}, {800, 600}, {1600, 600}, {800, 600}, {400, 600}};
  double ev_share = 0.01;
  std::array<double, 3> turn_mix{0.7, 0.15, 0.15};  // Through, Left, Right

  void validate() const {
    if (stages.empty()) throw ContractError("demand needs at least one stage");
    for (const DemandStage& s : stages) {
      if (!(s.volume > 0.0)) throw ContractError("stage volume must be > 0");
      if (!(s.duration > 0.0)) throw ContractError("stage duration must be > 0");
    }
    if (!(ev_share >= 0.0 && ev_share <= 1.0)) throw ContractError("ev_share must lie in [0,1]");
    double sum = 0.0;
    for (double p : turn_mix) {
      if (p < 0.0) throw ContractError("turn_mix entries must be >= 0");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ContractError("turn_mix must sum to 1");
  }

  [[nodiscard]] double total_duration() const {
    double t = 0.0;
    for (const DemandStage& s : stages) t += s.duration;
    return t;
  }

  /// Stage containing t; boundaries belong to the later stage.
  [[nodiscard]] std::size_t stage_index(double t) const {
    if (t < 0.0) throw ContractError("stage_index: t < 0");
    double end = 0.0;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      end += stages[i].duration;
      if (t < end - 1e-9) return i;
    }
    return stages.size() - 1;
  }

  [[nodiscard]] double stage_start(std::size_t i) const {
    double t = 0.0;
    for (std::size_t k = 0; k < i; ++k) t += stages[k].duration;
    return t;
  }
};

/// Arrivals per second per lane at time t.
inline double stage_rate(const DemandProfile& profile, double t) {
  if (t < 0.0 || t >= profile.total_duration() - 1e-9)
    throw ContractError("stage_rate: t outside the demand horizon");
  return profile.stages[profile.stage_index(t)].volume / 3600.0;
}

inline int draw_arrivals(double lambda, double dt, Rng& rng) {
  const double p = lambda * dt;
  if (!(p >= 0.0) || p >= 1.0)
    throw ContractError(fmt::format("lambda*dt = {} must lie in [0,1)", p));
  return rng.uniform() < p ? 1 : 0;
}

inline VehicleClass assign_class(double ev_share, Rng& rng) {
  return rng.uniform() < ev_share ? VehicleClass::Emergency : VehicleClass::Normal;
}

inline Movement assign_route(const std::array<double, 3>& turn_mix, Approach approach, Rng& rng) {
  const double u = rng.uniform();
  Turn t = Turn::Right;
  if (u < turn_mix[0])
    t = Turn::Through;
  else if (u < turn_mix[0] + turn_mix[1])
    t = Turn::Left;
  return {approach, t};
}

/// A generated vehicle not yet placed on the road.
struct Arrival {
  VehicleId id = 0;
  std::int64_t tick = 0;
  LaneId lane = 0;
  VehicleClass vclass = VehicleClass::Normal;
  Movement movement;
};

inline void write_spawn_header(std::ostream& os) { os << "tick,vehicle_id,lane,class,turn\n"; }

inline void write_spawn(std::ostream& os, const Arrival& a) {
  os << fmt::format("{},{},{},{},{}\n", a.tick, a.id, a.lane, to_string(a.vclass),
                    to_string(a.movement.turn));
}

/// Demand for all lanes. Class and route are drawn at generation time from
/// the lane's stream, and ids are handed out in (tick, lane) order, so the
/// whole arrival sequence is independent of what happens on the road.
class TrafficGenerator {
 public:
  TrafficGenerator(DemandProfile profile, const IntersectionGeometry& g, std::uint64_t seed)
      : profile_(std::move(profile)), geometry_(g) {
    profile_.validate();
    for (LaneId lane = 0; lane < g.lane_count(); ++lane)
      lanes_.push_back({Rng(seed, StreamPurpose::Arrivals, static_cast<std::uint64_t>(lane)), {}});
  }

  [[nodiscard]] const DemandProfile& profile() const { return profile_; }

  /// Draws this tick's arrivals and appends them to each lane's backlog.
  /// Past the demand horizon nothing arrives.
  std::vector<Arrival> generate(SimTime t) {
    std::vector<Arrival> out;
    const double now = t.seconds();
    if (now >= profile_.total_duration() - 1e-9) return out;
    const double lambda = stage_rate(profile_, now);
    for (LaneId lane = 0; lane < static_cast<LaneId>(lanes_.size()); ++lane) {
      LaneState& ls = lanes_[lane];
      if (draw_arrivals(lambda, t.dt, ls.rng) == 0) continue;
      Arrival a;
      a.id = next_id_++;
      a.tick = t.step;
      a.lane = lane;
      a.vclass = assign_class(profile_.ev_share, ls.rng);
      a.movement = assign_route(profile_.turn_mix, geometry_.approach_of(lane), ls.rng);
      ls.backlog.push_back(a);
      out.push_back(a);
    }
    return out;
  }

  [[nodiscard]] std::deque<Arrival>& backlog(LaneId lane) { return lanes_.at(lane).backlog; }

  [[nodiscard]] std::int64_t backlog_size() const {
    std::int64_t n = 0;
    for (const LaneState& ls : lanes_) n += static_cast<std::int64_t>(ls.backlog.size());
    return n;
  }
  [[nodiscard]] std::int64_t generated() const { return next_id_ - 1; }

 private:
  struct LaneState {
    Rng rng;
    std::deque<Arrival> backlog;
  };

  DemandProfile profile_;
  IntersectionGeometry geometry_;
  std::vector<LaneState> lanes_;
  VehicleId next_id_ = 1;
};

}  // namespace vtlev

#pragma once

// Idealised V2I channel: per-tick beacons from vehicles to the RSU, and the
// clearance acknowledgement an emergency vehicle sends once it is through.

#include <algorithm>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <variant>
#include <vector>

#include <fmt/format.h>

#include "vtlev/core_model.hpp"

namespace vtlev {

struct Beacon {
  VehicleId sender = 0;
  double pos = 0.0;
  double speed = 0.0;
  VehicleClass vclass = VehicleClass::Normal;
  LaneId lane = 0;
  SimTime timestamp;
};

struct Ack {
  VehicleId sender = 0;
  SimTime timestamp;
};

/// One beacon per vehicle inside the control radius (inclusive bound).
inline std::vector<Beacon> broadcast_beacons(std::span<const Vehicle> vehicles,
                                             const IntersectionGeometry& g,
                                             SimTime t) {
  std::vector<Beacon> out;
  out.reserve(vehicles.size());
  for (const Vehicle& v : vehicles) {
    if (!inside_control_zone(v, g)) continue;
    out.push_back({v.id, v.pos, v.speed, v.vclass, v.lane, t});
  }
  return out;
}

/// What the ITC sees each tick: per-lane beacons sorted by distance to the
/// stop line (nearest first) and the emergency vehicles among them.
struct ZoneSnapshot {
  std::map<LaneId, std::vector<Beacon>> lanes;
  std::vector<VehicleId> evs;

  [[nodiscard]] bool empty() const { return lanes.empty(); }
};

inline ZoneSnapshot rsu_collect(std::span<const Beacon> beacons) {
  ZoneSnapshot snap;
  for (const Beacon& b : beacons) {
    snap.lanes[b.lane].push_back(b);
    if (b.vclass == VehicleClass::Emergency) snap.evs.push_back(b.sender);
  }
  // Nearest to the stop line first == largest position first.
  for (auto& [lane, list] : snap.lanes) {
    std::stable_sort(list.begin(), list.end(), [](const Beacon& a, const Beacon& b) {
      if (a.pos != b.pos) return a.pos > b.pos;
      return a.sender < b.sender;
    });
  }
  std::sort(snap.evs.begin(), snap.evs.end());
  return snap;
}

/// Returns an Ack the first time the EV's rear is past the conflict box;
/// `acked` remembers which EVs have already reported.
inline std::optional<Ack> emit_ack_if_cleared(const Vehicle& ev,
                                              const IntersectionGeometry& g,
                                              SimTime t,
                                              std::set<VehicleId>& acked) {
  if (!ev.is_emergency())
    throw ContractError("emit_ack_if_cleared called for a Normal vehicle");
  if (!rear_cleared_box(ev, g) || acked.contains(ev.id)) return std::nullopt;
  acked.insert(ev.id);
  return Ack{ev.id, t};
}

/// In-process, lossless, zero-delay queue between vehicles and the ITC.
/// Drained once per tick in posting order.
class MessageBus {
 public:
  using Message = std::variant<Beacon, Ack>;

  void post(Message m) { queue_.push_back(std::move(m)); }

  std::vector<Message> drain() {
    std::vector<Message> out;
    out.swap(queue_);
    return out;
  }

  [[nodiscard]] std::size_t pending() const { return queue_.size(); }

 private:
  std::vector<Message> queue_;
};

/// `tick,type,sender,lane,pos_m,speed_mps,vclass`
inline void write_message_trace(std::ostream& os, const MessageBus::Message& m) {
  if (const auto* b = std::get_if<Beacon>(&m)) {
    os << fmt::format("{},Beacon,{},{},{:.6f},{:.6f},{}\n", b->timestamp.step,
                      b->sender, b->lane, b->pos, b->speed, to_string(b->vclass));
  } else {
    const auto& a = std::get<Ack>(m);
    os << fmt::format("{},Ack,{},,,,Emergency\n", a.timestamp.step, a.sender);
  }
}

}  // namespace vtlev

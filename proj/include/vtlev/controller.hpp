#pragma once

// Interface every intersection controller implements. The engine builds a
// ControlContext each tick and applies the returned per-vehicle commands.

#include <memory>
#include <ostream>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vtlev/comms.hpp"
#include "vtlev/core_model.hpp"
#include "vtlev/kinematics.hpp"
#include "vtlev/platooning.hpp"

namespace vtlev {

struct ControlContext {
  SimTime now;
  const IntersectionGeometry& geometry;
  const KinematicsParams& kinematics;
  const VehicleTable& vehicles;
  const std::vector<std::vector<VehicleId>>& lanes;  // front first
  const ZoneSnapshot& snapshot;
  std::span<const Ack> acks;
  PlatoonManager* platoons = nullptr;  // null when platooning is off
};

using CommandMap = std::unordered_map<VehicleId, MotionCommand>;

class Controller {
 public:
  virtual ~Controller() = default;

  [[nodiscard]] virtual std::string_view name() const = 0;
  [[nodiscard]] virtual bool uses_platooning() const = 0;
  [[nodiscard]] virtual bool preempting() const = 0;

  /// Commands for vehicles that need one; anything absent drives at v_max
  /// subject to car-following.
  virtual CommandMap control(const ControlContext& ctx) = 0;

  /// Optional trace sink (schedule trace for reservation control, signal
  /// trace for the signal baselines).
  void set_trace(std::ostream* os) { trace_ = os; }

 protected:
  std::ostream* trace_ = nullptr;
};

}  // namespace vtlev

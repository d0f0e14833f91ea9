#pragma once

// Shared domain types and intersection geometry.

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>

namespace vtlev {

using VehicleId = std::int64_t;
using PlatoonId = std::int64_t;
using LaneId = int;

/// Raised when a caller breaks a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when the simulated world violates a safety invariant (collision,
/// two approaches inside the conflict box). Violations are bugs, not states.
class SafetyViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class VehicleClass : std::uint8_t { Normal, Emergency };

/// Approaches are numbered clockwise so that turning is modular arithmetic.
enum class Approach : std::uint8_t { N = 0, E = 1, S = 2, W = 3 };

enum class Turn : std::uint8_t { Through, Left, Right };

inline constexpr std::array<Approach, 4> kApproaches{Approach::N, Approach::E,
                                                     Approach::S, Approach::W};

struct Movement {
  Approach approach = Approach::N;
  Turn turn = Turn::Through;

  /// Leg the vehicle leaves on (right-hand traffic).
  [[nodiscard]] constexpr Approach exit() const {
    const int a = static_cast<int>(approach);
    int offset = 2;
    if (turn == Turn::Left) offset = 1;
    if (turn == Turn::Right) offset = 3;
    return static_cast<Approach>((a + offset) % 4);
  }

  friend constexpr auto operator<=>(const Movement&, const Movement&) = default;
};

inline std::string_view to_string(VehicleClass c) {
  return c == VehicleClass::Emergency ? "Emergency" : "Normal";
}

inline std::string_view to_string(Approach a) {
  switch (a) {
    case Approach::N: return "N";
    case Approach::E: return "E";
    case Approach::S: return "S";
    case Approach::W: return "W";
  }
  return "?";
}

inline std::string_view to_string(Turn t) {
  switch (t) {
    case Turn::Through: return "Through";
    case Turn::Left: return "Left";
    case Turn::Right: return "Right";
  }
  return "?";
}

/// Kinematic limits shared by every vehicle.
struct DynamicsLimits {
  double v_max = 13.89;  // m/s
  double a_max = 2.5;    // m/s^2
  double b_max = 4.5;    // m/s^2, magnitude
};

struct Vehicle {
  VehicleId id = 0;
  VehicleClass vclass = VehicleClass::Normal;
  Movement movement;
  LaneId lane = 0;
  double pos = 0.0;    // front bumper, metres from approach entry
  double speed = 0.0;  // m/s
  double accel = 0.0;  // m/s^2
  double length = 3.0;
  double spawn_time = 0.0;
  std::optional<PlatoonId> platoon;

  [[nodiscard]] double rear() const { return pos - length; }
  [[nodiscard]] bool is_emergency() const {
    return vclass == VehicleClass::Emergency;
  }
};

using VehicleTable = std::unordered_map<VehicleId, Vehicle>;

struct IntersectionGeometry {
  double approach_length = 300.0;  // entry to stop line
  double box_length = 20.0;        // stop line to far side of the conflict zone
  double control_radius = 300.0;   // ITC zone, measured back from the stop line
  int lanes_per_approach = 1;

  void validate() const {
    if (!(box_length > 0.0)) throw ContractError("box_length must be > 0");
    if (!(approach_length > 0.0))
      throw ContractError("approach_length must be > 0");
    if (!(control_radius > 0.0) || control_radius > approach_length)
      throw ContractError("control_radius must lie in (0, approach_length]");
    if (lanes_per_approach < 1)
      throw ContractError("lanes_per_approach must be >= 1");
  }

  [[nodiscard]] int lane_count() const { return 4 * lanes_per_approach; }
  [[nodiscard]] double box_end() const { return approach_length + box_length; }
  [[nodiscard]] Approach approach_of(LaneId lane) const {
    return static_cast<Approach>(lane / lanes_per_approach);
  }
};

struct SimTime {
  std::int64_t step = 0;
  double dt = 0.1;

  [[nodiscard]] double seconds() const { return static_cast<double>(step) * dt; }
};

/// Signed distance from the vehicle front to the stop line; negative once
/// the front has entered the conflict box.
inline double distance_to_stop_line(const Vehicle& v,
                                    const IntersectionGeometry& g) {
  return g.approach_length - v.pos;
}

/// Single exclusive conflict box: any two different approaches conflict.
/// Ordering within one approach is left to car-following.
constexpr bool movements_conflict(const Movement& a, const Movement& b) {
  return a.approach != b.approach;
}

inline bool inside_box(const Vehicle& v, const IntersectionGeometry& g) {
  return v.pos > g.approach_length && v.rear() <= g.box_end();
}

inline bool rear_cleared_box(const Vehicle& v, const IntersectionGeometry& g) {
  return v.rear() > g.box_end();
}

/// Inside the ITC range and not yet departed.
inline bool inside_control_zone(const Vehicle& v,
                                const IntersectionGeometry& g) {
  return distance_to_stop_line(v, g) <= g.control_radius &&
         !rear_cleared_box(v, g);
}

}  // namespace vtlev

#pragma once

// KPI accumulation: waiting time, queue length (arrivals minus departures)
// and throughput, per demand stage plus a whole-run aggregate.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "vtlev/core_model.hpp"
#include "vtlev/traffic_gen.hpp"

namespace vtlev {

struct MetricsParams {
  double wait_threshold = 0.1;  // m/s
  double sample_s = 1.0;        // timeseries cadence
};

inline bool counts_as_waiting(double speed, const MetricsParams& p) {
  return speed < p.wait_threshold;
}

/// pcu per lane per hour.
inline double throughput(std::int64_t departures, double window_s, int lanes) {
  if (!(window_s > 0.0)) throw ContractError("throughput: empty window");
  if (lanes <= 0) throw ContractError("throughput: no lanes");
  return static_cast<double>(departures) * 3600.0 / (window_s * lanes);
}

struct KpiRecord {
  std::string controller;
  std::uint64_t seed = 0;
  std::string stage;
  std::optional<double> mean_wait_normal_s;
  std::optional<double> mean_wait_ev_s;
  double mean_queue_veh = 0.0;
  double peak_queue_veh = 0.0;
  double throughput_pcu_ln_hr = 0.0;
  std::int64_t n_normal = 0;
  std::int64_t n_ev = 0;
};

inline std::string fixed6(double x) { return fmt::format("{:.6f}", x); }
inline std::string fixed6(const std::optional<double>& x) { return x ? fixed6(*x) : std::string{}; }

inline const char* kSummaryHeader =
    "controller,seed,stage,mean_wait_normal_s,mean_wait_ev_s,mean_queue_veh,peak_queue_veh,"
    "throughput_pcu_ln_hr,n_normal,n_ev\n";

inline void write_summary_row(std::ostream& os, const KpiRecord& r) {
  os << fmt::format("{},{},{},{},{},{},{},{},{},{}\n", r.controller, r.seed, r.stage,
                    fixed6(r.mean_wait_normal_s), fixed6(r.mean_wait_ev_s), fixed6(r.mean_queue_veh),
                    fixed6(r.peak_queue_veh), fixed6(r.throughput_pcu_ln_hr), r.n_normal, r.n_ev);
}

/// Per-vehicle record kept from spawn to exit.
struct VehicleRecord {
  VehicleId id = 0;
  VehicleClass vclass = VehicleClass::Normal;
  Movement movement;
  double spawn_s = 0.0;
  std::optional<double> cross_s;  // front over the stop line
  std::optional<double> exit_s;   // rear clear of the box
  double wait_s = 0.0;
};

struct TimeseriesRow {
  double t_s = 0.0;
  std::int64_t queue = 0;
  std::int64_t in_zone = 0;
  std::int64_t cum_arrivals = 0;
  std::int64_t cum_departures = 0;
};

class MetricsCollector {
 public:
  MetricsCollector(const DemandProfile& demand, int lanes, MetricsParams params = {})
      : demand_(demand), lanes_(lanes), params_(params), stages_(demand.stages.size()) {}

  [[nodiscard]] const MetricsParams& params() const { return params_; }

  void on_spawn(const Vehicle& v) {
    records_.emplace(v.id, VehicleRecord{v.id, v.vclass, v.movement, v.spawn_time, {}, {}, 0.0});
  }
  void on_arrival() { ++cum_arrivals_; }

  void accumulate_wait(const Vehicle& v, double dt) {
    if (counts_as_waiting(v.speed, params_)) records_.at(v.id).wait_s += dt;
  }

  void on_cross(const Vehicle& v, double t) { records_.at(v.id).cross_s = t; }

  void on_departure(const Vehicle& v, double t) {
    records_.at(v.id).exit_s = t;
    ++cum_departures_;
    if (t < demand_.total_duration() - 1e-9) ++stages_[demand_.stage_index(t)].departures;
  }

  [[nodiscard]] std::int64_t queue_length() const { return cum_arrivals_ - cum_departures_; }
  [[nodiscard]] std::int64_t cum_arrivals() const { return cum_arrivals_; }
  [[nodiscard]] std::int64_t cum_departures() const { return cum_departures_; }

  /// Once per tick, after departures, with the tick's end time.
  void sample(SimTime t, std::int64_t in_zone) {
    const std::int64_t q = queue_length();
    if (q < 0) throw SafetyViolation("negative queue length");
    const double now = t.seconds();
    if (now < demand_.total_duration() - 1e-9) {
      StageAcc& s = stages_[demand_.stage_index(now)];
      s.queue_sum += static_cast<double>(q);
      ++s.queue_samples;
      s.peak_queue = std::max(s.peak_queue, q);
    }
    const auto every = std::max<std::int64_t>(1, std::llround(params_.sample_s / t.dt));
    if (t.step % every == 0) timeseries_.push_back({now, q, in_zone, cum_arrivals_, cum_departures_});
  }

  [[nodiscard]] const std::map<VehicleId, VehicleRecord>& records() const { return records_; }
  [[nodiscard]] const std::vector<TimeseriesRow>& timeseries() const { return timeseries_; }

  /// One record per stage plus the aggregate ("all"). Waits are attributed
  /// to the stage in which the vehicle crossed the stop line; crossings
  /// after the demand horizon count toward the last stage.
  [[nodiscard]] std::vector<KpiRecord> finalize(const std::string& controller,
                                                std::uint64_t seed) const {
    struct WaitAcc {
      double normal = 0.0, ev = 0.0;
      std::int64_t n_normal = 0, n_ev = 0;
    };
    std::vector<WaitAcc> waits(stages_.size());
    WaitAcc all;
    for (const auto& [id, r] : records_) {
      if (!r.cross_s) continue;
      const std::size_t i = std::min(demand_.stage_index(*r.cross_s), stages_.size() - 1);
      for (WaitAcc* w : {&waits[i], &all}) {
        if (r.vclass == VehicleClass::Emergency) {
          w->ev += r.wait_s;
          ++w->n_ev;
        } else {
          w->normal += r.wait_s;
          ++w->n_normal;
        }
      }
    }
    auto mean = [](double sum, std::int64_t n) -> std::optional<double> {
      if (n == 0) return std::nullopt;
      return sum / static_cast<double>(n);
    };

    std::vector<KpiRecord> out;
    double q_sum = 0.0;
    std::int64_t q_n = 0, q_peak = 0, deps = 0;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const StageAcc& s = stages_[i];
      KpiRecord k;
      k.controller = controller;
      k.seed = seed;
      k.stage = stage_label(i);
      k.mean_wait_normal_s = mean(waits[i].normal, waits[i].n_normal);
      k.mean_wait_ev_s = mean(waits[i].ev, waits[i].n_ev);
      k.mean_queue_veh = s.queue_samples ? s.queue_sum / static_cast<double>(s.queue_samples) : 0.0;
      k.peak_queue_veh = static_cast<double>(s.peak_queue);
      k.throughput_pcu_ln_hr = throughput(s.departures, demand_.stages[i].duration, lanes_);
      k.n_normal = waits[i].n_normal;
      k.n_ev = waits[i].n_ev;
      out.push_back(k);
      q_sum += s.queue_sum;
      q_n += s.queue_samples;
      q_peak = std::max(q_peak, s.peak_queue);
      deps += s.departures;
    }
    KpiRecord k;
    k.controller = controller;
    k.seed = seed;
    k.stage = "all";
    k.mean_wait_normal_s = mean(all.normal, all.n_normal);
    k.mean_wait_ev_s = mean(all.ev, all.n_ev);
    k.mean_queue_veh = q_n ? q_sum / static_cast<double>(q_n) : 0.0;
    k.peak_queue_veh = static_cast<double>(q_peak);
    k.throughput_pcu_ln_hr = throughput(deps, demand_.total_duration(), lanes_);
    k.n_normal = all.n_normal;
    k.n_ev = all.n_ev;
    out.push_back(k);
    return out;
  }

  [[nodiscard]] std::string stage_label(std::size_t i) const {
    return fmt::format("s{}_{}", i + 1, demand_.stages[i].volume);
  }

  void write_vehicles_csv(std::ostream& os) const {
    os << "vehicle_id,class,approach,turn,spawn_s,cross_s,exit_s,wait_s\n";
    for (const auto& [id, r] : records_)
      os << fmt::format("{},{},{},{},{},{},{},{}\n", id, to_string(r.vclass),
                        to_string(r.movement.approach), to_string(r.movement.turn), fixed6(r.spawn_s),
                        fixed6(r.cross_s), fixed6(r.exit_s), fixed6(r.wait_s));
  }

  void write_timeseries_csv(std::ostream& os) const {
    os << "t_s,queue_veh,in_zone,cum_arrivals,cum_departures\n";
    for (const TimeseriesRow& r : timeseries_)
      os << fmt::format("{},{},{},{},{}\n", fixed6(r.t_s), r.queue, r.in_zone, r.cum_arrivals,
                        r.cum_departures);
  }

 private:
  struct StageAcc {
    double queue_sum = 0.0;
    std::int64_t queue_samples = 0;
    std::int64_t peak_queue = 0;
    std::int64_t departures = 0;
  };

  DemandProfile demand_;
  int lanes_;
  MetricsParams params_;
  std::vector<StageAcc> stages_;
  std::map<VehicleId, VehicleRecord> records_;
  std::vector<TimeseriesRow> timeseries_;
  std::int64_t cum_arrivals_ = 0;
  std::int64_t cum_departures_ = 0;
};

inline void write_summary_csv(std::ostream& os, const std::vector<KpiRecord>& rows) {
  os << kSummaryHeader;
  for (const KpiRecord& r : rows) write_summary_row(os, r);
}

}  // namespace vtlev

#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>

#include "vtlev/engine.hpp"

using namespace vtlev;

namespace {

// Short, light run: two stages of 60 s.
Scenario small(ControllerKind c = ControllerKind::VtlEv, std::uint64_t seed = 1) {
  Scenario s;
  s.demand.stages = {{400, 60}, {800, 60}};
  s.horizon_s = 120;
  s.drain_s = 300;
  s.controller = c;
  s.seed = seed;
  return s;
}

Scenario empty_world() {
  Scenario s;
  s.demand_enabled = false;
  s.horizon_s = 10;
  s.drain_s = 0;
  return s;
}

}  // namespace

TEST(ParseScenario, DefaultsAndOverrides) {
  const Scenario s = parse_scenario(
      "# comment\n"
      "seed = 4\n"
      "controller = etlsa\n"
      "demand.stages = 400:300, 1600:200\n"
      "vehicle.v_max = 12  # trailing\n"
      "script.vehicles = 5:1:Emergency:Left, 1:0:Normal:Through\n");
  EXPECT_EQ(s.seed, 4u);
  EXPECT_EQ(s.controller, ControllerKind::Etlsa);
  ASSERT_EQ(s.demand.stages.size(), 2u);
  EXPECT_EQ(s.demand.stages[1].volume, 1600);
  EXPECT_EQ(s.demand.stages[1].duration, 200);
  EXPECT_EQ(s.kinematics.limits.v_max, 12);
  ASSERT_EQ(s.script.size(), 2u);
  EXPECT_EQ(s.script[0].t, 1);  // sorted by time
  EXPECT_EQ(s.script[1].vclass, VehicleClass::Emergency);
  EXPECT_EQ(s.script[1].turn, Turn::Left);
  EXPECT_EQ(s.geometry.box_length, 20);
}

TEST(ParseScenario, StageDurationDefault) {
  const Scenario s = parse_scenario("demand.stage_s = 900\ndemand.stages = 400, 800\n");
  EXPECT_EQ(s.demand.stages[0].duration, 900);
  EXPECT_EQ(s.demand.stages[1].duration, 900);
}

TEST(ParseScenario, Errors) {
  EXPECT_THROW(parse_scenario("nonsense = 1\n"), ConfigError);
  EXPECT_THROW(parse_scenario("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_scenario("dt = fast\n"), ConfigError);
  EXPECT_THROW(parse_scenario("just text\n"), ConfigError);
  EXPECT_THROW(parse_scenario("controller = magic\n"), ConfigError);
  EXPECT_THROW(parse_scenario("script.vehicles = 1:0:Normal\n"), ConfigError);
}

TEST(ScenarioValidate, RejectsImpossibleArrivalProbability) {
  Scenario s;
  s.dt = 1.0;
  s.demand.stages = {{4000, 600}};
  s.horizon_s = 600;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(Simulation{s}, ConfigError);
}

TEST(ScenarioValidate, OtherChecks) {
  Scenario s;
  EXPECT_NO_THROW(s.validate());
  s.horizon_s = 100;  // shorter than the demand
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.dt = 0.3;  // does not divide the 1 s control period
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.geometry.box_length = -1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.demand.ev_share = 2;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(ScenarioFiles, ShippedConfigsParse) {
  const std::filesystem::path dir = VTLEV_SCENARIO_DIR;
  EXPECT_NO_THROW(load_scenario(dir / "default.cfg").validate());
  EXPECT_NO_THROW(load_scenario(dir / "ev_preemption.cfg").validate());
  EXPECT_THROW(load_scenario(dir / "bad_lambda.cfg").validate(), ConfigError);
  EXPECT_THROW(load_scenario(dir / "missing.cfg"), ConfigError);
}

TEST(Simulation, EmptyWorldTickIsANoOp) {
  Simulation sim(empty_world());
  const auto before = sim.vehicles().size();
  sim.tick();
  EXPECT_EQ(sim.vehicles().size(), before);
  EXPECT_EQ(sim.now().step, 1);
  EXPECT_TRUE(sim.empty());
}

TEST(Simulation, LoneVehicleDrivesAtVMax) {
  Scenario s = empty_world();
  s.script = {{0, 0, VehicleClass::Normal, Turn::Through}};
  Simulation sim(s);
  sim.tick();
  ASSERT_EQ(sim.vehicles().size(), 1u);
  const double p0 = sim.vehicles().begin()->second.pos;
  for (int i = 0; i < 50; ++i) sim.tick();
  // Window starts carry a one-tick margin, so "flat out" is a hair below
  // v_max: about one tick lost over the whole approach.
  const Vehicle& v = sim.vehicles().begin()->second;
  EXPECT_NEAR(v.speed, s.kinematics.limits.v_max, 0.1);
  EXPECT_NEAR(v.pos - p0, 50 * 0.1 * s.kinematics.limits.v_max, 0.5);
}

TEST(Simulation, LoneVehicleCrossesWithoutWaiting) {
  Scenario s = empty_world();
  s.horizon_s = 60;
  s.script = {{0, 2, VehicleClass::Normal, Turn::Left}};
  const RunResult r = run_scenario(s);
  ASSERT_EQ(r.crossings.size(), 1u);
  // 300 m at 13.89 m/s, never stopping.
  EXPECT_NEAR(r.crossings[0].t, 300 / 13.89, 0.4);
  EXPECT_NE(r.vehicles_csv.find(",0.000000\n"), std::string::npos);  // zero wait
  EXPECT_TRUE(r.drained);
}

TEST(Simulation, HashIsDeterministicPerTick) {
  Simulation a(small()), b(small());
  for (int i = 0; i < 600; ++i) {
    a.tick();
    b.tick();
    ASSERT_EQ(a.world_hash(), b.world_hash()) << i;
  }
}

TEST(Run, SummaryBytesRepeat) {
  const RunResult a = run_scenario(small());
  const RunResult b = run_scenario(small());
  EXPECT_EQ(a.summary_csv, b.summary_csv);
  EXPECT_EQ(a.vehicles_csv, b.vehicles_csv);
  EXPECT_EQ(a.final_hash, b.final_hash);
  EXPECT_EQ(a.kpis.size(), 3u);
}

TEST(Run, DemandIndependentOfController) {
  const RunResult a = run_scenario(small(ControllerKind::VtlEv, 3));
  const RunResult b = run_scenario(small(ControllerKind::VtlPic, 3));
  const RunResult c = run_scenario(small(ControllerKind::Etlsa, 3));
  EXPECT_FALSE(a.spawns_csv.empty());
  EXPECT_EQ(a.spawns_csv, b.spawns_csv);
  EXPECT_EQ(a.spawns_csv, c.spawns_csv);
}

TEST(Run, DrainsAndConserves) {
  for (ControllerKind k : {ControllerKind::VtlEv, ControllerKind::VtlPic, ControllerKind::Etlsa}) {
    const RunResult r = run_scenario(small(k, 2));
    EXPECT_TRUE(r.drained) << to_string(k);
    const auto& all = r.kpis.back();
    EXPECT_EQ(all.stage, "all");
    // Everything spawned crossed.
    const auto spawned = std::count(r.spawns_csv.begin(), r.spawns_csv.end(), '\n');
    EXPECT_EQ(all.n_normal + all.n_ev, spawned) << to_string(k);
  }
}

TEST(Run, HorizonTicks) {
  Scenario s;
  EXPECT_EQ(s.horizon_ticks(), 30000);
}

TEST(Compare, CrossProductInOrder) {
  const auto runs = run_cross_product(small(), {ControllerKind::VtlEv, ControllerKind::Etlsa}, {1, 2}, 2);
  ASSERT_EQ(runs.size(), 4u);
  EXPECT_EQ(runs[0].controller, "vtl-ev");
  EXPECT_EQ(runs[1].seed, 2u);
  EXPECT_EQ(runs[2].controller, "etlsa");
  const auto means = seed_average(runs);
  EXPECT_EQ(means.size(), 6u);
  const KpiMean* m = find_mean(means, "etlsa", "all");
  ASSERT_NE(m, nullptr);
  EXPECT_NEAR(m->throughput_pcu_ln_hr,
              (runs[2].kpis.back().throughput_pcu_ln_hr + runs[3].kpis.back().throughput_pcu_ln_hr) / 2,
              1e-9);
  const std::string report = ranking_report(means);
  EXPECT_NE(report.find("throughput_pcu_ln_hr"), std::string::npos);
  EXPECT_THROW(run_cross_product(small(), {}, {1}), ConfigError);
}

TEST(SeedList, Parse) {
  EXPECT_EQ(parse_seed_list("1..5"), (std::vector<std::uint64_t>{1, 2, 3, 4, 5}));
  EXPECT_EQ(parse_seed_list("3,7"), (std::vector<std::uint64_t>{3, 7}));
  EXPECT_THROW(parse_seed_list("5..1"), ConfigError);
  EXPECT_THROW(parse_seed_list(""), ConfigError);
}

TEST(Traces, HeadersAndRows) {
  std::ostringstream sched, plat, msgs;
  Scenario s = small();
  s.demand.stages = {{800, 30}};
  s.horizon_s = 30;
  TraceSinks t;
  t.schedule = &sched;
  t.platoon = &plat;
  t.messages = &msgs;
  run_scenario(s, t);
  EXPECT_EQ(sched.str().rfind("tick,platoon_id,lane,window_start_s,window_end_s,event\n", 0), 0u);
  EXPECT_EQ(plat.str().rfind("tick,event,platoon_id,size,reason\n", 0), 0u);
  EXPECT_EQ(msgs.str().rfind("tick,type,sender,lane,pos_m,speed_mps,vclass\n", 0), 0u);
  EXPECT_NE(sched.str().find(",Commit"), std::string::npos);
  EXPECT_NE(plat.str().find(",Formed,"), std::string::npos);
}

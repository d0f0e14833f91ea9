#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "vtlev/comms.hpp"

using namespace vtlev;

namespace {

Vehicle at(VehicleId id, double pos, VehicleClass c = VehicleClass::Normal, LaneId lane = 0) {
  Vehicle v;
  v.id = id;
  v.pos = pos;
  v.vclass = c;
  v.lane = lane;
  return v;
}

}  // namespace

TEST(Beacons, InclusiveControlRadius) {
  const IntersectionGeometry g{400, 20, 300, 1};
  const std::vector<Vehicle> vs{at(1, 150), at(2, 50), at(3, 100)};  // 250, 350, 300 m out
  const auto b = broadcast_beacons(vs, g, {5, 0.1});
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0].sender, 1);
  EXPECT_EQ(b[1].sender, 3);
  EXPECT_EQ(b[0].timestamp.step, 5);
}

TEST(Beacons, DepartedVehiclesAreSilent) {
  const IntersectionGeometry g;
  const std::vector<Vehicle> vs{at(1, 330)};
  EXPECT_TRUE(broadcast_beacons(vs, g, {}).empty());
}

TEST(RsuCollect, Examples) {
  EXPECT_TRUE(rsu_collect({}).empty());

  std::vector<Beacon> one{{9, 100, 5, VehicleClass::Emergency, 2, {}}};
  const auto s1 = rsu_collect(one);
  ASSERT_EQ(s1.evs.size(), 1u);
  EXPECT_EQ(s1.evs[0], 9);

  // 100 m and 50 m to the line on a 300 m approach.
  std::vector<Beacon> two{{1, 200, 5, VehicleClass::Normal, 0, {}},
                          {2, 250, 5, VehicleClass::Normal, 0, {}}};
  const auto s2 = rsu_collect(two);
  ASSERT_EQ(s2.lanes.at(0).size(), 2u);
  EXPECT_EQ(s2.lanes.at(0)[0].sender, 2);
  EXPECT_EQ(s2.lanes.at(0)[1].sender, 1);
  EXPECT_TRUE(s2.evs.empty());
}

TEST(Ack, OnlyOnceRearClears) {
  const IntersectionGeometry g;  // box end at 320
  std::set<VehicleId> acked;
  EXPECT_FALSE(emit_ack_if_cleared(at(5, 300, VehicleClass::Emergency), g, {}, acked));
  EXPECT_FALSE(emit_ack_if_cleared(at(5, 323, VehicleClass::Emergency), g, {}, acked));
  const auto a = emit_ack_if_cleared(at(5, 324, VehicleClass::Emergency), g, {42, 0.1}, acked);
  ASSERT_TRUE(a);
  EXPECT_EQ(a->sender, 5);
  EXPECT_EQ(a->timestamp.step, 42);
  EXPECT_FALSE(emit_ack_if_cleared(at(5, 330, VehicleClass::Emergency), g, {}, acked));
  EXPECT_THROW(emit_ack_if_cleared(at(6, 330), g, {}, acked), ContractError);
}

TEST(MessageBus, DrainsInPostingOrder) {
  MessageBus bus;
  bus.post(Beacon{1, 0, 0, VehicleClass::Normal, 0, {}});
  bus.post(Ack{2, {}});
  EXPECT_EQ(bus.pending(), 2u);
  const auto m = bus.drain();
  ASSERT_EQ(m.size(), 2u);
  EXPECT_TRUE(std::holds_alternative<Beacon>(m[0]));
  EXPECT_TRUE(std::holds_alternative<Ack>(m[1]));
  EXPECT_EQ(bus.pending(), 0u);
}

TEST(MessageTrace, Format) {
  std::ostringstream os;
  write_message_trace(os, Beacon{3, 12.5, 4, VehicleClass::Emergency, 1, {7, 0.1}});
  write_message_trace(os, Ack{3, {9, 0.1}});
  EXPECT_EQ(os.str(),
            "7,Beacon,3,1,12.500000,4.000000,Emergency\n"
            "9,Ack,3,,,,Emergency\n");
}

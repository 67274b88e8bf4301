#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "hetflow/error.hpp"
#include "hetflow/microsim.hpp"
#include "hetflow/trajectory.hpp"

using namespace hetflow;

namespace {

VehicleTrajectory sampled(const std::string& id, double t0, double t1, double dt, auto&& position) {
  VehicleTrajectory t;
  t.vehicle_id = id;
  const auto n = static_cast<std::size_t>(std::llround((t1 - t0) / dt)) + 1;
  for (std::size_t k = 0; k < n; ++k) {
    TrajectorySample s;
    s.time = t0 + static_cast<double>(k) * dt;
    s.position = position(s.time);
    t.samples.push_back(s);
  }
  t.sample_rate = estimate_sample_rate(t.samples);
  return t;
}

Errc error_code(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected hetflow::Error");
  return Errc::InvalidArgument;
}

}  // namespace

TEST_CASE("ingest parses a three-row file for one vehicle") {
  const auto ds = ingest_trajectories_text("vehicle_id,t,x\nA,0.0,0\nA,0.1,1.5\nA,0.2,3.0\n");
  REQUIRE(ds.trajectories.size() == 1);
  const auto& t = ds.trajectories[0];
  CHECK(t.vehicle_id == "A");
  CHECK(t.samples.size() == 3);
  CHECK(t.length == doctest::Approx(5.0));
  CHECK(t.class_label == VehicleClass::Unknown);
  CHECK(t.samples[2].position == doctest::Approx(3.0));
  CHECK(!t.samples[0].speed.has_value());
  CHECK(t.sample_rate == doctest::Approx(10.0));
}

TEST_CASE("ingest error paths") {
  CHECK(error_code([] { ingest_trajectories_text("vehicle_id,t,x\nA,0.2,0\nA,0.1,1\n"); }) == Errc::NonMonotoneTime);
  CHECK(error_code([] { ingest_trajectories_text("vehicle_id,t,x\nA,0.1,0\nA,0.1,1\n"); }) == Errc::NonMonotoneTime);
  CHECK(error_code([] { ingest_trajectories_text("vehicle_id,t,x\nA,zero,0\n"); }) == Errc::MalformedRow);
  CHECK(error_code([] { ingest_trajectories_text("vehicle_id,t,x\nA,0,1,2\n"); }) == Errc::MalformedRow);
  CHECK(error_code([] { ingest_trajectories_text("vehicle_id,t,x\n"); }) == Errc::EmptyDataset);
  CHECK(error_code([] { ingest_trajectories_text(""); }) == Errc::EmptyDataset);
}

TEST_CASE("ingest honours a custom schema and optional columns") {
  CsvSchema schema;
  schema.vehicle_id = "ID";
  schema.time = "time_s";
  schema.position = "pos";
  schema.class_label = "type";
  const auto ds = ingest_trajectories_text(
      "ID,time_s,pos,type,length,lane\n7,0,0,AV,4.5,2\n7,1,10,AV,4.5,2\n8,0,-20,HV,,\n8,1,-5,HV,,\n", schema);
  REQUIRE(ds.trajectories.size() == 2);
  CHECK(ds.trajectories[0].class_label == VehicleClass::AV);
  CHECK(ds.trajectories[0].length == doctest::Approx(4.5));
  CHECK(ds.trajectories[0].samples[0].lane == 2);
  CHECK(ds.trajectories[1].length == doctest::Approx(kDefaultVehicleLength));
  CHECK(!ds.trajectories[1].samples[0].lane.has_value());
}

TEST_CASE("ring simulation output round-trips through the CSV writer") {
  auto scenario = reference_scenario("hv_av1", 10);
  scenario.sim_duration = 20.0;
  const auto simulated = simulate_ring(scenario);

  const auto dir = std::filesystem::temp_directory_path() / "hetflow_roundtrip";
  std::filesystem::create_directories(dir);
  write_trajectories(simulated, dir / "ring.csv");
  CsvSchema schema;
  schema.dataset_id = simulated.dataset_id;
  schema.topology = Topology::Ring;
  schema.road_length = simulated.road_length;
  save_schema(schema, dir / "schema.json");

  const auto reread = ingest_trajectories(dir / "ring.csv", load_schema(dir / "schema.json"));
  CHECK(reread == simulated);
  std::filesystem::remove_all(dir);
}

TEST_CASE("derive_kinematics on linear motion") {
  const auto t = sampled("lin", 0.0, 5.0, 0.1, [](double s) { return 10.0 * s; });
  const auto k = derive_kinematics(t, {0.0, 0.1});
  REQUIRE(k.samples.size() == 51);
  for (std::size_t i = 3; i + 3 < k.samples.size(); ++i) {
    CHECK(*k.samples[i].speed == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(std::abs(*k.samples[i].acceleration) < 1e-9);
    CHECK(std::abs(*k.samples[i].jerk) < 1e-6);
  }
}

TEST_CASE("derive_kinematics is exact for quadratic acceleration") {
  const auto t = sampled("quad", 0.0, 4.0, 0.1, [](double s) { return s * s; });
  const auto k = derive_kinematics(t, {0.0, 0.1});
  for (std::size_t i = 2; i + 2 < k.samples.size(); ++i)
    CHECK(*k.samples[i].acceleration == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("derive_kinematics jerk of sin(t) at 100 Hz matches -cos(t)") {
  const auto t = sampled("sin", 0.0, 10.0, 0.01, [](double s) { return std::sin(s); });
  const auto k = derive_kinematics(t, {0.0, 0.01});
  double worst = 0.0;
  for (std::size_t i = 3; i + 3 < k.samples.size(); ++i)
    worst = std::max(worst, std::abs(*k.samples[i].jerk + std::cos(k.samples[i].time)));
  CHECK(worst <= 1e-3);
}

TEST_CASE("derive_kinematics resamples non-uniform input and rejects short input") {
  VehicleTrajectory t;
  t.vehicle_id = "irregular";
  for (double s : {0.0, 0.13, 0.31, 0.42, 0.77, 1.0}) t.samples.push_back({s, 3.0 * s});
  const auto k = derive_kinematics(t, {0.0, 0.1});
  REQUIRE(k.samples.size() == 11);
  for (std::size_t i = 0; i < k.samples.size(); ++i) {
    CHECK(k.samples[i].time == doctest::Approx(0.1 * static_cast<double>(i)));
    CHECK(k.samples[i].position == doctest::Approx(0.3 * static_cast<double>(i)));
  }
  VehicleTrajectory shorty;
  shorty.vehicle_id = "short";
  shorty.samples = {{0.0, 0.0}, {0.1, 1.0}, {0.2, 2.0}};
  CHECK(error_code([&] { derive_kinematics(shorty, {0.0, 0.1}); }) == Errc::TooShort);
}

TEST_CASE("derive_kinematics is idempotent and commutes with time translation") {
  const auto raw = sampled("wave", 0.0, 60.0, 0.1,
                           [](double s) { return 15.0 * s + 4.0 * std::sin(0.3 * s) + 0.2 * std::cos(2.1 * s); });
  const SmoothingConfig cfg{0.5, 0.1};
  const auto once = derive_kinematics(raw, cfg);
  const auto twice = derive_kinematics(once, cfg);
  REQUIRE(once.samples.size() == twice.samples.size());
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(a)); };
  for (std::size_t i = 0; i < once.samples.size(); ++i) {
    CHECK(rel(*once.samples[i].speed, *twice.samples[i].speed) <= 1e-9);
    CHECK(rel(*once.samples[i].acceleration, *twice.samples[i].acceleration) <= 1e-9);
    CHECK(rel(*once.samples[i].jerk, *twice.samples[i].jerk) <= 1e-9);
  }

  auto shifted = raw;
  for (auto& s : shifted.samples) s.time += 1234.5;
  const auto moved = derive_kinematics(shifted, cfg);
  REQUIRE(moved.samples.size() == once.samples.size());
  for (std::size_t i = 0; i < once.samples.size(); ++i) {
    CHECK(std::abs(*once.samples[i].speed - *moved.samples[i].speed) <= 1e-6);
    CHECK(std::abs(*once.samples[i].jerk - *moved.samples[i].jerk) <= 1e-3);
  }
}

TEST_CASE("reverse motion is counted") {
  const auto t = sampled("back", 0.0, 2.0, 0.1, [](double s) { return -2.0 * s; });
  const auto k = derive_kinematics(t, {0.0, 0.1});
  CHECK(count_reverse_motion(k) == k.samples.size());
  CHECK(count_reverse_motion(k, 5.0) == 0);
}

TEST_CASE("segment_trajectory partition rules") {
  auto ten_hz = [](double duration) { return sampled("s", 0.0, duration - 0.1, 0.1, [](double s) { return s; }); };
  SUBCASE("100 s -> three full segments, tail dropped") {
    const auto r = segment_trajectory(ten_hz(100.0), 30.0);
    REQUIRE(r.size() == 3);
    CHECK(r[0] == IndexRange{0, 300});
    CHECK(r[1] == IndexRange{300, 600});
    CHECK(r[2] == IndexRange{600, 900});
  }
  SUBCASE("60 s -> exactly two") { CHECK(segment_trajectory(ten_hz(60.0), 30.0).size() == 2); }
  SUBCASE("44 s -> one (14 s tail is under half a segment)") {
    CHECK(segment_trajectory(ten_hz(44.0), 30.0).size() == 1);
  }
  SUBCASE("50 s -> tail of 20 s kept") {
    const auto r = segment_trajectory(ten_hz(50.0), 30.0);
    REQUIRE(r.size() == 2);
    CHECK(r[1] == IndexRange{300, 500});
  }
  SUBCASE("shorter than half a segment -> empty") { CHECK(segment_trajectory(ten_hz(10.0), 30.0).empty()); }
  SUBCASE("ranges partition a contiguous prefix") {
    for (double d : {31.0, 47.0, 75.0, 119.0, 240.0}) {
      const auto r = segment_trajectory(ten_hz(d), 30.0);
      for (std::size_t i = 1; i < r.size(); ++i) CHECK(r[i].begin == r[i - 1].end);
      if (!r.empty()) CHECK(r.front().begin == 0);
    }
  }
}

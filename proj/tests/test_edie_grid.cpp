#include <doctest.h>

#include <cmath>
#include <map>

#include "hetflow/edie_grid.hpp"
#include "hetflow/error.hpp"
#include "hetflow/microsim.hpp"

using namespace hetflow;

namespace {

VehicleTrajectory moving(const std::string& id, double t0, double t1, double h, auto&& pos) {
  VehicleTrajectory t;
  t.vehicle_id = id;
  const auto n = static_cast<std::size_t>(std::llround((t1 - t0) / h)) + 1;
  for (std::size_t k = 0; k < n; ++k) {
    TrajectorySample s;
    s.time = t0 + static_cast<double>(k) * h;
    s.position = pos(s.time);
    s.speed = 0.0;
    t.samples.push_back(s);
  }
  return t;
}

const CellVehicleStats* find(const CellStatsResult& r, std::size_t i, std::size_t j, std::size_t v = 0) {
  for (const auto& s : r.stats)
    if (s.i == i && s.j == j && s.vehicle == v) return &s;
  return nullptr;
}

}  // namespace

TEST_CASE("constant-speed crossing and stationary vehicle") {
  GridSpec g{0.0, 90.0, 0.0, 30.0, 30.0, 30.0};
  Dataset ds;
  ds.trajectories.push_back(moving("a", 0.0, 6.0, 0.1, [](double t) { return 15.0 * t; }));
  auto r = cell_vehicle_stats(ds, g);
  const auto* s = find(r, 0, 1);
  REQUIRE(s);
  CHECK(s->distance == doctest::Approx(30.0).epsilon(1e-12));
  CHECK(s->time == doctest::Approx(2.0).epsilon(1e-12));

  Dataset parked;
  parked.trajectories.push_back(moving("p", 0.0, 30.0, 0.1, [](double) { return 40.0; }));
  r = cell_vehicle_stats(parked, g);
  REQUIRE(r.stats.size() == 1);
  CHECK(r.stats[0].j == 1);
  CHECK(r.stats[0].distance == 0.0);
  CHECK(r.stats[0].time == doctest::Approx(30.0).epsilon(1e-12));
}

TEST_CASE("entry near a time boundary is limited by the space plane") {
  GridSpec g{0.0, 120.0, 0.0, 60.0, 30.0, 30.0};
  Dataset ds;
  ds.trajectories.push_back(moving("a", 20.0, 40.0, 0.1, [](double t) { return 15.0 * (t - 20.0); }));
  const auto r = cell_vehicle_stats(ds, g);
  const auto* s = find(r, 0, 0);
  REQUIRE(s);
  CHECK(s->distance == doctest::Approx(30.0).epsilon(1e-12));
  CHECK(s->time == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("clipping agrees with dense resampling") {
  auto pos = [](double t) { return 12.0 * t + 30.0 * std::sin(0.2 * t); };
  GridSpec g{0.0, 600.0, 0.0, 60.0, 30.0, 15.0};
  Dataset coarse, dense;
  coarse.trajectories.push_back(moving("a", 0.0, 60.0, 0.1, pos));
  // Linear interpolation of the coarse track at 1 kHz.
  const auto& c = coarse.trajectories[0].samples;
  dense.trajectories.push_back(moving("a", 0.0, 60.0, 0.001, [&](double t) {
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(t / 0.1), c.size() - 2);
    const double w = (t - c[k].time) / 0.1;
    return c[k].position + w * (c[k + 1].position - c[k].position);
  }));
  const auto a = cell_vehicle_stats(coarse, g), b = cell_vehicle_stats(dense, g);
  REQUIRE(a.stats.size() == b.stats.size());
  for (std::size_t k = 0; k < a.stats.size(); ++k) {
    CHECK(a.stats[k].distance == doctest::Approx(b.stats[k].distance).epsilon(1e-6));
    CHECK(a.stats[k].time == doctest::Approx(b.stats[k].time).epsilon(1e-6));
  }
}

TEST_CASE("uniform platoon gives the count-based density, speed and flow") {
  Dataset ds;
  for (int k = 0; k < 60; ++k)
    ds.trajectories.push_back(
        moving("v" + std::to_string(k), 0.0, 90.0, 0.1, [k](double t) { return -900.0 + 30.0 * k + 15.0 * t; }));
  GridSpec g{0.0, 300.0, 0.0, 60.0, 30.0, 30.0};
  const auto r = cell_vehicle_stats(ds, g);
  const auto f = edie_macroscopic(r, g);
  CHECK(f.occupied() == f.nt * f.nx);
  for (std::size_t c = 0; c < f.rho.size(); ++c) {
    CHECK(f.rho[c] == doctest::Approx(1.0 / 30.0).epsilon(1e-9));
    CHECK(f.speed[c] == doctest::Approx(15.0).epsilon(1e-9));
    CHECK(f.flow[c] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(std::abs(f.flow[c] - f.rho[c] * f.speed[c]) <= 1e-9 * f.flow[c]);
  }
  CHECK(r.mismatch_warnings > 0);
}

TEST_CASE("empty cells are masked and single members are self-consistent") {
  Dataset ds;
  ds.trajectories.push_back(moving("a", 0.0, 2.0, 0.1, [](double t) { return 15.0 * t; }));
  GridSpec g{0.0, 90.0, 0.0, 30.0, 30.0, 30.0};
  const auto r = cell_vehicle_stats(ds, g);
  const auto f = edie_macroscopic(r, g);
  CHECK(f.mask[f.index(0, 0)] == 1);
  CHECK(f.mask[f.index(0, 2)] == 0);
  CHECK(f.rho[f.index(0, 0)] == doctest::Approx(2.0 / 900.0));
  CHECK(f.speed[f.index(0, 0)] == doctest::Approx(15.0));
}

TEST_CASE("refinement consistency and totals on a ring simulation") {
  auto sc = reference_scenario("hv_av1", 20);
  sc.sim_duration = 120.0;
  const auto ds = simulate_ring(sc);
  GridSpec coarse{0.0, 600.0, 0.0, 120.0, 30.0, 30.0};
  GridSpec fine{0.0, 600.0, 0.0, 120.0, 15.0, 15.0};
  const auto fc = edie_macroscopic(cell_vehicle_stats(ds, coarse), coarse);
  const auto ff = edie_macroscopic(cell_vehicle_stats(ds, fine), fine);
  double total_t = 0.0, total_x = 0.0;
  for (std::size_t i = 0; i < fc.nt; ++i)
    for (std::size_t j = 0; j < fc.nx; ++j) {
      double st = 0.0, sx = 0.0;
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) {
          st += ff.sum_time[ff.index(2 * i + a, 2 * j + b)];
          sx += ff.sum_distance[ff.index(2 * i + a, 2 * j + b)];
        }
      const std::size_t c = fc.index(i, j);
      CHECK(std::abs(st - fc.sum_time[c]) <= 1e-9 * fc.sum_time[c]);
      CHECK(std::abs(sx - fc.sum_distance[c]) <= 1e-9 * fc.sum_distance[c]);
      total_t += fc.sum_time[c];
      total_x += fc.sum_distance[c];
    }
  CHECK(total_t == doctest::Approx(20.0 * 120.0).epsilon(1e-12));
  double travelled = 0.0;
  for (const auto& t : ds.trajectories) {
    const auto x = unwrap_positions(t.samples, ds.road_length);
    travelled += x.back() - x.front();
  }
  CHECK(total_x == doctest::Approx(travelled).epsilon(1e-12));
  // Ring density averages N / L.
  double rho_mean = 0.0;
  for (double r : fc.rho) rho_mean += r;
  CHECK(rho_mean / static_cast<double>(fc.rho.size()) == doctest::Approx(20.0 / 600.0).epsilon(1e-12));
}

TEST_CASE("ring wrap splits travel across the seam") {
  Dataset ds;
  ds.topology = Topology::Ring;
  ds.road_length = 100.0;
  ds.trajectories.push_back(moving("a", 0.0, 10.0, 0.1, [](double t) { return std::fmod(90.0 + 10.0 * t, 100.0); }));
  GridSpec g{0.0, 100.0, 0.0, 10.0, 20.0, 10.0};
  const auto r = cell_vehicle_stats(ds, g);
  const auto* last = find(r, 0, 4);
  const auto* first = find(r, 0, 0);
  REQUIRE(last);
  REQUIRE(first);
  CHECK(last->time == doctest::Approx(2.0));  // 90..100 and again 180..190
  CHECK(first->time == doctest::Approx(2.0));
  CHECK(first->distance == doctest::Approx(20.0));
}

TEST_CASE("cell CSV and grid JSON round-trip") {
  Dataset ds;
  for (int k = 0; k < 5; ++k)
    ds.trajectories.push_back(moving("v" + std::to_string(k), 0.0, 60.0, 0.1,
                                     [k](double t) { return 25.0 * k + (10.0 + k) * t; }));
  const auto g = default_grid(ds);
  CHECK(g.t0 == 0.0);
  CHECK(g.t1 == 60.0);
  const auto f = edie_macroscopic(cell_vehicle_stats(ds, g), g);
  const auto back = read_cells_csv(cells_csv(f), parse_grid_json(grid_json(g)));
  CHECK(back.mask == f.mask);
  CHECK(back.rho == f.rho);
  CHECK(back.speed == f.speed);
  CHECK(back.n_vehicles == f.n_vehicles);
  CHECK_THROWS_AS(parse_grid_json(R"({"x0": 1, "x1": 0, "t0": 0, "t1": 1})"), Error);
}

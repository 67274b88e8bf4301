#include <doctest.h>

#include <cmath>
#include <numbers>

#include "hetflow/error.hpp"
#include "hetflow/gsom_pde.hpp"

using namespace hetflow;

namespace {

BoundaryConditions open_bc() {
  BoundaryConditions bc;
  bc.periodic = false;
  return bc;
}

// Position where rho crosses `level`, scanning left to right.
double crossing(const PdeState& s, double level) {
  for (std::size_t k = 0; k + 1 < s.nx(); ++k) {
    const double a = s.rho[k], b = s.rho[k + 1];
    if ((a - level) * (b - level) <= 0.0 && a != b)
      return s.x0 + (static_cast<double>(k) + 0.5 + (level - a) / (b - a)) * s.dx();
  }
  return std::nan("");
}

PdeState riemann(double rho_l, double rho_r, double w_l, double w_r, std::size_t n, double length, double x_jump,
                 const BoundaryConditions& bc) {
  std::vector<double> rho(n), w(n);
  const double dx = length / static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    const bool left = (static_cast<double>(k) + 0.5) * dx < x_jump;
    rho[k] = left ? rho_l : rho_r;
    w[k] = left ? w_l : w_r;
  }
  return make_pde_state(0.0, length, rho, w, bc);
}

}  // namespace

TEST_CASE("wave speeds in closed form") {
  const auto lwr = greenshields_closure(40.0, 0.2);
  const auto l = wavespeeds(lwr, 0.1, 1.0);
  CHECK(l[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(l[1] == doctest::Approx(20.0));
  const auto vac = wavespeeds(lwr, 0.0, 1.0);
  CHECK(vac[0] == vac[1]);

  const auto arz = arz_closure({30.0, 0.15, 2.0});
  for (double rho : {0.0, 0.02, 0.07, 0.1}) {
    const auto a = wavespeeds(arz, rho, 35.0);
    CHECK(a[1] - a[0] == doctest::Approx(rho * 2.0 * 30.0 * rho / (0.15 * 0.15)).epsilon(1e-12));
    CHECK(a[0] <= a[1]);
  }
  CHECK_THROWS_AS(arz_closure({30.0, 0.15, 0.0}), Error);
}

TEST_CASE("uniform states are steady on a ring") {
  auto s = make_pde_state(0.0, 1000.0, std::vector<double>(50, 0.04), std::vector<double>(50, 32.0));
  const auto arz = arz_closure({30.0, 0.15, 2.0});
  const double dt = stable_dt(s, arz);
  for (int k = 0; k < 20; ++k) {
    const auto next = gsom_step(s, arz, dt);
    for (std::size_t j = 0; j < s.nx(); ++j) {
      CHECK(std::abs(next.rho[j] - s.rho[j]) <= 1e-14 * s.rho[j]);
      CHECK(std::abs(next.y[j] - s.y[j]) <= 1e-14 * s.y[j]);
    }
    s = next;
  }
}

TEST_CASE("CFL bound is enforced") {
  const auto s = make_pde_state(0.0, 100.0, std::vector<double>(10, 0.05), std::vector<double>(10, 1.0));
  const auto lwr = greenshields_closure(40.0, 0.2);
  const double dt = stable_dt(s, lwr);
  CHECK(dt == doctest::Approx(0.5 * 10.0 / 30.0));
  try {
    gsom_step(s, lwr, 1.5 * dt);
    FAIL("expected CflViolation");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::CflViolation);
  }
}

TEST_CASE("periodic stepping conserves mass and attribute") {
  const std::size_t n = 200;
  std::vector<double> rho(n), w(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double x = static_cast<double>(k) / static_cast<double>(n);
    rho[k] = 0.05 + 0.03 * std::sin(2.0 * std::numbers::pi * x);
    w[k] = 30.0 + 5.0 * (x < 0.5 ? 1.0 : -1.0);
  }
  const auto s = make_pde_state(0.0, 2000.0, rho, w);
  const auto arz = arz_closure({30.0, 0.12, 2.0});
  const auto run = advance_steps(s, arz, 0.8 * stable_dt(s, arz), 1000);
  CHECK(run.report.n_relative <= 1e-10);
  CHECK(run.report.i_relative <= 1e-10);
  CHECK(std::abs(run.state.mass() - s.mass()) <= 1e-12 * s.mass());
  CHECK(run.report.n_series.size() == 1001);
  CHECK(run.state.clamps == 0);
  for (double r : run.state.rho) CHECK(r >= 0.0);
  double lo = 1e9, hi = -1e9;
  for (std::size_t k = 0; k < n; ++k) {
    lo = std::min(lo, run.state.omega(k));
    hi = std::max(hi, run.state.omega(k));
  }
  CHECK(lo >= 25.0 - 1e-9);
  CHECK(hi <= 35.0 + 1e-9);
}

TEST_CASE("uniform omega keeps I proportional to N") {
  const std::size_t n = 80;
  std::vector<double> rho(n);
  for (std::size_t k = 0; k < n; ++k) rho[k] = 0.02 + 0.1 * static_cast<double>(k) / static_cast<double>(n);
  auto bc = open_bc();
  bc.left.kind = TraceKind::Prescribed;
  bc.left.state = [](double) { return std::array<double, 2>{0.03, 1.3}; };
  const auto s = make_pde_state(0.0, 800.0, rho, std::vector<double>(n, 1.3), bc);
  const auto lwr = greenshields_closure(40.0, 0.2);
  const auto run = advance(s, lwr, 60.0);
  for (std::size_t k = 0; k < run.report.times.size(); ++k)
    CHECK(run.report.i_series[k] == doctest::Approx(1.3 * run.report.n_series[k]).epsilon(1e-12));
  CHECK(run.report.n_relative <= 1e-12);
}

TEST_CASE("inflow into a closed road accumulates Q_in t") {
  auto bc = open_bc();
  bc.left.kind = TraceKind::Prescribed;
  bc.left.state = [](double) { return std::array<double, 2>{0.03, 1.0}; };
  bc.right.kind = TraceKind::Closed;
  const auto s = make_pde_state(0.0, 3000.0, std::vector<double>(300, 0.0), std::vector<double>(300, 1.0), bc);
  const auto lwr = greenshields_closure(40.0, 0.2);
  const double q_in = 0.03 * 40.0 * (1.0 - 0.03 / 0.2);
  const auto run = advance(s, lwr, 50.0);
  CHECK(run.report.q_out == 0.0);
  CHECK(run.report.q_in == doctest::Approx(q_in * 50.0).epsilon(1e-12));
  CHECK(run.state.mass() == doctest::Approx(q_in * 50.0).epsilon(1e-10));
  CHECK(run.report.n_relative <= 1e-12);
}

TEST_CASE("prescribed inflow omega outside the initial range is not clamped") {
  BoundaryConditions bc;
  bc.periodic = false;
  bc.left.kind = TraceKind::Prescribed;
  bc.left.state = [](double) { return std::array<double, 2>{0.07, 28.0}; };
  const auto s = make_pde_state(0.0, 2000.0, std::vector<double>(200, 0.05), std::vector<double>(200, 25.0), bc);
  const auto run = advance(s, arz_closure({30.0, 0.2, 2.0}), 30.0);
  CHECK(run.state.clamps == 0);
  CHECK(run.report.i_relative <= 1e-12);
  CHECK(run.state.omega(0) == doctest::Approx(28.0).epsilon(1e-12));
}

TEST_CASE("LWR shock travels at the Rankine-Hugoniot speed") {
  const double rl = 0.02, rr = 0.1, vf = 40.0, rm = 0.2;
  const auto lwr = greenshields_closure(vf, rm);
  const auto s = riemann(rl, rr, 1.0, 1.0, 400, 4000.0, 1000.0, open_bc());
  const double q = [&](double r) { return r * vf * (1.0 - r / rm); }(rr) - rl * vf * (1.0 - rl / rm);
  const double speed = q / (rr - rl);
  const double horizon = 100.0;
  const auto run = advance(s, lwr, horizon);
  const double measured = (crossing(run.state, 0.5 * (rl + rr)) - 1000.0) / horizon;
  CHECK(std::abs(measured - speed) <= 0.02 * std::abs(speed));
}

TEST_CASE("LWR rarefaction is a monotone fan") {
  const double rl = 0.15, rr = 0.03;
  const auto lwr = greenshields_closure(40.0, 0.2);
  const auto s = riemann(rl, rr, 1.0, 1.0, 400, 4000.0, 2000.0, open_bc());
  const auto run = advance(s, lwr, 40.0);
  double max_jump = 0.0;
  for (std::size_t k = 0; k + 1 < run.state.nx(); ++k) {
    CHECK(run.state.rho[k + 1] <= run.state.rho[k] + 1e-12);
    max_jump = std::max(max_jump, run.state.rho[k] - run.state.rho[k + 1]);
  }
  // The exact fan spans 40 * 2 * (rl - rr) / 0.2 * 40 s = 1920 m, about 190 cells.
  CHECK(max_jump <= 0.1 * (rl - rr));
}

TEST_CASE("omega contact advects at the fluid speed") {
  const double rho0 = 0.05, horizon = 30.0;
  const auto lwr = greenshields_closure(40.0, 0.2);
  const auto s = riemann(rho0, rho0, 1.2, 0.8, 400, 4000.0, 1000.0, BoundaryConditions{});
  const auto run = advance(s, lwr, horizon);
  const double v = 40.0 * (1.0 - rho0 / 0.2);
  double mid = std::nan("");
  for (std::size_t k = 0; k + 1 < run.state.nx(); ++k) {
    const double a = run.state.omega(k), b = run.state.omega(k + 1);
    if (a >= 1.0 && b < 1.0) {
      mid = (static_cast<double>(k) + 0.5 + (a - 1.0) / (a - b)) * run.state.dx();
      break;
    }
  }
  CHECK(std::abs(mid - (1000.0 + v * horizon)) <= run.state.dx());
  for (double r : run.state.rho) CHECK(r == doctest::Approx(rho0).epsilon(1e-13));
}

TEST_CASE("first-order convergence on a smooth profile") {
  const auto lwr = greenshields_closure(40.0, 0.2);
  auto l1_error = [&](std::size_t n) {
    std::vector<double> rho(n);
    const double length = 1000.0, dx = length / static_cast<double>(n);
    auto f = [&](double x) { return 0.05 + 0.01 * std::sin(2.0 * std::numbers::pi * x / length); };
    for (std::size_t k = 0; k < n; ++k) rho[k] = f((static_cast<double>(k) + 0.5) * dx);
    const auto run = advance(make_pde_state(0.0, length, rho, std::vector<double>(n, 1.0)), lwr, 5.0);
    // Fine reference by the method of characteristics (pre-breaking).
    double err = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double x = (static_cast<double>(k) + 0.5) * dx;
      double x0 = x;
      for (int it = 0; it < 100; ++it) {
        const double r = f(x0);
        x0 = x - 5.0 * 40.0 * (1.0 - 2.0 * r / 0.2);
      }
      err += std::abs(run.state.rho[k] - f(x0)) * dx;
    }
    return err;
  };
  const double e1 = l1_error(100), e2 = l1_error(200);
  CHECK(e1 / e2 == doctest::Approx(2.0).epsilon(0.2));
}

TEST_CASE("simulation on an evaluation grid and error metrics") {
  CellField f;
  f.grid = GridSpec{0.0, 300.0, 0.0, 90.0, 30.0, 30.0};
  f.nt = 3;
  f.nx = 10;
  const std::size_t n = 30;
  f.rho.assign(n, 0.05);
  f.speed.assign(n, 30.0);
  f.flow.assign(n, 1.5);
  f.mask.assign(n, 1);
  f.mask[3] = 0;
  OmegaField w;
  w.nt = 3;
  w.nx = 10;
  w.omega.assign(n, 1.0);
  w.mask = f.mask;
  const auto lwr = greenshields_closure(40.0, 0.2);
  SimulationConfig cfg;
  cfg.refine = 2;
  const auto r = simulate(f, w, lwr, cfg);
  CHECK(r.filled[3] == 1);
  CHECK(r.filled[2] == 0);
  for (std::size_t k = 0; k < n; ++k) CHECK(r.field.rho[k] == doctest::Approx(0.05).epsilon(1e-12));
  const auto e = model_error(r.field, r.field);
  CHECK(e.e_rho == 0.0);
  CHECK(e.e_v == 0.0);
  CHECK(e.n_cells == n);

  auto biased = r.field;
  for (auto& v : biased.speed) v *= 1.1;
  const auto b = model_error(biased, r.field);
  CHECK(b.e_v == doctest::Approx(10.0).epsilon(1e-9));
  CHECK(b.e_rho == 0.0);
  CHECK(b.e_q == 0.0);
  CHECK(simulation_csv(r).rfind("t,x,rho,v,q,omega\n", 0) == 0);

  auto sparse = f;
  for (std::size_t j = 0; j < 6; ++j) sparse.mask[j] = 0;
  CHECK_THROWS_AS(simulate(sparse, w, lwr, cfg), Error);
}

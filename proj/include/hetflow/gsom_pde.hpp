/// @file gsom_pde.hpp
/// @brief First-order HLL finite volumes for the generic second-order model
/// (density plus an advected attribute) and its ARZ and LWR special cases.
#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hetflow/edie_grid.hpp"
#include "hetflow/fd_model.hpp"
#include "hetflow/omega_recon.hpp"

namespace hetflow {

enum class ClosureKind { Learned, Arz, Lwr };
std::string to_string(ClosureKind k);

/// Fills v = V(rho, omega) and dV/drho elementwise.
using ClosureFn = std::function<void(const Eigen::ArrayXd& rho, const Eigen::ArrayXd& omega, Eigen::ArrayXd& v,
                                     Eigen::ArrayXd& dv_drho)>;

struct Closure {
  ClosureKind kind = ClosureKind::Lwr;
  ClosureFn eval;
};

/// ARZ pressure p(rho) = v_ref (rho / rho_max)^gamma; V = max(0, omega - p).
struct ArzParams {
  double v_ref = 30.0;
  double rho_max = 0.2;
  double gamma = 2.0;
};

void validate(const ArzParams& p);
double arz_pressure(const ArzParams& p, double rho);
/// rho_max = largest observed density, v_ref = largest observed speed.
ArzParams default_arz_params(const CellField& observed, double gamma = 2.0);

/// Learned surface, speeds clamped at 0. A one-variable model yields an LWR closure.
Closure learned_closure(const FdModel& m);
Closure arz_closure(const ArzParams& p);
/// LWR with V = v_free (1 - rho / rho_max), floored at 0; omega is ignored.
Closure greenshields_closure(double v_free, double rho_max);

/// (lambda1, lambda2) = (v + rho dV/drho, v).
std::array<double, 2> wavespeeds(const Closure& c, double rho, double omega);

enum class TraceKind { Transmissive, Closed, Prescribed };

struct BoundaryTrace {
  TraceKind kind = TraceKind::Transmissive;
  std::function<std::array<double, 2>(double t)> state;  // (rho, omega) for Prescribed
};

struct BoundaryConditions {
  bool periodic = true;
  BoundaryTrace left, right;  // used when not periodic
};

inline constexpr double kEpsRho = 1e-8;

struct PdeState {
  double x0 = 0.0;
  double length = 0.0;
  std::vector<double> rho;  // veh/m per cell
  std::vector<double> y;    // rho * omega per cell
  double time = 0.0;
  BoundaryConditions bc;
  double omega_lo = -1e300, omega_hi = 1e300;  // clamp box for omega; grows to admit prescribed inflow values
  std::size_t clamps = 0;
  // Integrated boundary fluxes since the start.
  double q_in = 0.0, q_out = 0.0, a_in = 0.0, a_out = 0.0;

  std::size_t nx() const { return rho.size(); }
  double dx() const { return length / static_cast<double>(rho.size()); }
  double omega(std::size_t k) const;
  double mass() const;       // sum rho dx
  double attribute() const;  // sum y dx
};

/// Builds a state with the clamp box set to the omega extrema widened by
/// `margin` of their range (or of their magnitude when the range is zero).
PdeState make_pde_state(double x0, double length, const std::vector<double>& rho, const std::vector<double>& omega,
                        const BoundaryConditions& bc = {}, double margin = 0.05);

double max_wavespeed(const PdeState& s, const Closure& c);
/// cfl * dx / max |lambda| (infinite for a motionless state).
double stable_dt(const PdeState& s, const Closure& c, double cfl = 0.5);

/// One HLL step. Throws CflViolation when dt exceeds the CFL bound.
PdeState gsom_step(const PdeState& s, const Closure& c, double dt, double cfl = 0.5);

struct ConservationReport {
  std::vector<double> times;
  std::vector<double> n_series;  // sum rho dx
  std::vector<double> i_series;  // sum y dx
  double q_in = 0.0, q_out = 0.0, a_in = 0.0, a_out = 0.0;
  double n_residual = 0.0, i_residual = 0.0;  // |dN - (Q_in - Q_out)|, |dI - (A_in - A_out)|
  double n_relative = 0.0, i_relative = 0.0;  // residual / max(|N(0)|, |I(0)|) scale
};

struct PdeRun {
  PdeState state;
  ConservationReport report;
  std::size_t steps = 0;
};

using StepObserver = std::function<void(const PdeState& before, const PdeState& after, double dt)>;

/// Steps with the largest stable dt until t_end (the last step is shortened).
PdeRun advance(const PdeState& s, const Closure& c, double t_end, double cfl = 0.5,
               const StepObserver& observer = {});
/// Same, with a fixed number of steps of the given dt.
PdeRun advance_steps(const PdeState& s, const Closure& c, double dt, std::size_t n_steps, double cfl = 0.5);

ConservationReport conservation_report(const PdeState& initial, const PdeState& final_state);

struct SimulationConfig {
  int refine = 1;  // PDE cells per evaluation cell
  double cfl = 0.5;
  double omega_margin = 0.05;
  BoundaryConditions bc;
  double min_coverage = 0.5;
};

struct SimulationResult {
  CellField field;                  // cell averages of rho, speed and flow on the evaluation grid
  std::vector<double> omega;        // cell averages of omega (y / rho)
  std::vector<std::uint8_t> filled; // initial cells filled from the nearest occupied cell
  PdeRun run;
};

/// Starts from the first time row of `init` and `omega` at t0 and integrates
/// to the end of the grid, averaging the solution over every cell.
SimulationResult simulate(const CellField& init, const OmegaField& omega, const Closure& c,
                          const SimulationConfig& cfg = {});

/// omega = v + p(rho) on occupied cells, for driving an ARZ closure.
OmegaField arz_omega_field(const CellField& observed, const ArzParams& p);

struct ModelError {
  double e_rho = 0.0, e_v = 0.0, e_q = 0.0;  // percent
  std::size_t n_cells = 0;
  std::size_t excluded = 0;  // occupied cells with a zero observed value in any metric
};

/// sqrt(mean(((Y_sim - Y) / Y)^2)) * 100 over cells occupied in both fields
/// with Y > 0 for all three quantities.
ModelError model_error(const CellField& sim, const CellField& observed);

/// t,x,rho,v,q,omega for every cell.
std::string simulation_csv(const SimulationResult& r);

}  // namespace hetflow

/// @file edie_grid.hpp
/// @brief Space-time cells, per-vehicle travel inside each cell, and Edie's measures.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hetflow/trajectory.hpp"

namespace hetflow {

struct GridSpec {
  double x0 = 0.0, x1 = 600.0;  // m
  double t0 = 0.0, t1 = 600.0;  // s
  double dx = 30.0;
  double dt = 30.0;

  std::size_t nx() const;
  std::size_t nt() const;
  bool operator==(const GridSpec&) const = default;
};

void validate(const GridSpec& g);

/// Lattice anchored at the dataset's earliest time and smallest position
/// (0 on a ring, spanning the road). Only whole cells in time are kept.
GridSpec default_grid(const Dataset& ds, double dx = 30.0, double dt = 30.0);

struct CellVehicleStats {
  std::size_t i = 0;  // time index
  std::size_t j = 0;  // space index
  std::size_t vehicle = 0;  // index into Dataset::trajectories
  std::string vehicle_id;
  double distance = 0.0;  // X, m
  double time = 0.0;      // T, s
  std::vector<double> speed_series;
  std::vector<double> accel_series;
  std::vector<double> jerk_series;
};

struct CellStatsResult {
  std::vector<CellVehicleStats> stats;  // ordered by (i, j, vehicle)
  double outside_time = 0.0;  // vehicle-seconds clipped away (GridMismatch)
  std::size_t mismatch_warnings = 0;
};

/// Clips every linear inter-sample piece against the lattice. On a ring the
/// spatial index wraps modulo the road length.
CellStatsResult cell_vehicle_stats(const Dataset& ds, const GridSpec& grid);

struct CellField {
  GridSpec grid;
  std::size_t nt = 0, nx = 0;
  // Row-major, index i * nx + j.
  std::vector<double> rho;    // veh/m
  std::vector<double> speed;  // m/s
  std::vector<double> flow;   // veh/s
  std::vector<double> sum_distance;
  std::vector<double> sum_time;
  std::vector<std::uint8_t> mask;  // 1 when occupied
  std::vector<std::size_t> n_vehicles;
  std::optional<std::vector<double>> omega;

  std::size_t index(std::size_t i, std::size_t j) const { return i * nx + j; }
  double t_center(std::size_t i) const { return grid.t0 + (static_cast<double>(i) + 0.5) * grid.dt; }
  double x_center(std::size_t j) const { return grid.x0 + (static_cast<double>(j) + 0.5) * grid.dx; }
  std::size_t occupied() const;
};

CellField edie_macroscopic(const CellStatsResult& stats, const GridSpec& grid);

/// i,j,t_center,x_center,rho,v,q,n_vehicles[,omega] for occupied cells.
std::string cells_csv(const CellField& field);
/// Rebuilds a field from cells_csv output; an omega column is picked up when present.
CellField read_cells_csv(const std::string& text, const GridSpec& grid);

std::string grid_json(const GridSpec& grid);
GridSpec parse_grid_json(const std::string& text);

}  // namespace hetflow

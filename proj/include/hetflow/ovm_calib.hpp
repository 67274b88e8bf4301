/// @file ovm_calib.hpp
/// @brief Genetic-algorithm calibration of OVM parameters from a leader-follower pair.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hetflow/microsim.hpp"
#include "hetflow/trajectory.hpp"

namespace hetflow {

/// A follower and its leader, with the observations resolved on the
/// follower's time grid. Leader position/speed are linearly interpolated.
struct CalibrationPair {
  VehicleTrajectory follower;
  VehicleTrajectory leader;
  double initial_gap = 0.0;    // m
  double initial_speed = 0.0;  // m/s

  std::vector<double> times;           // follower sample times
  std::vector<double> observed_gap;    // s(t_j)
  std::vector<double> observed_speed;  // v(t_j)
  // Leader state at t_j (even index) and at the RK4 midpoints (odd index).
  std::vector<double> leader_position;
  std::vector<double> leader_speed;
};

/// Aligns a follower with its leader. On a ring (`road_length` set) both
/// tracks are unwrapped and the leader is placed ahead by less than one lap.
/// Throws InvalidArgument when time supports do not overlap or the initial gap
/// is not positive.
CalibrationPair make_calibration_pair(const VehicleTrajectory& follower, const VehicleTrajectory& leader,
                                      std::optional<double> road_length = std::nullopt);

struct FollowerPrediction {
  std::vector<double> gap;
  std::vector<double> speed;
};

/// Integrates the follower against the recorded leader with RK4 on the
/// observation grid, starting from (initial_gap, initial_speed).
FollowerPrediction simulate_follower(const OvmParams& p, const CalibrationPair& pair);

/// alpha = (s*/v*)^2 from the observed mean gap and speed.
double calibration_alpha(const CalibrationPair& pair);

/// sum_j (s_hat - s)^2 + alpha (v_hat - v)^2
double calibration_objective(const OvmParams& p, const CalibrationPair& pair);

/// E = sum (y_hat - y)^2 / sum y^2 * 100, for gap and speed.
std::pair<double, double> calibration_errors(const OvmParams& p, const CalibrationPair& pair);

struct ParamBounds {
  double lo = 0.0;
  double hi = 1.0;
};

struct GaConfig {
  int population = 50;
  int iterations = 500;
  double crossover_rate = 0.9;
  double mutation_rate = 0.2;  // per gene
  std::uint64_t seed = 1;
  ParamBounds tau{0.0, 20.0};
  ParamBounds beta{0.0, 5.0};
  ParamBounds min_gap{1.0, 20.0};
  ParamBounds time_gap{0.0, 5.0};
  ParamBounds v_free{0.0, 50.0};
};

void validate(const GaConfig& cfg);

struct CalibrationResult {
  OvmParams params;
  double cost = 0.0;
  double e_gap = 0.0;    // percent
  double e_speed = 0.0;  // percent
  double alpha = 0.0;
  std::vector<double> best_cost_history;  // one entry per generation

  bool operator==(const CalibrationResult&) const = default;
};

/// Real-coded GA: tournament selection (size 3), BLX-0.5 crossover, Gaussian
/// mutation (sigma = 5 % of each range), elitism of one, projection onto the bounds.
CalibrationResult calibrate_ovm(const CalibrationPair& pair, const GaConfig& cfg);

/// Leader of every vehicle on a ring, by position order at the first common
/// time: result[i] is the index of trajectory i's leader.
std::vector<std::size_t> infer_ring_leaders(const Dataset& ds);

}  // namespace hetflow

/// @file microsim.hpp
/// @brief Optimal-velocity car following and the ring-road platoon simulator.
#pragma once

#include <string>
#include <vector>

#include "hetflow/trajectory.hpp"

namespace hetflow {

struct OvmParams {
  double tau = 1.7;        // s, adaptation time
  double beta = 0.9;       // 1/s, speed-difference sensitivity
  double v_free = 40.0;    // m/s
  double time_gap = 0.5;   // s
  double min_gap = 15.0;   // m
  double length = kDefaultVehicleLength;  // m

  bool operator==(const OvmParams&) const = default;
};

/// Throws InvalidArgument when a parameter invariant is violated.
void validate(const OvmParams& p);

/// Reference vehicle types of the mixed-autonomy ring study.
OvmParams hv_params();
OvmParams av1_params();
OvmParams av2_params();

/// max{0, min{v_free, (gap - min_gap) / time_gap}}
double ovm_desired_speed(const OvmParams& p, double gap);

/// (V_opt(gap) - v) / tau + beta (v_leader - v)
double ovm_acceleration(const OvmParams& p, double v, double gap, double v_leader);

struct NamedVehicle {
  std::string name;  // type label, e.g. "HV" or "AV1"
  VehicleClass class_label = VehicleClass::HV;
  OvmParams params;
};

struct RingScenario {
  double road_length = 600.0;          // m
  std::vector<NamedVehicle> vehicles;  // placement order
  double sim_duration = 600.0;         // s
  double dt = 0.05;                    // s
  double init_gap_amplitude = 0.5;
  int record_every = 2;                // record one sample every n steps
};

/// Builds the placement sequence by repeating `pattern` until `count` vehicles.
std::vector<NamedVehicle> repeat_pattern(const std::vector<NamedVehicle>& pattern, int count);

/// The four reference scenarios: "hv", "av1", "hv_av1" (alternating) and
/// "hv_av1_hv_av2" (repeating HV-AV1-HV-AV2).
RingScenario reference_scenario(const std::string& name, int n_vehicles = 30);

/// Initial bumper-to-bumper gaps s_i(0); the last gap closes the ring.
std::vector<double> initial_gaps(const RingScenario& s);

/// Integrates the platoon with classic RK4 at step s.dt. Vehicle i follows
/// vehicle i+1; the last vehicle follows the first across the ring seam.
/// Speeds are clamped at zero after every step. Positions in the output are
/// wrapped into [0, road_length).
Dataset simulate_ring(const RingScenario& s);

/// Parses a scenario config (JSON): road_length, dt, duration, amplitude,
/// record_every, types {name: {tau, beta, v_free, time_gap, min_gap, length,
/// class}}, and either "pattern" + "count" or "placement" (explicit list).
RingScenario load_ring_scenario(const std::string& json_text);

}  // namespace hetflow

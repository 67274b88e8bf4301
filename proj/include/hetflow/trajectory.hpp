/// @file trajectory.hpp
/// @brief Lagrangian trajectory data: ingestion, kinematics, segmentation.
#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace hetflow {

enum class VehicleClass { HV, AV, Unknown };
enum class Topology { Ring, Open };

std::string to_string(VehicleClass c);
VehicleClass parse_vehicle_class(const std::string& s);

/// Vehicle length used when the source carries none.
inline constexpr double kDefaultVehicleLength = 5.0;

struct TrajectorySample {
  double time = 0.0;      // s
  double position = 0.0;  // m, longitudinal arc length
  std::optional<int> lane;
  std::optional<double> speed;         // m/s
  std::optional<double> acceleration;  // m/s^2
  std::optional<double> jerk;          // m/s^3

  bool operator==(const TrajectorySample&) const = default;
};

struct VehicleTrajectory {
  std::string vehicle_id;
  VehicleClass class_label = VehicleClass::Unknown;
  double length = kDefaultVehicleLength;
  std::vector<TrajectorySample> samples;
  double sample_rate = 0.0;  // Hz

  bool operator==(const VehicleTrajectory&) const = default;

  double start_time() const { return samples.front().time; }
  double end_time() const { return samples.back().time; }
};

struct Dataset {
  std::string dataset_id;
  std::vector<VehicleTrajectory> trajectories;
  std::optional<double> road_length;  // set for ring topology
  Topology topology = Topology::Open;

  bool operator==(const Dataset&) const = default;

  const VehicleTrajectory* find(const std::string& vehicle_id) const;
};

/// Column mapping for the trajectory CSV plus dataset-level metadata.
/// Optional columns are used only when present in the header.
struct CsvSchema {
  std::string vehicle_id = "vehicle_id";
  std::string time = "t";
  std::string position = "x";
  std::string speed = "v";
  std::string acceleration = "a";
  std::string jerk = "j";
  std::string lane = "lane";
  std::string class_label = "class";
  std::string length = "length";

  std::string dataset_id = "dataset";
  Topology topology = Topology::Open;
  std::optional<double> road_length;
};

/// Reads a schema config (JSON object mapping logical names to headers).
CsvSchema load_schema(const std::filesystem::path& path);
void save_schema(const CsvSchema& schema, const std::filesystem::path& path);

Dataset ingest_trajectories(const std::filesystem::path& source, const CsvSchema& schema = {});
Dataset ingest_trajectories_text(const std::string& text, const CsvSchema& schema = {});

/// Writes the canonical CSV (vehicle_id,t,x,v,a,j,lane,class,length); absent
/// optional values are written as empty fields.
void write_trajectories(const Dataset& ds, const std::filesystem::path& path);
std::string write_trajectories_text(const Dataset& ds);

/// (n - 1) / (t_last - t_first); 0 for fewer than two samples.
double estimate_sample_rate(const std::vector<TrajectorySample>& samples);

struct SmoothingConfig {
  double window = 0.5;        // s, moving-average half-width
  double resample_dt = 0.1;   // s
};

/// Continuous positions for a ring track: jumps larger than half the road
/// length are treated as wraps. Without a road length positions pass through.
std::vector<double> unwrap_positions(const std::vector<TrajectorySample>& samples,
                                     std::optional<double> road_length);

/// Resamples to a uniform grid and derives speed, acceleration and jerk by
/// central differences, each followed by a moving average. On a ring the
/// track is unwrapped first and output positions are wrapped back into [0, L).
VehicleTrajectory derive_kinematics(const VehicleTrajectory& traj, const SmoothingConfig& cfg,
                                    std::optional<double> road_length = std::nullopt);

/// derive_kinematics for every trajectory, using the dataset's road length on a ring.
Dataset derive_kinematics(const Dataset& ds, const SmoothingConfig& cfg);

/// Number of samples whose speed is below -eps (reverse motion).
std::size_t count_reverse_motion(const VehicleTrajectory& traj, double eps = 0.5);

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive

  std::size_t size() const { return end - begin; }
  bool operator==(const IndexRange&) const = default;
};

/// Splits a uniformly sampled trajectory into consecutive segments of
/// `segment_duration`; a trailing partial segment survives only if it holds at
/// least half of a full segment's samples.
std::vector<IndexRange> segment_trajectory(const VehicleTrajectory& traj, double segment_duration = 30.0);

}  // namespace hetflow

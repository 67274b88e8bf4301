/// @file stochastic_attr.hpp
/// @brief Jerk statistics, jerk regression and the driver stochasticity attribute.
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hetflow/trajectory.hpp"

namespace hetflow {

struct JerkSegmentStats {
  std::size_t segment_index = 0;
  double c_absave = 0.0;  // mean |j|
  double c_std = 0.0;     // population std of j
  double c_mean = 0.0;    // mean j
  std::size_t n_samples = 0;

  bool operator==(const JerkSegmentStats&) const = default;
};

/// Throws TooShort for fewer than two samples.
JerkSegmentStats jerk_segment_stats(std::span<const double> jerk, std::size_t segment_index = 0);

struct JerkRegression {
  double a = 0.0;  // intercept, m/s^3
  double b = 0.0;  // slope
  double r = 0.0;  // Pearson correlation; 0 when c_std is constant
};

/// OLS fit c_std = a + b * c_absave. Throws DegenerateRegression with fewer
/// than two segments or when all c_absave coincide.
JerkRegression fit_jerk_regression(std::span<const JerkSegmentStats> stats);

struct OmegaLSeries {
  std::vector<double> values;
  std::vector<std::size_t> segment_indices;  // segment of each value
  std::vector<std::size_t> skipped;          // segments with c_absave <= eps
  double mean = 0.0;
};

/// (c_std - a) / c_absave per segment. Throws NoValidSegments when every
/// segment falls below `eps`.
OmegaLSeries omega_l(std::span<const JerkSegmentStats> stats, double a, double eps = 1e-6);

/// mean(((w - mean) / mean)^2) * 100. Throws ZeroMeanAttribute.
double constancy_error(std::span<const double> series);

struct AttributeConfig {
  double segment_duration = 30.0;  // s
  double eps_jerk = 1e-6;          // m/s^3
  std::optional<double> min_speed;  // segments slower than this are dropped
};

struct DriverAttribute {
  std::string vehicle_id;
  VehicleClass class_label = VehicleClass::Unknown;
  JerkRegression regression;
  std::vector<JerkSegmentStats> segments;
  OmegaLSeries omega;
  double constancy_error = 0.0;  // percent
};

/// Needs jerk on every sample. Throws InsufficientData when fewer than two
/// usable segments remain.
DriverAttribute driver_attribute(const VehicleTrajectory& traj, const AttributeConfig& cfg = {});

struct AttributeReport {
  std::vector<DriverAttribute> attributes;
  std::vector<std::pair<std::string, std::string>> unavailable;  // vehicle id, reason
};

AttributeReport compute_attributes(const Dataset& ds, const AttributeConfig& cfg = {});

/// id,class,a,b,r,omega_l,ce,n_segments
std::string attributes_csv(const AttributeReport& report);
/// id,segment,c_absave,c_std,c_mean,n_samples,omega_l
std::string segments_csv(const AttributeReport& report);

}  // namespace hetflow

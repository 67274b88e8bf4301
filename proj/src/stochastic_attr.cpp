#include "hetflow/stochastic_attr.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "hetflow/csv.hpp"
#include "hetflow/error.hpp"
#include "hetflow/stats.hpp"

namespace hetflow {

using csv::format_double;

JerkSegmentStats jerk_segment_stats(std::span<const double> jerk, std::size_t segment_index) {
  if (jerk.size() < 2) throw Error(Errc::TooShort, "jerk segment needs at least two samples");
  JerkSegmentStats s;
  s.segment_index = segment_index;
  s.n_samples = jerk.size();
  s.c_mean = stats::mean(jerk);
  s.c_absave = stats::abs_mean(jerk);
  s.c_std = stats::pstddev(jerk);
  return s;
}

JerkRegression fit_jerk_regression(std::span<const JerkSegmentStats> stats) {
  if (stats.size() < 2) throw Error(Errc::DegenerateRegression, "regression needs at least two segments");
  const double n = static_cast<double>(stats.size());
  double mx = 0.0, my = 0.0;
  for (const auto& s : stats) {
    mx += s.c_absave;
    my += s.c_std;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& s : stats) {
    const double dx = s.c_absave - mx, dy = s.c_std - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (!(sxx > 0.0)) throw Error(Errc::DegenerateRegression, "all segments share the same mean absolute jerk");
  JerkRegression r;
  r.b = sxy / sxx;
  r.a = my - r.b * mx;
  r.r = syy > 0.0 ? std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0) : 0.0;
  return r;
}

OmegaLSeries omega_l(std::span<const JerkSegmentStats> stats, double a, double eps) {
  OmegaLSeries out;
  for (const auto& s : stats) {
    if (s.c_absave <= eps) {
      out.skipped.push_back(s.segment_index);
      continue;
    }
    out.values.push_back((s.c_std - a) / s.c_absave);
    out.segment_indices.push_back(s.segment_index);
  }
  if (out.values.empty()) throw Error(Errc::NoValidSegments, "no segment has mean absolute jerk above threshold");
  out.mean = stats::mean(out.values);
  return out;
}

double constancy_error(std::span<const double> series) {
  if (series.empty()) throw Error(Errc::InvalidArgument, "constancy error of an empty series");
  const double m = stats::mean(series);
  if (m == 0.0 || !std::isfinite(m)) throw Error(Errc::ZeroMeanAttribute, "attribute series has zero mean");
  double acc = 0.0;
  for (double w : series) acc += ((w - m) / m) * ((w - m) / m);
  return acc / static_cast<double>(series.size()) * 100.0;
}

DriverAttribute driver_attribute(const VehicleTrajectory& traj, const AttributeConfig& cfg) {
  for (const auto& s : traj.samples)
    if (!s.jerk) throw Error(Errc::InvalidArgument, "vehicle " + traj.vehicle_id + " has no derived jerk");
  DriverAttribute out;
  out.vehicle_id = traj.vehicle_id;
  out.class_label = traj.class_label;
  const auto ranges = segment_trajectory(traj, cfg.segment_duration);
  std::vector<double> jerk;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const auto& r = ranges[i];
    if (cfg.min_speed) {
      double v = 0.0;
      for (std::size_t k = r.begin; k < r.end; ++k) v += traj.samples[k].speed.value_or(0.0);
      if (v / static_cast<double>(r.size()) < *cfg.min_speed) continue;
    }
    jerk.clear();
    for (std::size_t k = r.begin; k < r.end; ++k) jerk.push_back(*traj.samples[k].jerk);
    if (jerk.size() >= 2) out.segments.push_back(jerk_segment_stats(jerk, i));
  }
  if (out.segments.size() < 2)
    throw Error(Errc::InsufficientData, "vehicle " + traj.vehicle_id + " has fewer than two usable segments");
  out.regression = fit_jerk_regression(out.segments);
  out.omega = omega_l(out.segments, out.regression.a, cfg.eps_jerk);
  out.constancy_error = constancy_error(out.omega.values);
  return out;
}

AttributeReport compute_attributes(const Dataset& ds, const AttributeConfig& cfg) {
  AttributeReport report;
  for (const auto& t : ds.trajectories) {
    try {
      report.attributes.push_back(driver_attribute(t, cfg));
    } catch (const Error& e) {
      if (e.code() == Errc::InvalidArgument) throw;
      report.unavailable.emplace_back(t.vehicle_id, e.what());
    }
  }
  return report;
}

std::string attributes_csv(const AttributeReport& report) {
  std::ostringstream os;
  os << "id,class,a,b,r,omega_l,ce,n_segments\n";
  for (const auto& d : report.attributes)
    os << d.vehicle_id << ',' << to_string(d.class_label) << ',' << format_double(d.regression.a) << ','
       << format_double(d.regression.b) << ',' << format_double(d.regression.r) << ',' << format_double(d.omega.mean)
       << ',' << format_double(d.constancy_error) << ',' << d.segments.size() << '\n';
  return os.str();
}

std::string segments_csv(const AttributeReport& report) {
  std::ostringstream os;
  os << "id,segment,c_absave,c_std,c_mean,n_samples,omega_l\n";
  for (const auto& d : report.attributes) {
    std::size_t w = 0;
    for (const auto& s : d.segments) {
      os << d.vehicle_id << ',' << s.segment_index << ',' << format_double(s.c_absave) << ','
         << format_double(s.c_std) << ',' << format_double(s.c_mean) << ',' << s.n_samples << ',';
      if (w < d.omega.segment_indices.size() && d.omega.segment_indices[w] == s.segment_index)
        os << format_double(d.omega.values[w++]);
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace hetflow

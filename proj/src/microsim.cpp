#include "hetflow/microsim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>

#include "hetflow/error.hpp"

namespace hetflow {

void validate(const OvmParams& p) {
  if (!(p.tau > 0.0) || !(p.beta >= 0.0) || !(p.v_free > 0.0) || !(p.time_gap > 0.0) || !(p.min_gap >= 0.0) ||
      !(p.length > 0.0))
    throw Error(Errc::InvalidArgument, "OVM parameters violate tau>0, beta>=0, v_free>0, T>0, s0>=0, l>0");
}

OvmParams hv_params() { return {1.7, 0.9, 40.0, 0.5, 15.0, 5.0}; }
OvmParams av1_params() { return {1.7, 0.9, 50.0, 0.7, 5.0, 5.0}; }
OvmParams av2_params() { return {1.0, 0.6, 30.0, 1.2, 5.0, 5.0}; }

double ovm_desired_speed(const OvmParams& p, double gap) {
  if (!(p.time_gap > 0.0)) return gap > p.min_gap ? p.v_free : 0.0;
  return std::max(0.0, std::min(p.v_free, (gap - p.min_gap) / p.time_gap));
}

double ovm_acceleration(const OvmParams& p, double v, double gap, double v_leader) {
  return (ovm_desired_speed(p, gap) - v) / p.tau + p.beta * (v_leader - v);
}

std::vector<NamedVehicle> repeat_pattern(const std::vector<NamedVehicle>& pattern, int count) {
  if (pattern.empty() || count <= 0) throw Error(Errc::InvalidArgument, "empty placement pattern");
  std::vector<NamedVehicle> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(pattern[static_cast<std::size_t>(i) % pattern.size()]);
  return out;
}

RingScenario reference_scenario(const std::string& name, int n_vehicles) {
  const NamedVehicle hv{"HV", VehicleClass::HV, hv_params()};
  const NamedVehicle av1{"AV1", VehicleClass::AV, av1_params()};
  const NamedVehicle av2{"AV2", VehicleClass::AV, av2_params()};
  RingScenario s;
  if (name == "hv") s.vehicles = repeat_pattern({hv}, n_vehicles);
  else if (name == "av1") s.vehicles = repeat_pattern({av1}, n_vehicles);
  else if (name == "hv_av1") s.vehicles = repeat_pattern({hv, av1}, n_vehicles);
  else if (name == "hv_av1_hv_av2") s.vehicles = repeat_pattern({hv, av1, hv, av2}, n_vehicles);
  else throw Error(Errc::InvalidArgument, "unknown reference scenario '" + name + "'");
  return s;
}

std::vector<double> initial_gaps(const RingScenario& s) {
  const std::size_t n = s.vehicles.size();
  if (n < 2) throw Error(Errc::InfeasibleScenario, "ring needs at least two vehicles");
  double total_length = 0.0;
  for (const auto& v : s.vehicles) total_length += v.params.length;
  const double mean_length = total_length / static_cast<double>(n);
  const double s_star = s.road_length / static_cast<double>(n) - mean_length;
  if (!(s_star > 0.0)) throw Error(Errc::InfeasibleScenario, "equilibrium gap L/N - l is not positive");

  std::vector<double> gaps(n);
  double used = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(i + 1) / static_cast<double>(n);
    gaps[i] = s_star * (1.0 + s.init_gap_amplitude * std::sin(phase));
    used += gaps[i];
  }
  gaps[n - 1] = s.road_length - used - total_length;
  for (double g : gaps)
    if (!(g > 0.0)) throw Error(Errc::InfeasibleScenario, "non-positive initial gap");
  return gaps;
}

namespace {

struct PlatoonState {
  std::vector<double> x;  // unwrapped rear-bumper positions
  std::vector<double> v;
};

class RingDynamics {
 public:
  RingDynamics(const RingScenario& s) : s_(s), n_(s.vehicles.size()) {}

  double gap(const std::vector<double>& x, std::size_t i) const {
    const std::size_t lead = (i + 1) % n_;
    const double wrap = lead == 0 ? s_.road_length : 0.0;
    return x[lead] + wrap - x[i] - s_.vehicles[lead].params.length;
  }

  double accel(const PlatoonState& st, std::size_t i) const {
    const std::size_t lead = (i + 1) % n_;
    return ovm_acceleration(s_.vehicles[i].params, st.v[i], gap(st.x, i), st.v[lead]);
  }

  void rhs(const PlatoonState& st, PlatoonState& d) const {
    for (std::size_t i = 0; i < n_; ++i) {
      d.x[i] = st.v[i];
      d.v[i] = accel(st, i);
    }
  }

  void rk4_step(PlatoonState& st, double h) const {
    PlatoonState k1{std::vector<double>(n_), std::vector<double>(n_)}, k2 = k1, k3 = k1, k4 = k1, tmp = k1;
    auto axpy = [&](const PlatoonState& base, const PlatoonState& k, double a, PlatoonState& out) {
      for (std::size_t i = 0; i < n_; ++i) {
        out.x[i] = base.x[i] + a * k.x[i];
        out.v[i] = base.v[i] + a * k.v[i];
      }
    };
    rhs(st, k1);
    axpy(st, k1, 0.5 * h, tmp);
    rhs(tmp, k2);
    axpy(st, k2, 0.5 * h, tmp);
    rhs(tmp, k3);
    axpy(st, k3, h, tmp);
    rhs(tmp, k4);
    for (std::size_t i = 0; i < n_; ++i) {
      st.x[i] += h / 6.0 * (k1.x[i] + 2.0 * k2.x[i] + 2.0 * k3.x[i] + k4.x[i]);
      st.v[i] += h / 6.0 * (k1.v[i] + 2.0 * k2.v[i] + 2.0 * k3.v[i] + k4.v[i]);
      st.v[i] = std::max(0.0, st.v[i]);
    }
  }

 private:
  const RingScenario& s_;
  std::size_t n_;
};

}  // namespace

Dataset simulate_ring(const RingScenario& s) {
  if (!(s.dt > 0.0) || !(s.sim_duration > 0.0) || s.record_every < 1)
    throw Error(Errc::InvalidArgument, "ring scenario requires dt > 0, duration > 0, record_every >= 1");
  double tau_min = INFINITY, v_max = 0.0, total_length = 0.0;
  for (const auto& v : s.vehicles) {
    validate(v.params);
    tau_min = std::min(tau_min, v.params.tau);
    v_max = std::max(v_max, v.params.v_free);
    total_length += v.params.length;
  }
  if (!(s.road_length > total_length)) throw Error(Errc::InfeasibleScenario, "vehicles do not fit on the ring");
  if (s.dt > tau_min / 10.0 + 1e-15)
    throw Error(Errc::InvalidArgument, "dt must not exceed tau_min / 10");

  const std::size_t n = s.vehicles.size();
  const auto gaps = initial_gaps(s);
  RingDynamics dyn(s);
  PlatoonState st{std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t i = 0; i + 1 < n; ++i) st.x[i + 1] = st.x[i] + gaps[i] + s.vehicles[i + 1].params.length;
  for (std::size_t i = 0; i < n; ++i) st.v[i] = ovm_desired_speed(s.vehicles[i].params, gaps[i]);

  Dataset ds;
  ds.dataset_id = "ring";
  ds.topology = Topology::Ring;
  ds.road_length = s.road_length;
  ds.trajectories.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "v%03zu_%s", i + 1, s.vehicles[i].name.c_str());
    ds.trajectories[i].vehicle_id = id;
    ds.trajectories[i].class_label = s.vehicles[i].class_label;
    ds.trajectories[i].length = s.vehicles[i].params.length;
  }

  auto record = [&](double t) {
    for (std::size_t i = 0; i < n; ++i) {
      TrajectorySample smp;
      smp.time = t;
      double x = std::fmod(st.x[i], s.road_length);
      if (x < 0.0) x += s.road_length;
      if (x >= s.road_length) x = 0.0;
      smp.position = x;
      smp.speed = st.v[i];
      double a = dyn.accel(st, i);
      if (st.v[i] <= 0.0 && a < 0.0) a = 0.0;
      smp.acceleration = a;
      ds.trajectories[i].samples.push_back(smp);
    }
  };

  const auto steps = static_cast<long long>(std::llround(s.sim_duration / s.dt));
  const double v_limit = 10.0 * v_max;
  record(0.0);
  for (long long k = 1; k <= steps; ++k) {
    dyn.rk4_step(st, s.dt);
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(st.v[i]) || std::abs(st.v[i]) > v_limit)
        throw Error(Errc::BlowUp, "speed of vehicle " + ds.trajectories[i].vehicle_id + " diverged at t=" +
                                      std::to_string(static_cast<double>(k) * s.dt));
      if (!(dyn.gap(st.x, i) > 0.0))
        throw Error(Errc::BlowUp, "collision of vehicle " + ds.trajectories[i].vehicle_id + " at t=" +
                                      std::to_string(static_cast<double>(k) * s.dt));
    }
    if (k % s.record_every == 0) record(static_cast<double>(k) * s.dt);
  }
  for (auto& t : ds.trajectories) t.sample_rate = estimate_sample_rate(t.samples);
  return ds;
}

RingScenario load_ring_scenario(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("scenario config: ") + e.what());
  }
  RingScenario s;
  s.road_length = j.value("road_length", s.road_length);
  s.dt = j.value("dt", s.dt);
  s.sim_duration = j.value("duration", s.sim_duration);
  s.init_gap_amplitude = j.value("amplitude", s.init_gap_amplitude);
  s.record_every = j.value("record_every", s.record_every);

  std::map<std::string, NamedVehicle> types = {
      {"HV", {"HV", VehicleClass::HV, hv_params()}},
      {"AV1", {"AV1", VehicleClass::AV, av1_params()}},
      {"AV2", {"AV2", VehicleClass::AV, av2_params()}},
  };
  if (j.contains("types")) {
    for (const auto& [name, t] : j.at("types").items()) {
      NamedVehicle nv{name, VehicleClass::Unknown, types.count(name) ? types[name].params : OvmParams{}};
      if (types.count(name)) nv.class_label = types[name].class_label;
      nv.params.tau = t.value("tau", nv.params.tau);
      nv.params.beta = t.value("beta", nv.params.beta);
      nv.params.v_free = t.value("v_free", nv.params.v_free);
      nv.params.time_gap = t.value("time_gap", nv.params.time_gap);
      nv.params.min_gap = t.value("min_gap", nv.params.min_gap);
      nv.params.length = t.value("length", nv.params.length);
      if (t.contains("class")) nv.class_label = parse_vehicle_class(t.at("class").get<std::string>());
      types[name] = nv;
    }
  }
  auto lookup = [&](const std::string& name) {
    const auto it = types.find(name);
    if (it == types.end()) throw Error(Errc::InvalidArgument, "unknown vehicle type '" + name + "'");
    return it->second;
  };
  if (j.contains("placement")) {
    for (const auto& name : j.at("placement")) s.vehicles.push_back(lookup(name.get<std::string>()));
  } else if (j.contains("scenario")) {
    const auto base = reference_scenario(j.at("scenario").get<std::string>(), j.value("count", 30));
    s.vehicles = base.vehicles;
  } else {
    std::vector<NamedVehicle> pattern;
    for (const auto& name : j.at("pattern")) pattern.push_back(lookup(name.get<std::string>()));
    s.vehicles = repeat_pattern(pattern, j.value("count", 30));
  }
  return s;
}

}  // namespace hetflow

#include "hetflow/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <unordered_map>

#include "hetflow/csv.hpp"
#include "hetflow/error.hpp"

namespace hetflow {

std::string to_string(VehicleClass c) {
  switch (c) {
    case VehicleClass::HV: return "HV";
    case VehicleClass::AV: return "AV";
    case VehicleClass::Unknown: return "UNKNOWN";
  }
  return "UNKNOWN";
}

VehicleClass parse_vehicle_class(const std::string& s) {
  std::string u;
  for (char c : s) u.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  if (u == "HV") return VehicleClass::HV;
  if (u == "AV" || u.rfind("AV", 0) == 0) return VehicleClass::AV;
  return VehicleClass::Unknown;
}

const VehicleTrajectory* Dataset::find(const std::string& vehicle_id) const {
  for (const auto& t : trajectories)
    if (t.vehicle_id == vehicle_id) return &t;
  return nullptr;
}

CsvSchema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoFailure, "cannot open schema " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, "schema " + path.string() + ": " + e.what());
  }
  CsvSchema s;
  auto get = [&](const char* key, std::string& field) {
    if (j.contains(key)) field = j.at(key).get<std::string>();
  };
  get("vehicle_id", s.vehicle_id);
  get("time", s.time);
  get("position", s.position);
  get("speed", s.speed);
  get("acceleration", s.acceleration);
  get("jerk", s.jerk);
  get("lane", s.lane);
  get("class", s.class_label);
  get("length", s.length);
  get("dataset_id", s.dataset_id);
  if (j.contains("topology")) {
    const auto topo = j.at("topology").get<std::string>();
    if (topo == "ring" || topo == "RING") s.topology = Topology::Ring;
    else if (topo == "open" || topo == "OPEN") s.topology = Topology::Open;
    else throw Error(Errc::InvalidArgument, "unknown topology '" + topo + "'");
  }
  if (j.contains("road_length")) s.road_length = j.at("road_length").get<double>();
  if (s.topology == Topology::Ring && !s.road_length)
    throw Error(Errc::InvalidArgument, "ring topology requires road_length");
  return s;
}

void save_schema(const CsvSchema& s, const std::filesystem::path& path) {
  nlohmann::json j = {
      {"vehicle_id", s.vehicle_id}, {"time", s.time},       {"position", s.position},
      {"speed", s.speed},           {"acceleration", s.acceleration},
      {"jerk", s.jerk},             {"lane", s.lane},       {"class", s.class_label},
      {"length", s.length},         {"dataset_id", s.dataset_id},
      {"topology", s.topology == Topology::Ring ? "ring" : "open"},
  };
  if (s.road_length) j["road_length"] = *s.road_length;
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoFailure, "cannot write schema " + path.string());
  out << j.dump(2) << '\n';
}

namespace {

Dataset parse_csv(std::istream& in, const CsvSchema& schema, const std::string& source) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::EmptyDataset, source + " has no header");
  const auto header = csv::split_line(line);
  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto c_id = column(schema.vehicle_id);
  const auto c_t = column(schema.time);
  const auto c_x = column(schema.position);
  if (!c_id || !c_t || !c_x)
    throw Error(Errc::InvalidArgument, source + ": header lacks one of the required columns '" +
                                           schema.vehicle_id + "', '" + schema.time + "', '" +
                                           schema.position + "'");
  const auto c_v = column(schema.speed);
  const auto c_a = column(schema.acceleration);
  const auto c_j = column(schema.jerk);
  const auto c_lane = column(schema.lane);
  const auto c_class = column(schema.class_label);
  const auto c_len = column(schema.length);

  Dataset ds;
  ds.dataset_id = schema.dataset_id;
  ds.topology = schema.topology;
  ds.road_length = schema.road_length;
  std::unordered_map<std::string, std::size_t> index;

  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (csv::trim(line).empty()) continue;
    const auto f = csv::split_line(line);
    if (f.size() != header.size())
      throw Error(Errc::MalformedRow, source + " row " + std::to_string(row) + ": expected " +
                                          std::to_string(header.size()) + " fields, got " +
                                          std::to_string(f.size()));
    auto num = [&](std::size_t c, const char* what) {
      double v = 0.0;
      if (!csv::parse_double(f[c], v))
        throw Error(Errc::MalformedRow, source + " row " + std::to_string(row) + ": non-numeric " +
                                            what + " '" + f[c] + "'");
      return v;
    };
    auto opt_num = [&](const std::optional<std::size_t>& c, const char* what) -> std::optional<double> {
      if (!c || f[*c].empty()) return std::nullopt;
      return num(*c, what);
    };

    const std::string& id = f[*c_id];
    if (id.empty()) throw Error(Errc::MalformedRow, source + " row " + std::to_string(row) + ": empty vehicle id");
    TrajectorySample s;
    s.time = num(*c_t, "time");
    s.position = num(*c_x, "position");
    s.speed = opt_num(c_v, "speed");
    s.acceleration = opt_num(c_a, "acceleration");
    s.jerk = opt_num(c_j, "jerk");
    if (c_lane && !f[*c_lane].empty()) {
      int lane = 0;
      if (!csv::parse_int(f[*c_lane], lane))
        throw Error(Errc::MalformedRow, source + " row " + std::to_string(row) + ": non-integer lane");
      s.lane = lane;
    }

    auto [it, inserted] = index.try_emplace(id, ds.trajectories.size());
    if (inserted) {
      VehicleTrajectory t;
      t.vehicle_id = id;
      if (c_class && !f[*c_class].empty()) t.class_label = parse_vehicle_class(f[*c_class]);
      if (auto len = opt_num(c_len, "length")) {
        if (*len <= 0.0)
          throw Error(Errc::MalformedRow, source + " row " + std::to_string(row) + ": non-positive length");
        t.length = *len;
      }
      ds.trajectories.push_back(std::move(t));
    }
    ds.trajectories[it->second].samples.push_back(s);
  }

  if (ds.trajectories.empty()) throw Error(Errc::EmptyDataset, source + " contains no samples");
  for (auto& t : ds.trajectories) {
    // Rows of one vehicle must already be in increasing time order.
    for (std::size_t k = 1; k < t.samples.size(); ++k) {
      if (!(t.samples[k].time > t.samples[k - 1].time))
        throw Error(Errc::NonMonotoneTime, "vehicle " + t.vehicle_id + ": time " +
                                               csv::format_double(t.samples[k].time) + " after " +
                                               csv::format_double(t.samples[k - 1].time));
    }
    t.sample_rate = estimate_sample_rate(t.samples);
  }
  return ds;
}

}  // namespace

Dataset ingest_trajectories(const std::filesystem::path& source, const CsvSchema& schema) {
  std::ifstream in(source);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + source.string());
  return parse_csv(in, schema, source.string());
}

Dataset ingest_trajectories_text(const std::string& text, const CsvSchema& schema) {
  std::istringstream in(text);
  return parse_csv(in, schema, "<text>");
}

std::string write_trajectories_text(const Dataset& ds) {
  std::ostringstream out;
  out << "vehicle_id,t,x,v,a,j,lane,class,length\n";
  auto opt = [](const std::optional<double>& v) { return v ? csv::format_double(*v) : std::string(); };
  for (const auto& t : ds.trajectories) {
    const std::string cls = to_string(t.class_label);
    const std::string len = csv::format_double(t.length);
    for (const auto& s : t.samples) {
      out << t.vehicle_id << ',' << csv::format_double(s.time) << ',' << csv::format_double(s.position) << ','
          << opt(s.speed) << ',' << opt(s.acceleration) << ',' << opt(s.jerk) << ','
          << (s.lane ? std::to_string(*s.lane) : std::string()) << ',' << cls << ',' << len << '\n';
    }
  }
  return out.str();
}

void write_trajectories(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoFailure, "cannot write " + path.string());
  out << write_trajectories_text(ds);
  if (!out) throw Error(Errc::IoFailure, "write failed for " + path.string());
}

double estimate_sample_rate(const std::vector<TrajectorySample>& samples) {
  if (samples.size() < 2) return 0.0;
  const double span = samples.back().time - samples.front().time;
  return span > 0.0 ? static_cast<double>(samples.size() - 1) / span : 0.0;
}

namespace {

std::vector<double> central_difference(const std::vector<double>& f, double h) {
  const std::size_t n = f.size();
  std::vector<double> d(n);
  d[0] = (f[1] - f[0]) / h;
  d[n - 1] = (f[n - 1] - f[n - 2]) / h;
  for (std::size_t i = 1; i + 1 < n; ++i) d[i] = (f[i + 1] - f[i - 1]) / (2.0 * h);
  return d;
}

// Symmetric moving average; the window shrinks near the ends so that linear
// signals pass unchanged.
std::vector<double> moving_average(const std::vector<double>& f, std::size_t half_width) {
  if (half_width == 0) return f;
  const std::size_t n = f.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t w = std::min({half_width, i, n - 1 - i});
    double s = 0.0;
    for (std::size_t k = i - w; k <= i + w; ++k) s += f[k];
    out[i] = s / static_cast<double>(2 * w + 1);
  }
  return out;
}

}  // namespace

std::vector<double> unwrap_positions(const std::vector<TrajectorySample>& samples,
                                     std::optional<double> road_length) {
  std::vector<double> x(samples.size());
  double offset = 0.0;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    if (road_length && k > 0) {
      const double jump = samples[k].position - samples[k - 1].position;
      if (jump < -0.5 * *road_length) offset += *road_length;
      else if (jump > 0.5 * *road_length) offset -= *road_length;
    }
    x[k] = samples[k].position + offset;
  }
  return x;
}

VehicleTrajectory derive_kinematics(const VehicleTrajectory& traj, const SmoothingConfig& cfg,
                                    std::optional<double> road_length) {
  if (!(cfg.resample_dt > 0.0) || !(cfg.window >= 0.0))
    throw Error(Errc::InvalidArgument, "smoothing config requires resample_dt > 0 and window >= 0");
  const auto& in = traj.samples;
  if (in.size() < 2) throw Error(Errc::TooShort, "vehicle " + traj.vehicle_id + " has fewer than 2 samples");

  const double h = cfg.resample_dt;
  const double t0 = in.front().time;
  const auto steps = static_cast<std::size_t>(std::floor((in.back().time - t0) / h + 1e-9));
  const std::size_t n = steps + 1;
  if (n < 4)
    throw Error(Errc::TooShort, "vehicle " + traj.vehicle_id + " has " + std::to_string(n) +
                                    " resampled samples; jerk needs at least 4");

  VehicleTrajectory out;
  out.vehicle_id = traj.vehicle_id;
  out.class_label = traj.class_label;
  out.length = traj.length;
  out.samples.resize(n);

  const auto px = unwrap_positions(in, road_length);
  std::vector<double> x(n);
  std::size_t seg = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = t0 + static_cast<double>(k) * h;
    while (seg + 2 < in.size() && in[seg + 1].time <= t) ++seg;
    const auto& a = in[seg];
    const auto& b = in[seg + 1];
    const double w = std::clamp((t - a.time) / (b.time - a.time), 0.0, 1.0);
    const double xa = px[seg], xb = px[seg + 1];
    x[k] = w == 0.0 ? xa : (w == 1.0 ? xb : xa + w * (xb - xa));
    out.samples[k].time = t;
    out.samples[k].position = x[k];
    if (road_length) {
      double wrapped = std::fmod(x[k], *road_length);
      if (wrapped < 0.0) wrapped += *road_length;
      out.samples[k].position = wrapped;
    }
    out.samples[k].lane = (w == 1.0 ? b : a).lane;
  }

  const auto half = static_cast<std::size_t>(std::llround(cfg.window / h));
  const auto v = moving_average(central_difference(x, h), half);
  const auto acc = moving_average(central_difference(v, h), half);
  const auto jerk = moving_average(central_difference(acc, h), half);
  for (std::size_t k = 0; k < n; ++k) {
    out.samples[k].speed = v[k];
    out.samples[k].acceleration = acc[k];
    out.samples[k].jerk = jerk[k];
  }
  out.sample_rate = estimate_sample_rate(out.samples);
  return out;
}

Dataset derive_kinematics(const Dataset& ds, const SmoothingConfig& cfg) {
  Dataset out = ds;
  const auto ring = ds.topology == Topology::Ring ? ds.road_length : std::nullopt;
  for (auto& t : out.trajectories) t = derive_kinematics(t, cfg, ring);
  return out;
}

std::size_t count_reverse_motion(const VehicleTrajectory& traj, double eps) {
  std::size_t count = 0;
  for (const auto& s : traj.samples)
    if (s.speed && *s.speed < -eps) ++count;
  return count;
}

std::vector<IndexRange> segment_trajectory(const VehicleTrajectory& traj, double segment_duration) {
  if (!(segment_duration > 0.0)) throw Error(Errc::InvalidArgument, "segment_duration must be positive");
  const std::size_t n = traj.samples.size();
  std::vector<IndexRange> out;
  if (n < 2) return out;
  const double dt = (traj.end_time() - traj.start_time()) / static_cast<double>(n - 1);
  const auto per = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(segment_duration / dt)));
  std::size_t begin = 0;
  for (; begin + per <= n; begin += per) out.push_back({begin, begin + per});
  const std::size_t rest = n - begin;
  if (rest > 0 && 2 * rest >= per) out.push_back({begin, n});
  return out;
}

}  // namespace hetflow

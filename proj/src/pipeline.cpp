#include "hetflow/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "hetflow/csv.hpp"
#include "hetflow/error.hpp"
#include "hetflow/microsim.hpp"
#include "hetflow/omega_recon.hpp"
#include "hetflow/rng.hpp"
#include "hetflow/stats.hpp"

namespace hetflow {

namespace fs = std::filesystem;
using json = nlohmann::json;
using csv::format_double;

namespace {

/// Shortest text that parses back to the same double.
std::string short_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

bool parse_value(const std::string& s, double& out) {
  if (csv::parse_double(s, out)) return true;
  if (s == "nan" || s == "-nan") {
    out = std::numeric_limits<double>::quiet_NaN();
    return true;
  }
  if (s == "inf" || s == "-inf") {
    out = s[0] == '-' ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
    return true;
  }
  return false;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ---------------------------------------------------------------- reports

double Report::value(const std::string& experiment, const std::string& condition, const std::string& metric) const {
  for (const auto& r : rows)
    if (r.experiment == experiment && r.condition == condition && r.metric == metric) return r.value;
  throw Error(Errc::InvalidArgument, "no report row " + experiment + "/" + condition + "/" + metric);
}

std::string hash_text(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string report_csv(const Report& r) {
  std::ostringstream os;
  os << "config_hash,seed,experiment,condition,metric,value\n";
  for (const auto& row : r.rows)
    os << r.config_hash << ',' << r.seed << ',' << row.experiment << ',' << row.condition << ',' << row.metric << ','
       << format_double(row.value) << '\n';
  return os.str();
}

Report parse_report_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || csv::trim(line) != "config_hash,seed,experiment,condition,metric,value")
    throw Error(Errc::MalformedRow, "report header missing");
  Report r;
  bool first = true;
  std::size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (csv::trim(line).empty()) continue;
    const auto f = csv::split_line(line);
    if (f.size() != 6) throw Error(Errc::MalformedRow, "report line " + std::to_string(n) + " needs 6 fields");
    ReportRow row{f[2], f[3], f[4], 0.0};
    if (!parse_value(f[5], row.value))
      throw Error(Errc::MalformedRow, "report line " + std::to_string(n) + ": bad value '" + f[5] + "'");
    std::uint64_t seed = 0;
    const auto sr = std::from_chars(f[1].data(), f[1].data() + f[1].size(), seed);
    if (sr.ec != std::errc() || sr.ptr != f[1].data() + f[1].size())
      throw Error(Errc::MalformedRow, "report line " + std::to_string(n) + ": bad seed");
    if (first) {
      r.config_hash = f[0];
      r.seed = seed;
      first = false;
    } else if (f[0] != r.config_hash || seed != r.seed) {
      throw Error(Errc::MalformedRow, "report line " + std::to_string(n) + ": mixed config hash or seed");
    }
    r.rows.push_back(std::move(row));
  }
  return r;
}

std::string report_json(const Report& r) {
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"experiment", row.experiment},
                    {"condition", row.condition},
                    {"metric", row.metric},
                    {"value", number_or_null(row.value)}});
  json timings = json::object();
  for (const auto& [k, v] : r.timings) timings[k] = v;
  json j{{"config_hash", r.config_hash}, {"seed", r.seed}, {"rows", rows}, {"timings", timings}};
  return j.dump(2) + "\n";
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoFailure, "cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw Error(Errc::IoFailure, "cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot write " + path.string());
  out << text;
  out.flush();
  if (!out) throw Error(Errc::IoFailure, "write failed for " + path.string());
}

void emit_report(const Report& r, const fs::path& dir, const std::string& stem) {
  write_text_file(dir / (stem + ".csv"), report_csv(r));
  write_text_file(dir / (stem + ".json"), report_json(r));
}

// --------------------------------------------------------------- analyses

double fd_spread(const CellField& field, double bin_width, std::size_t min_count) {
  if (!(bin_width > 0.0)) throw Error(Errc::InvalidArgument, "bin width must be positive");
  std::map<long, std::vector<double>> bins;
  for (std::size_t c = 0; c < field.mask.size(); ++c)
    if (field.mask[c]) bins[static_cast<long>(std::floor(field.rho[c] / bin_width))].push_back(field.flow[c]);
  double sum = 0.0;
  std::size_t used = 0;
  for (const auto& [b, q] : bins) {
    if (q.size() < min_count) continue;
    sum += stats::pstddev(q);
    ++used;
  }
  if (used == 0) throw Error(Errc::InsufficientData, "no density bin holds enough cells");
  return sum / static_cast<double>(used);
}

std::vector<FdSample> fd_samples(const CellField& field, const OmegaField& omega) {
  if (omega.omega.size() != field.rho.size()) throw Error(Errc::DimensionMismatch, "omega field does not match cells");
  std::vector<FdSample> out;
  for (std::size_t c = 0; c < field.mask.size(); ++c)
    if (field.mask[c] && omega.mask[c]) out.push_back({field.rho[c], omega.omega[c], field.speed[c]});
  return out;
}

std::vector<FdSample> fd_samples(const CellField& field) {
  std::vector<FdSample> out;
  for (std::size_t c = 0; c < field.mask.size(); ++c)
    if (field.mask[c]) out.push_back({field.rho[c], 0.0, field.speed[c]});
  return out;
}

OmegaField omega_from_field(const CellField& field, OmegaProvenance provenance) {
  if (!field.omega) throw Error(Errc::InvalidArgument, "cell field carries no omega column");
  OmegaField o;
  o.grid = field.grid;
  o.nt = field.nt;
  o.nx = field.nx;
  o.provenance = provenance;
  o.omega.assign(field.rho.size(), 0.0);
  o.mask.assign(field.rho.size(), 0);
  o.flags.assign(field.rho.size(), 0);
  for (std::size_t c = 0; c < field.mask.size(); ++c) {
    if (!field.mask[c]) continue;
    const double w = (*field.omega)[c];
    if (std::isfinite(w)) {
      o.omega[c] = w;
      o.mask[c] = 1;
    } else {
      ++o.masked_cells;
    }
  }
  return o;
}

// --------------------------------------------------------------- pipeline

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> s{"simulate-micro", "ingest",    "kinematics", "calibrate-ovm", "attributes",
                                          "grid",           "omega",     "train-fd",   "train-map",     "simulate-pde"};
  return s;
}

namespace {

PipelineConfig default_pipeline_config() {
  PipelineConfig c;
  c.ga.iterations = 100;
  c.fd.epochs = 5000;
  return c;
}

void check_stage_name(const std::string& s) {
  const auto& all = pipeline_stages();
  if (std::find(all.begin(), all.end(), s) == all.end()) throw Error(Errc::InvalidArgument, "unknown stage '" + s + "'");
}

void validate(const PipelineConfig& c) {
  for (const auto& s : c.stages) check_stage_name(s);
  validate(c.ga);
  validate(c.fd);
  validate(c.mapping);
  if (c.omega_method != "abundant" && c.omega_method != "scarce")
    throw Error(Errc::InvalidArgument, "omega method must be 'abundant' or 'scarce'");
  if (!(c.mapping_train_fraction > 0.0 && c.mapping_train_fraction < 1.0))
    throw Error(Errc::InvalidArgument, "mapping train fraction must lie in (0, 1)");
  if (!(c.dx > 0.0) || !(c.dt > 0.0)) throw Error(Errc::InvalidArgument, "grid steps must be positive");
  if (c.pde_refine < 1) throw Error(Errc::InvalidArgument, "pde refine must be at least 1");
  if (!(c.pde_cfl > 0.0 && c.pde_cfl <= 1.0)) throw Error(Errc::InvalidArgument, "cfl must lie in (0, 1]");
  if (c.closures.empty()) throw Error(Errc::InvalidArgument, "at least one closure is required");
  for (const auto& k : c.closures)
    if (k != "GSOM" && k != "ARZ" && k != "LWR") throw Error(Errc::InvalidArgument, "unknown closure '" + k + "'");
  load_ring_scenario(c.scenario_json);
}

json config_json(const PipelineConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["stages"] = c.stages;
  j["scenario"] = json::parse(c.scenario_json);
  json ingest = json::object();
  if (c.ingest_path) ingest["path"] = c.ingest_path->generic_string();
  if (c.schema_path) ingest["schema"] = c.schema_path->generic_string();
  j["ingest"] = ingest;
  j["kinematics"] = {{"window", c.kinematics.window}, {"resample_dt", c.kinematics.resample_dt}};
  j["calibration"] = {{"population", c.ga.population},
                      {"iterations", c.ga.iterations},
                      {"crossover_rate", c.ga.crossover_rate},
                      {"mutation_rate", c.ga.mutation_rate}};
  json attr{{"segment_duration", c.attributes.segment_duration}, {"eps_jerk", c.attributes.eps_jerk}};
  if (c.attributes.min_speed) attr["min_speed"] = *c.attributes.min_speed;
  j["attributes"] = attr;
  json grid{{"dx", c.dx}, {"dt", c.dt}};
  if (c.t0) grid["t0"] = *c.t0;
  if (c.t1) grid["t1"] = *c.t1;
  j["grid"] = grid;
  j["omega"] = {{"method", c.omega_method}};
  j["fd"] = {{"epochs", c.fd.epochs},
             {"hidden_layers", c.fd.hidden_layers},
             {"hidden_width", c.fd.hidden_width},
             {"train_fraction", c.fd.train_fraction},
             {"penalty", c.fd.penalty},
             {"n_penalty", c.fd.n_penalty},
             {"learning_rate", c.fd.learning_rate}};
  j["mapping"] = {{"variant", to_string(c.mapping.variant)},
                  {"hidden_layers", c.mapping.hidden_layers},
                  {"hidden_width", c.mapping.hidden_width},
                  {"epochs", c.mapping.epochs},
                  {"learning_rate", c.mapping.learning_rate},
                  {"train_fraction", c.mapping_train_fraction}};
  j["pde"] = {{"closures", c.closures}, {"refine", c.pde_refine}, {"cfl", c.pde_cfl}, {"arz_gamma", c.arz_gamma}};
  return j;
}

template <class T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::string canonical_config(const PipelineConfig& cfg) { return config_json(cfg).dump(); }

PipelineConfig parse_pipeline_config(const std::string& json_text) {
  PipelineConfig c = default_pipeline_config();
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("pipeline config is not valid JSON: ") + e.what());
  }
  try {
    get_if(j, "seed", c.seed);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    get_if(j, "stages", c.stages);
    if (j.contains("scenario")) c.scenario_json = j.at("scenario").dump();
    if (j.contains("ingest")) {
      const auto& b = j.at("ingest");
      if (b.contains("path")) c.ingest_path = b.at("path").get<std::string>();
      if (b.contains("schema")) c.schema_path = b.at("schema").get<std::string>();
    }
    if (j.contains("kinematics")) {
      const auto& b = j.at("kinematics");
      get_if(b, "window", c.kinematics.window);
      get_if(b, "resample_dt", c.kinematics.resample_dt);
    }
    if (j.contains("calibration")) {
      const auto& b = j.at("calibration");
      get_if(b, "population", c.ga.population);
      get_if(b, "iterations", c.ga.iterations);
      get_if(b, "crossover_rate", c.ga.crossover_rate);
      get_if(b, "mutation_rate", c.ga.mutation_rate);
    }
    if (j.contains("attributes")) {
      const auto& b = j.at("attributes");
      get_if(b, "segment_duration", c.attributes.segment_duration);
      get_if(b, "eps_jerk", c.attributes.eps_jerk);
      if (b.contains("min_speed")) c.attributes.min_speed = b.at("min_speed").get<double>();
    }
    if (j.contains("grid")) {
      const auto& b = j.at("grid");
      get_if(b, "dx", c.dx);
      get_if(b, "dt", c.dt);
      if (b.contains("t0")) c.t0 = b.at("t0").get<double>();
      if (b.contains("t1")) c.t1 = b.at("t1").get<double>();
    }
    if (j.contains("omega")) get_if(j.at("omega"), "method", c.omega_method);
    if (j.contains("fd")) {
      const auto& b = j.at("fd");
      get_if(b, "epochs", c.fd.epochs);
      get_if(b, "hidden_layers", c.fd.hidden_layers);
      get_if(b, "hidden_width", c.fd.hidden_width);
      get_if(b, "train_fraction", c.fd.train_fraction);
      get_if(b, "penalty", c.fd.penalty);
      get_if(b, "n_penalty", c.fd.n_penalty);
      get_if(b, "learning_rate", c.fd.learning_rate);
    }
    if (j.contains("mapping")) {
      const auto& b = j.at("mapping");
      if (b.contains("variant")) c.mapping.variant = parse_feature_variant(b.at("variant").get<std::string>());
      get_if(b, "hidden_layers", c.mapping.hidden_layers);
      get_if(b, "hidden_width", c.mapping.hidden_width);
      get_if(b, "epochs", c.mapping.epochs);
      get_if(b, "learning_rate", c.mapping.learning_rate);
      get_if(b, "train_fraction", c.mapping_train_fraction);
    }
    if (j.contains("pde")) {
      const auto& b = j.at("pde");
      get_if(b, "closures", c.closures);
      get_if(b, "refine", c.pde_refine);
      get_if(b, "cfl", c.pde_cfl);
      get_if(b, "arz_gamma", c.arz_gamma);
    }
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("pipeline config: ") + e.what());
  }
  validate(c);
  c.canonical = canonical_config(c);
  return c;
}

namespace {

// Artifact names.
constexpr const char* kTrajectories = "trajectories.csv";
constexpr const char* kSchema = "schema.json";
constexpr const char* kKinematics = "kinematics.csv";
constexpr const char* kProfiles = "profiles.csv";
constexpr const char* kAttributes = "attributes.csv";
constexpr const char* kSegments = "segments.csv";
constexpr const char* kGrid = "grid.json";
constexpr const char* kCells = "cells.csv";
constexpr const char* kOmega = "omega.csv";
constexpr const char* kFdOmega = "fd_omega.json";
constexpr const char* kFdTwo = "fd_two.json";
constexpr const char* kFdOne = "fd_one.json";
constexpr const char* kFeatures = "features.csv";
constexpr const char* kMapping = "mapping.json";

std::vector<std::string> stage_inputs(const std::string& stage, const PipelineConfig& cfg) {
  if (stage == "simulate-micro" || stage == "ingest") return {};
  if (stage == "kinematics") return {kTrajectories, kSchema};
  if (stage == "calibrate-ovm" || stage == "attributes" || stage == "grid") return {kKinematics, kSchema};
  if (stage == "omega") {
    std::vector<std::string> in{kKinematics, kSchema, kGrid, kCells};
    if (cfg.omega_method == "abundant") {
      in.push_back(kProfiles);
      in.push_back(kAttributes);
    }
    return in;
  }
  if (stage == "train-fd") return {kGrid, kOmega};
  if (stage == "train-map") return {kKinematics, kSchema, kGrid, kOmega};
  if (stage == "simulate-pde") {
    std::vector<std::string> in{kSchema, kGrid, kCells, kOmega};
    const auto has = [&](const char* k) { return std::find(cfg.closures.begin(), cfg.closures.end(), k) != cfg.closures.end(); };
    if (has("GSOM")) in.push_back(kFdTwo);
    if (has("LWR")) in.push_back(kFdOne);
    return in;
  }
  throw Error(Errc::InvalidArgument, "unknown stage '" + stage + "'");
}

struct StageContext {
  const PipelineConfig& cfg;
  std::string stage;
  std::vector<ReportRow> rows;

  fs::path path(const std::string& name) const { return cfg.output_dir / name; }
  std::string read(const std::string& name) const { return read_text_file(path(name)); }
  void write(const std::string& name, const std::string& text) const { write_text_file(path(name), text); }
  void metric(const std::string& condition, const std::string& name, double v) {
    rows.push_back({"pipeline", condition.empty() ? stage : stage + "/" + condition, name, v});
  }
  std::uint64_t seed(const std::string& key) const { return substream_seed(cfg.seed, stage + "/" + key); }
};

void write_dataset(const StageContext& ctx, const Dataset& ds, const std::string& name) {
  CsvSchema schema;
  schema.dataset_id = ds.dataset_id.empty() ? "dataset" : ds.dataset_id;
  schema.topology = ds.topology;
  schema.road_length = ds.road_length;
  save_schema(schema, ctx.path(kSchema));
  write_trajectories(ds, ctx.path(name));
}

Dataset read_dataset(const StageContext& ctx, const std::string& name) {
  return ingest_trajectories(ctx.path(name), load_schema(ctx.path(kSchema)));
}

GridSpec read_grid(const StageContext& ctx) { return parse_grid_json(ctx.read(kGrid)); }

/// Nearest vehicle ahead at the follower's first sample (same lane when both carry one).
std::vector<std::optional<std::size_t>> open_road_leaders(const Dataset& ds) {
  const auto position_at = [](const VehicleTrajectory& v, double t) -> std::optional<double> {
    if (v.samples.empty() || t < v.start_time() || t > v.end_time()) return std::nullopt;
    const auto it = std::lower_bound(v.samples.begin(), v.samples.end(), t,
                                     [](const TrajectorySample& s, double tt) { return s.time < tt; });
    if (it == v.samples.begin()) return it->position;
    const auto& b = *it;
    const auto& a = *(it - 1);
    const double w = b.time > a.time ? (t - a.time) / (b.time - a.time) : 0.0;
    return a.position + w * (b.position - a.position);
  };
  std::vector<std::optional<std::size_t>> out(ds.trajectories.size());
  for (std::size_t f = 0; f < ds.trajectories.size(); ++f) {
    const auto& fv = ds.trajectories[f];
    if (fv.samples.empty()) continue;
    const double t = fv.start_time();
    const double x = fv.samples.front().position;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < ds.trajectories.size(); ++l) {
      if (l == f) continue;
      const auto& lv = ds.trajectories[l];
      if (!lv.samples.empty() && fv.samples.front().lane && lv.samples.front().lane &&
          *fv.samples.front().lane != *lv.samples.front().lane)
        continue;
      const auto xl = position_at(lv, t);
      if (xl && *xl > x && *xl - x < best) {
        best = *xl - x;
        out[f] = l;
      }
    }
  }
  return out;
}

void stage_simulate_micro(StageContext& ctx) {
  const auto scenario = load_ring_scenario(ctx.cfg.scenario_json);
  const auto ds = simulate_ring(scenario);
  write_dataset(ctx, ds, kTrajectories);
  ctx.metric("", "n_vehicles", static_cast<double>(ds.trajectories.size()));
  ctx.metric("", "duration", scenario.sim_duration);
}

void stage_ingest(StageContext& ctx) {
  if (!ctx.cfg.ingest_path) throw Error(Errc::InvalidArgument, "no ingest path configured");
  const CsvSchema schema = ctx.cfg.schema_path ? load_schema(*ctx.cfg.schema_path) : CsvSchema{};
  const auto ds = ingest_trajectories(*ctx.cfg.ingest_path, schema);
  write_dataset(ctx, ds, kTrajectories);
  ctx.metric("", "n_vehicles", static_cast<double>(ds.trajectories.size()));
}

void stage_kinematics(StageContext& ctx) {
  const auto ds = read_dataset(ctx, kTrajectories);
  const auto kin = derive_kinematics(ds, ctx.cfg.kinematics);
  write_dataset(ctx, kin, kKinematics);
  std::size_t reverse = 0;
  for (const auto& v : kin.trajectories) reverse += count_reverse_motion(v);
  ctx.metric("", "n_vehicles", static_cast<double>(kin.trajectories.size()));
  ctx.metric("", "reverse_motion_samples", static_cast<double>(reverse));
}

void stage_calibrate(StageContext& ctx) {
  const auto kin = read_dataset(ctx, kKinematics);
  std::vector<std::optional<std::size_t>> leaders(kin.trajectories.size());
  if (kin.topology == Topology::Ring) {
    const auto ring = infer_ring_leaders(kin);
    for (std::size_t k = 0; k < ring.size(); ++k) leaders[k] = ring[k];
  } else {
    leaders = open_road_leaders(kin);
  }
  const std::optional<double> ring_length = kin.topology == Topology::Ring ? kin.road_length : std::nullopt;
  ProfileMap profiles;
  std::vector<double> e_gap, e_speed;
  std::size_t skipped = 0;
  for (std::size_t k = 0; k < kin.trajectories.size(); ++k) {
    const auto& f = kin.trajectories[k];
    if (!leaders[k]) {
      ++skipped;
      continue;
    }
    CalibrationPair pair;
    try {
      pair = make_calibration_pair(f, kin.trajectories[*leaders[k]], ring_length);
    } catch (const Error&) {
      ++skipped;
      continue;
    }
    GaConfig ga = ctx.cfg.ga;
    ga.seed = ctx.seed(f.vehicle_id);
    const auto r = calibrate_ovm(pair, ga);
    DriverProfile p;
    p.vehicle_id = f.vehicle_id;
    p.class_label = f.class_label;
    p.ovm = r.params;
    p.ovm.length = f.length;
    p.length = f.length;
    profiles[p.vehicle_id] = p;
    e_gap.push_back(r.e_gap);
    e_speed.push_back(r.e_speed);
  }
  ctx.write(kProfiles, profiles_csv(profiles));
  ctx.metric("", "n_calibrated", static_cast<double>(profiles.size()));
  ctx.metric("", "n_skipped", static_cast<double>(skipped));
  if (!e_gap.empty()) {
    ctx.metric("", "mean_e_gap", stats::mean(e_gap));
    ctx.metric("", "mean_e_speed", stats::mean(e_speed));
    ctx.metric("", "max_e_gap", *std::max_element(e_gap.begin(), e_gap.end()));
    ctx.metric("", "max_e_speed", *std::max_element(e_speed.begin(), e_speed.end()));
  }
}

void stage_attributes(StageContext& ctx) {
  const auto kin = read_dataset(ctx, kKinematics);
  const auto rep = compute_attributes(kin, ctx.cfg.attributes);
  ctx.write(kAttributes, attributes_csv(rep));
  ctx.write(kSegments, segments_csv(rep));
  std::vector<double> ce, w;
  for (const auto& a : rep.attributes) {
    ce.push_back(a.constancy_error);
    w.push_back(a.omega.mean);
  }
  ctx.metric("", "n_drivers", static_cast<double>(rep.attributes.size()));
  ctx.metric("", "n_unavailable", static_cast<double>(rep.unavailable.size()));
  if (!ce.empty()) {
    ctx.metric("", "mean_ce", stats::mean(ce));
    ctx.metric("", "mean_omega_l", stats::mean(w));
  }
}

GridSpec configured_grid(const PipelineConfig& cfg, const Dataset& kin) {
  GridSpec g = default_grid(kin, cfg.dx, cfg.dt);
  if (cfg.t0) g.t0 = *cfg.t0;
  if (cfg.t1) g.t1 = *cfg.t1;
  validate(g);
  return g;
}

void stage_grid(StageContext& ctx) {
  const auto kin = read_dataset(ctx, kKinematics);
  const auto grid = configured_grid(ctx.cfg, kin);
  const auto stats = cell_vehicle_stats(kin, grid);
  const auto field = edie_macroscopic(stats, grid);
  ctx.write(kGrid, grid_json(grid));
  ctx.write(kCells, cells_csv(field));
  ctx.metric("", "nt", static_cast<double>(field.nt));
  ctx.metric("", "nx", static_cast<double>(field.nx));
  ctx.metric("", "occupied", static_cast<double>(field.occupied()));
  ctx.metric("", "outside_time", stats.outside_time);
  try {
    ctx.metric("", "fd_spread", fd_spread(field));
  } catch (const Error&) {
  }
}

/// id -> omega_l from attributes.csv.
std::map<std::string, double> read_omega_l(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  const auto header = csv::split_line(line);
  const auto col = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(Errc::MalformedRow, "attributes table lacks column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto ci = col("id"), cw = col("omega_l");
  std::map<std::string, double> out;
  while (std::getline(is, line)) {
    if (csv::trim(line).empty()) continue;
    const auto f = csv::split_line(line);
    double w = 0.0;
    if (f.size() <= std::max(ci, cw) || !csv::parse_double(f[cw], w))
      throw Error(Errc::MalformedRow, "bad attributes row '" + line + "'");
    out[f[ci]] = w;
  }
  return out;
}

OmegaProvenance configured_provenance(const PipelineConfig& cfg) {
  return cfg.omega_method == "abundant" ? OmegaProvenance::AbundantFormula : OmegaProvenance::FdQuotient;
}

void stage_omega(StageContext& ctx) {
  const auto kin = read_dataset(ctx, kKinematics);
  const auto grid = read_grid(ctx);
  const auto stats = cell_vehicle_stats(kin, grid);
  const auto field = edie_macroscopic(stats, grid);
  OmegaField om;
  if (ctx.cfg.omega_method == "abundant") {
    auto profiles = read_profiles_csv(ctx.read(kProfiles));
    for (const auto& [id, w] : read_omega_l(ctx.read(kAttributes))) {
      const auto it = profiles.find(id);
      if (it != profiles.end()) it->second.omega_l = w;
    }
    om = reconstruct_omega_abundant(stats, field, profiles);
  } else {
    const auto samples = fd_samples(field);
    FdTrainConfig fc = ctx.cfg.fd;
    fc.seed = ctx.seed("fd");
    const auto one = train_fd(samples, FdKind::OneVar, fc);
    ctx.write(kFdOmega, fd_to_json(one.model));
    ctx.metric("fd", "train_error", one.train_error);
    om = reconstruct_omega_scarce(field, fd_speed_function(one.model));
  }
  ctx.write(kOmega, omega_csv(field, om));
  std::vector<double> defined;
  for (std::size_t c = 0; c < om.omega.size(); ++c)
    if (om.mask[c]) defined.push_back(om.omega[c]);
  ctx.metric("", "defined_cells", static_cast<double>(defined.size()));
  ctx.metric("", "masked_cells", static_cast<double>(om.masked_cells));
  ctx.metric("", "clamped_cells", static_cast<double>(om.clamped_cells));
  if (!defined.empty()) {
    ctx.metric("", "mean_omega", stats::mean(defined));
    ctx.metric("", "min_omega", *std::min_element(defined.begin(), defined.end()));
    ctx.metric("", "max_omega", *std::max_element(defined.begin(), defined.end()));
  }
}

void stage_train_fd(StageContext& ctx) {
  const auto grid = read_grid(ctx);
  const auto field = read_cells_csv(ctx.read(kOmega), grid);
  const auto samples = fd_samples(field, omega_from_field(field, configured_provenance(ctx.cfg)));
  FdTrainConfig fc = ctx.cfg.fd;
  fc.seed = ctx.seed("split");  // both kinds share one split
  for (const auto kind : {FdKind::TwoVar, FdKind::OneVar}) {
    const auto r = train_fd(samples, kind, fc);
    ctx.write(kind == FdKind::TwoVar ? kFdTwo : kFdOne, fd_to_json(r.model));
    const std::string cond = to_string(kind);
    ctx.metric(cond, "n_samples", static_cast<double>(samples.size()));
    ctx.metric(cond, "train_error", r.train_error);
    ctx.metric(cond, "test_error", r.test_error);
    ctx.metric(cond, "violation_fraction", r.model.audit.violation_fraction);
  }
}

/// Random whole-cell split: the first round(fraction n) of a permutation train.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> random_split(std::size_t n, double fraction,
                                                                           std::uint64_t seed) {
  Rng rng = make_rng(seed, "split");
  const auto order = permutation(n, rng);
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, n)));
  std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, n)), order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

std::vector<MappingCell> pick(std::span<const MappingCell> cells, const std::vector<std::size_t>& idx) {
  std::vector<MappingCell> out;
  out.reserve(idx.size());
  for (auto k : idx) out.push_back(cells[k]);
  return out;
}

std::pair<FeatureSet, std::vector<MappingCell>> mapping_inputs(const StageContext& ctx) {
  const auto kin = read_dataset(ctx, kKinematics);
  const auto grid = read_grid(ctx);
  const auto stats = cell_vehicle_stats(kin, grid);
  const auto field = edie_macroscopic(stats, grid);
  auto set = extract_all_features(stats, field);
  const auto targets = omega_from_field(read_cells_csv(ctx.read(kOmega), grid), configured_provenance(ctx.cfg));
  auto cells = build_mapping_cells(set, targets);
  return {std::move(set), std::move(cells)};
}

void stage_train_map(StageContext& ctx) {
  const auto [set, cells] = mapping_inputs(ctx);
  ctx.write(kFeatures, features_csv(set));
  const auto [train_idx, test_idx] = random_split(cells.size(), ctx.cfg.mapping_train_fraction, ctx.seed("split"));
  if (train_idx.empty()) throw Error(Errc::EmptySplit, "mapping training split is empty");
  const auto train = pick(cells, train_idx);
  const auto test = pick(cells, test_idx);
  MappingConfig mc = ctx.cfg.mapping;
  mc.seed = ctx.seed("net");
  const auto r = train_mapping(train, mc);
  ctx.write(kMapping, mapping_to_json(r.model));
  ctx.metric("", "n_cells", static_cast<double>(cells.size()));
  ctx.metric("", "n_skipped_slices", static_cast<double>(set.skipped.size()));
  ctx.metric("", "train_error", r.train_error);
  if (!test.empty()) ctx.metric("", "test_error", mapping_error(r.model, test));
}

void stage_simulate_pde(StageContext& ctx) {
  const auto grid = read_grid(ctx);
  const auto observed = read_cells_csv(ctx.read(kCells), grid);
  const auto om = omega_from_field(read_cells_csv(ctx.read(kOmega), grid), configured_provenance(ctx.cfg));
  const auto schema = load_schema(ctx.path(kSchema));
  SimulationConfig sc;
  sc.refine = ctx.cfg.pde_refine;
  sc.cfl = ctx.cfg.pde_cfl;
  sc.bc.periodic = schema.topology == Topology::Ring;
  for (const auto& name : ctx.cfg.closures) {
    SimulationResult r;
    if (name == "GSOM") {
      r = simulate(observed, om, learned_closure(fd_from_json(ctx.read(kFdTwo))), sc);
    } else if (name == "LWR") {
      r = simulate(observed, om, learned_closure(fd_from_json(ctx.read(kFdOne))), sc);
    } else {
      const auto p = default_arz_params(observed, ctx.cfg.arz_gamma);
      r = simulate(observed, arz_omega_field(observed, p), arz_closure(p), sc);
    }
    std::string lower = name;
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    ctx.write("sim_" + lower + ".csv", simulation_csv(r));
    const auto e = model_error(r.field, observed);
    ctx.metric(name, "e_rho", e.e_rho);
    ctx.metric(name, "e_v", e.e_v);
    ctx.metric(name, "e_q", e.e_q);
    ctx.metric(name, "n_cells", static_cast<double>(e.n_cells));
    ctx.metric(name, "clamps", static_cast<double>(r.run.state.clamps));
    ctx.metric(name, "steps", static_cast<double>(r.run.steps));
  }
}

}  // namespace

std::vector<ReportRow> run_stage(const std::string& stage, const PipelineConfig& cfg) {
  check_stage_name(stage);
  const auto inputs = stage_inputs(stage, cfg);
  std::string upstream;
  std::vector<std::string> missing;
  for (const auto& name : inputs) {
    const fs::path p = cfg.output_dir / name;
    if (!fs::exists(p)) {
      missing.push_back(name);
      continue;
    }
    upstream += (upstream.empty() ? "" : " ") + name + "=" + hash_text(read_text_file(p));
  }
  const auto fail = [&](const std::string& why) {
    return Error(Errc::StageFailure,
                 "stage '" + stage + "': " + why + " [upstream: " + (upstream.empty() ? "none" : upstream) + "]");
  };
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw fail("missing upstream artifact(s) " + list);
  }
  StageContext ctx{cfg, stage, {}};
  try {
    fs::create_directories(cfg.output_dir);
    if (stage == "simulate-micro") stage_simulate_micro(ctx);
    else if (stage == "ingest") stage_ingest(ctx);
    else if (stage == "kinematics") stage_kinematics(ctx);
    else if (stage == "calibrate-ovm") stage_calibrate(ctx);
    else if (stage == "attributes") stage_attributes(ctx);
    else if (stage == "grid") stage_grid(ctx);
    else if (stage == "omega") stage_omega(ctx);
    else if (stage == "train-fd") stage_train_fd(ctx);
    else if (stage == "train-map") stage_train_map(ctx);
    else stage_simulate_pde(ctx);
  } catch (const std::exception& e) {
    throw fail(e.what());
  }
  return ctx.rows;
}

std::vector<MappingCell> pipeline_mapping_cells(const PipelineConfig& cfg) {
  for (const char* name : {kKinematics, kSchema, kGrid, kOmega})
    if (!fs::exists(cfg.output_dir / name))
      throw Error(Errc::IoFailure, "missing pipeline artifact " + (cfg.output_dir / name).string());
  const StageContext ctx{cfg, "train-map", {}};
  return mapping_inputs(ctx).second;
}

Report run_pipeline(const PipelineConfig& cfg_in) {
  PipelineConfig cfg = cfg_in;
  validate(cfg);
  if (cfg.canonical.empty()) cfg.canonical = canonical_config(cfg);
  std::vector<std::string> stages;
  if (cfg.stages.empty()) {
    for (const auto& s : pipeline_stages())
      if (s != (cfg.ingest_path ? "simulate-micro" : "ingest")) stages.push_back(s);
  } else {
    const std::set<std::string> wanted(cfg.stages.begin(), cfg.stages.end());
    for (const auto& s : pipeline_stages())
      if (wanted.count(s)) stages.push_back(s);
  }
  Report r;
  r.seed = cfg.seed;
  r.config_hash = hash_text(cfg.canonical);
  for (const auto& s : stages) {
    const auto t0 = std::chrono::steady_clock::now();
    auto rows = run_stage(s, cfg);
    r.timings[s] = seconds_since(t0);
    r.rows.insert(r.rows.end(), rows.begin(), rows.end());
  }
  emit_report(r, cfg.output_dir);
  return r;
}

// ------------------------------------------------------------ experiments

std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::TrainRatio: return "TRAIN_RATIO";
    case ExperimentKind::DensitySplit: return "DENSITY_SPLIT";
    case ExperimentKind::OmegaSplit: return "OMEGA_SPLIT";
    case ExperimentKind::FeatureAblation: return "FEATURE_ABLATION";
    case ExperimentKind::NnSize: return "NN_SIZE";
  }
  return "?";
}

ExperimentKind parse_experiment_kind(const std::string& s) {
  for (auto k : {ExperimentKind::TrainRatio, ExperimentKind::DensitySplit, ExperimentKind::OmegaSplit,
                 ExperimentKind::FeatureAblation, ExperimentKind::NnSize})
    if (to_string(k) == s) return k;
  throw Error(Errc::InvalidArgument, "unknown experiment kind '" + s + "'");
}

void validate(const ExperimentSpec& spec) {
  validate(spec.mapping);
  if (spec.repetitions < 1) throw Error(Errc::InvalidArgument, "repetitions must be at least 1");
  switch (spec.kind) {
    case ExperimentKind::TrainRatio:
      if (spec.ratios.empty()) throw Error(Errc::InvalidArgument, "ratio grid is empty");
      for (double r : spec.ratios)
        if (!(r > 0.0 && r < 1.0)) throw Error(Errc::InvalidArgument, "ratios must lie in (0, 1)");
      break;
    case ExperimentKind::DensitySplit:
      if (!(spec.density_lo < spec.density_hi)) throw Error(Errc::InvalidArgument, "density band is empty");
      break;
    case ExperimentKind::OmegaSplit:
      if (!std::isfinite(spec.omega_threshold)) throw Error(Errc::InvalidArgument, "omega threshold must be finite");
      break;
    case ExperimentKind::FeatureAblation:
      break;  // an empty list means every variant
    case ExperimentKind::NnSize:
      if (spec.layer_grid.empty() || spec.width_grid.empty())
        throw Error(Errc::InvalidArgument, "layer and width grids must be non-empty");
      for (int v : spec.layer_grid)
        if (v < 1) throw Error(Errc::InvalidArgument, "layer counts must be positive");
      for (int v : spec.width_grid)
        if (v < 1) throw Error(Errc::InvalidArgument, "widths must be positive");
      break;
  }
  if (spec.kind == ExperimentKind::FeatureAblation || spec.kind == ExperimentKind::NnSize)
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
      throw Error(Errc::InvalidArgument, "train fraction must lie in (0, 1)");
}

std::string canonical_experiment(const ExperimentSpec& s) {
  json variants = json::array();
  for (auto v : s.variants) variants.push_back(to_string(v));
  json j{{"kind", to_string(s.kind)},
         {"ratios", s.ratios},
         {"density_band", {s.density_lo, s.density_hi}},
         {"omega_threshold", s.omega_threshold},
         {"variants", variants},
         {"layer_grid", s.layer_grid},
         {"width_grid", s.width_grid},
         {"train_fraction", s.train_fraction},
         {"repetitions", s.repetitions},
         {"seed", s.seed},
         {"mapping",
          {{"variant", to_string(s.mapping.variant)},
           {"hidden_layers", s.mapping.hidden_layers},
           {"hidden_width", s.mapping.hidden_width},
           {"epochs", s.mapping.epochs},
           {"learning_rate", s.mapping.learning_rate}}}};
  return j.dump();
}

ExperimentSpec parse_experiment_spec(const std::string& json_text) {
  ExperimentSpec s;
  try {
    const json j = json::parse(json_text);
    if (j.contains("kind")) s.kind = parse_experiment_kind(j.at("kind").get<std::string>());
    get_if(j, "ratios", s.ratios);
    if (j.contains("density_band")) {
      const auto b = j.at("density_band").get<std::vector<double>>();
      if (b.size() != 2) throw Error(Errc::InvalidArgument, "density_band needs two values");
      s.density_lo = b[0];
      s.density_hi = b[1];
    }
    get_if(j, "omega_threshold", s.omega_threshold);
    if (j.contains("variants"))
      for (const auto& v : j.at("variants")) s.variants.push_back(parse_feature_variant(v.get<std::string>()));
    get_if(j, "layer_grid", s.layer_grid);
    get_if(j, "width_grid", s.width_grid);
    get_if(j, "train_fraction", s.train_fraction);
    get_if(j, "repetitions", s.repetitions);
    get_if(j, "seed", s.seed);
    if (j.contains("mapping")) {
      const auto& b = j.at("mapping");
      if (b.contains("variant")) s.mapping.variant = parse_feature_variant(b.at("variant").get<std::string>());
      get_if(b, "hidden_layers", s.mapping.hidden_layers);
      get_if(b, "hidden_width", s.mapping.hidden_width);
      get_if(b, "epochs", s.mapping.epochs);
      get_if(b, "learning_rate", s.mapping.learning_rate);
    }
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("experiment spec: ") + e.what());
  }
  validate(s);
  return s;
}

namespace {

std::string cells_digest(std::span<const MappingCell> cells) {
  std::string text;
  for (const auto& c : cells) {
    text += std::to_string(c.i) + ',' + std::to_string(c.j) + ',' + short_number(c.rho) + ',' + short_number(c.omega);
    for (const auto& f : c.members)
      for (double v : f) text += ',' + short_number(v);
    text += '\n';
  }
  return hash_text(text);
}

struct Condition {
  std::string label;
  std::vector<std::size_t> train, test;
  MappingConfig mapping;
};

}  // namespace

Report run_experiment(const ExperimentSpec& spec, std::span<const MappingCell> cells) {
  validate(spec);
  if (cells.empty()) throw Error(Errc::EmptyCells, "experiment needs at least one cell");
  const std::string kind = to_string(spec.kind);
  const std::size_t n = cells.size();

  std::vector<Condition> conds;
  for (int rep = 0; rep < spec.repetitions; ++rep) {
    const std::string suffix = spec.repetitions > 1 ? "/rep=" + std::to_string(rep) : "";
    const std::uint64_t rep_seed = substream_seed(spec.seed, kind + "/rep=" + std::to_string(rep));
    const auto fixed = random_split(n, spec.train_fraction, rep_seed);
    switch (spec.kind) {
      case ExperimentKind::TrainRatio:
        for (double r : spec.ratios) {
          auto [tr, te] = random_split(n, r, substream_seed(rep_seed, "ratio=" + short_number(r)));
          conds.push_back({"ratio=" + short_number(r) + suffix, std::move(tr), std::move(te), spec.mapping});
        }
        break;
      case ExperimentKind::DensitySplit:
      case ExperimentKind::OmegaSplit: {
        Condition c;
        if (spec.kind == ExperimentKind::DensitySplit)
          c.label = "band=" + short_number(spec.density_lo) + ".." + short_number(spec.density_hi) + suffix;
        else
          c.label = "omega<" + short_number(spec.omega_threshold) + suffix;
        for (std::size_t k = 0; k < n; ++k) {
          const bool in_train = spec.kind == ExperimentKind::DensitySplit
                                    ? cells[k].rho >= spec.density_lo && cells[k].rho <= spec.density_hi
                                    : cells[k].omega < spec.omega_threshold;
          (in_train ? c.train : c.test).push_back(k);
        }
        c.mapping = spec.mapping;
        conds.push_back(std::move(c));
        break;
      }
      case ExperimentKind::FeatureAblation: {
        const auto variants = spec.variants.empty() ? all_feature_variants() : spec.variants;
        for (auto v : variants) {
          Condition c{to_string(v) + suffix, fixed.first, fixed.second, spec.mapping};
          c.mapping.variant = v;
          conds.push_back(std::move(c));
        }
        break;
      }
      case ExperimentKind::NnSize:
        for (int layers : spec.layer_grid)
          for (int width : spec.width_grid) {
            Condition c{std::to_string(layers) + "x" + std::to_string(width) + suffix, fixed.first, fixed.second,
                        spec.mapping};
            c.mapping.hidden_layers = layers;
            c.mapping.hidden_width = width;
            conds.push_back(std::move(c));
          }
        break;
    }
  }

  Report report;
  report.seed = spec.seed;
  report.config_hash = hash_text(canonical_experiment(spec) + "|" + cells_digest(cells));
  for (auto& c : conds) {
    if (c.train.empty() || c.test.empty())
      throw Error(Errc::EmptySplit, kind + " condition " + c.label + " has an empty " +
                                        (c.train.empty() ? "training" : "test") + " split");
    const auto t0 = std::chrono::steady_clock::now();
    const auto train = pick(cells, c.train);
    const auto test = pick(cells, c.test);
    c.mapping.seed = substream_seed(spec.seed, kind + "/" + c.label);
    const auto r = train_mapping(train, c.mapping);
    const double test_error = mapping_error(r.model, test);
    report.rows.push_back({kind, c.label, "test_error", test_error});
    report.rows.push_back({kind, c.label, "train_error", r.train_error});
    report.rows.push_back({kind, c.label, "n_train", static_cast<double>(train.size())});
    report.rows.push_back({kind, c.label, "n_test", static_cast<double>(test.size())});
    report.timings[kind + "/" + c.label] = seconds_since(t0);
  }
  return report;
}

// -------------------------------------------------------- synthetic cells

namespace {

constexpr double kSynthFreeSpeed = 30.0;
constexpr double kSynthJamDensity = 0.2;

double synth_speed(double rho) { return kSynthFreeSpeed * (1.0 - rho / kSynthJamDensity); }

}  // namespace

double synthetic_member_attribute(const FeatureVector& f) { return f[1] / synth_speed(f[0]); }

std::vector<MappingCell> synthetic_mapping_cells(std::size_t n_cells, std::uint64_t seed, int max_members) {
  if (n_cells == 0 || max_members < 1) throw Error(Errc::InvalidArgument, "need cells and at least one member");
  Rng rng = make_rng(seed, "synthetic_cells");
  std::vector<MappingCell> cells(n_cells);
  for (std::size_t k = 0; k < n_cells; ++k) {
    auto& c = cells[k];
    c.i = k;
    c.j = 0;
    c.rho = uniform(rng, 0.02, 0.16);
    const std::size_t m = 1 + uniform_index(rng, static_cast<std::size_t>(max_members));
    for (std::size_t q = 0; q < m; ++q) {
      FeatureVector f;
      f[0] = c.rho;
      f[1] = uniform(rng, 0.6, 1.4) * synth_speed(c.rho);
      f[2] = uniform(rng, 0.0, 2.0);
      f[3] = uniform(rng, -0.5, 0.5);
      f[4] = uniform(rng, 0.0, 1.0);
      f[5] = uniform(rng, -0.1, 0.1);
      f[6] = uniform(rng, 0.1, 1.0);
      f[7] = f[6] * uniform(rng, 1.0, 1.5);
      c.members.push_back(f);
      c.omega += synthetic_member_attribute(f);
    }
  }
  return cells;
}

}  // namespace hetflow

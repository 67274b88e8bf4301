#include "hetflow/edie_grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <tuple>

#include "hetflow/csv.hpp"
#include "hetflow/error.hpp"

namespace hetflow {

namespace {

std::size_t cell_count(double span, double step) {
  return static_cast<std::size_t>(std::ceil(span / step - 1e-9));
}

}  // namespace

std::size_t GridSpec::nx() const { return cell_count(x1 - x0, dx); }
std::size_t GridSpec::nt() const { return cell_count(t1 - t0, dt); }

void validate(const GridSpec& g) {
  if (!(g.x1 > g.x0) || !(g.t1 > g.t0) || !(g.dx > 0.0) || !(g.dt > 0.0))
    throw Error(Errc::InvalidArgument, "grid requires x1 > x0, t1 > t0, dx > 0, dt > 0");
}

GridSpec default_grid(const Dataset& ds, double dx, double dt) {
  if (ds.trajectories.empty()) throw Error(Errc::EmptyDataset, "cannot grid an empty dataset");
  GridSpec g;
  g.dx = dx;
  g.dt = dt;
  double t_lo = std::numeric_limits<double>::infinity(), t_hi = -t_lo;
  double x_lo = t_lo, x_hi = -t_lo;
  for (const auto& t : ds.trajectories) {
    t_lo = std::min(t_lo, t.start_time());
    t_hi = std::max(t_hi, t.end_time());
    for (const auto& s : t.samples) {
      x_lo = std::min(x_lo, s.position);
      x_hi = std::max(x_hi, s.position);
    }
  }
  g.t0 = t_lo;
  const double whole = std::floor((t_hi - t_lo) / dt + 1e-9);
  g.t1 = t_lo + std::max(1.0, whole) * dt;
  if (ds.topology == Topology::Ring && ds.road_length) {
    g.x0 = 0.0;
    g.x1 = *ds.road_length;
  } else {
    g.x0 = x_lo;
    g.x1 = x_lo + std::max(1.0, std::ceil((x_hi - x_lo) / dx - 1e-9)) * dx;
  }
  validate(g);
  return g;
}

CellStatsResult cell_vehicle_stats(const Dataset& ds, const GridSpec& grid) {
  validate(grid);
  const std::size_t nt = grid.nt(), nx = grid.nx();
  const std::optional<double> ring = ds.topology == Topology::Ring ? ds.road_length : std::nullopt;
  const double span_x = ring ? *ring : grid.x1 - grid.x0;

  // Cell of a point, or nullopt outside the lattice.
  auto locate = [&](double t, double x) -> std::optional<std::pair<std::size_t, std::size_t>> {
    const double ti = std::floor((t - grid.t0) / grid.dt);
    double xl = x - grid.x0;
    if (ring) {
      xl = std::fmod(xl, *ring);
      if (xl < 0.0) xl += *ring;
    }
    const double xj = std::floor(xl / grid.dx);
    if (ti < 0.0 || xj < 0.0 || ti >= static_cast<double>(nt) || xj >= static_cast<double>(nx)) return std::nullopt;
    if (xl > grid.x1 - grid.x0) return std::nullopt;
    return std::make_pair(static_cast<std::size_t>(ti), static_cast<std::size_t>(xj));
  };

  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, CellVehicleStats> acc;
  CellStatsResult out;
  std::vector<double> cuts;
  for (std::size_t v = 0; v < ds.trajectories.size(); ++v) {
    const auto& traj = ds.trajectories[v];
    const auto x = unwrap_positions(traj.samples, ring);
    bool clipped = false;
    auto entry = [&](std::size_t i, std::size_t j) -> CellVehicleStats& {
      auto [it, inserted] = acc.try_emplace({i, j, v});
      if (inserted) {
        it->second.i = i;
        it->second.j = j;
        it->second.vehicle = v;
        it->second.vehicle_id = traj.vehicle_id;
      }
      return it->second;
    };

    for (std::size_t k = 0; k + 1 < traj.samples.size(); ++k) {
      const double ta = traj.samples[k].time, tb = traj.samples[k + 1].time;
      const double xa = x[k], xb = x[k + 1];
      const double ht = tb - ta, hx = xb - xa;
      cuts.assign({0.0, 1.0});
      for (double m = std::ceil((ta - grid.t0) / grid.dt); grid.t0 + m * grid.dt < tb; m += 1.0) {
        const double u = (grid.t0 + m * grid.dt - ta) / ht;
        if (u > 0.0 && u < 1.0) cuts.push_back(u);
      }
      if (hx != 0.0) {
        const double lo = std::min(xa, xb), hi = std::max(xa, xb);
        auto add_line = [&](double line) {
          const double u = (line - xa) / hx;
          if (u > 0.0 && u < 1.0) cuts.push_back(u);
        };
        const double lap_lo = std::floor((lo - grid.x0) / span_x), lap_hi = std::floor((hi - grid.x0) / span_x);
        for (double lap = lap_lo; lap <= lap_hi; lap += 1.0) {
          const double base = grid.x0 + lap * span_x;
          const double k0 = std::max(0.0, std::ceil((lo - base) / grid.dx));
          for (double m = k0; m <= static_cast<double>(nx) && base + m * grid.dx < hi; m += 1.0)
            add_line(base + m * grid.dx);
          if (ring) add_line(base + span_x);
        }
      }
      std::sort(cuts.begin(), cuts.end());
      for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
        const double du = cuts[c + 1] - cuts[c];
        if (du <= 0.0) continue;
        const double um = 0.5 * (cuts[c] + cuts[c + 1]);
        const auto cell = locate(ta + um * ht, xa + um * hx);
        if (!cell) {
          out.outside_time += du * ht;
          clipped = true;
          continue;
        }
        auto& e = entry(cell->first, cell->second);
        e.distance += du * hx;
        e.time += du * ht;
      }
    }

    for (std::size_t k = 0; k < traj.samples.size(); ++k) {
      const auto& s = traj.samples[k];
      const auto cell = locate(s.time, x[k]);
      if (!cell) continue;
      auto it = acc.find({cell->first, cell->second, v});
      if (it == acc.end()) continue;
      if (s.speed) it->second.speed_series.push_back(*s.speed);
      if (s.acceleration) it->second.accel_series.push_back(*s.acceleration);
      if (s.jerk) it->second.jerk_series.push_back(*s.jerk);
    }
    if (clipped) ++out.mismatch_warnings;
  }

  out.stats.reserve(acc.size());
  for (auto& [key, s] : acc)
    if (s.time > 0.0) out.stats.push_back(std::move(s));
  return out;
}

std::size_t CellField::occupied() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

namespace {

CellField empty_field(const GridSpec& grid) {
  CellField f;
  f.grid = grid;
  f.nt = grid.nt();
  f.nx = grid.nx();
  const std::size_t n = f.nt * f.nx;
  f.rho.assign(n, 0.0);
  f.speed.assign(n, 0.0);
  f.flow.assign(n, 0.0);
  f.sum_distance.assign(n, 0.0);
  f.sum_time.assign(n, 0.0);
  f.mask.assign(n, 0);
  f.n_vehicles.assign(n, 0);
  return f;
}

}  // namespace

CellField edie_macroscopic(const CellStatsResult& stats, const GridSpec& grid) {
  validate(grid);
  CellField f = empty_field(grid);
  for (const auto& s : stats.stats) {
    if (s.i >= f.nt || s.j >= f.nx) throw Error(Errc::DimensionMismatch, "cell statistics do not match the grid");
    const std::size_t c = f.index(s.i, s.j);
    f.sum_distance[c] += s.distance;
    f.sum_time[c] += s.time;
    ++f.n_vehicles[c];
  }
  const double area = grid.dx * grid.dt;
  for (std::size_t c = 0; c < f.rho.size(); ++c) {
    if (!(f.sum_time[c] > 0.0)) continue;
    f.mask[c] = 1;
    f.rho[c] = f.sum_time[c] / area;
    f.flow[c] = f.sum_distance[c] / area;
    f.speed[c] = f.sum_distance[c] / f.sum_time[c];
  }
  return f;
}

std::string cells_csv(const CellField& field) {
  using csv::format_double;
  std::ostringstream os;
  os << "i,j,t_center,x_center,rho,v,q,n_vehicles";
  if (field.omega) os << ",omega";
  os << '\n';
  for (std::size_t i = 0; i < field.nt; ++i)
    for (std::size_t j = 0; j < field.nx; ++j) {
      const std::size_t c = field.index(i, j);
      if (!field.mask[c]) continue;
      os << i << ',' << j << ',' << format_double(field.t_center(i)) << ',' << format_double(field.x_center(j)) << ','
         << format_double(field.rho[c]) << ',' << format_double(field.speed[c]) << ','
         << format_double(field.flow[c]) << ',' << field.n_vehicles[c];
      if (field.omega) os << ',' << format_double((*field.omega)[c]);
      os << '\n';
    }
  return os.str();
}

CellField read_cells_csv(const std::string& text, const GridSpec& grid) {
  validate(grid);
  CellField f = empty_field(grid);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::EmptyDataset, "cell file is empty");
  const auto header = csv::split_line(line);
  auto col = [&](const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto ci = col("i"), cj = col("j"), crho = col("rho"), cv = col("v"), cq = col("q");
  if (!ci || !cj || !crho || !cv || !cq)
    throw Error(Errc::MalformedRow, "cell file needs columns i, j, rho, v, q");
  const auto cn = col("n_vehicles"), co = col("omega");
  if (co) f.omega = std::vector<double>(f.rho.size(), 0.0);
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (csv::trim(line).empty()) continue;
    const auto fields = csv::split_line(line);
    if (fields.size() != header.size()) throw Error(Errc::MalformedRow, "cell row " + std::to_string(row));
    int i = 0, j = 0, n = 0;
    double rho = 0.0, v = 0.0, q = 0.0;
    if (!csv::parse_int(fields[*ci], i) || !csv::parse_int(fields[*cj], j) || !csv::parse_double(fields[*crho], rho) ||
        !csv::parse_double(fields[*cv], v) || !csv::parse_double(fields[*cq], q))
      throw Error(Errc::MalformedRow, "cell row " + std::to_string(row));
    if (i < 0 || j < 0 || static_cast<std::size_t>(i) >= f.nt || static_cast<std::size_t>(j) >= f.nx)
      throw Error(Errc::DimensionMismatch, "cell row " + std::to_string(row) + " lies outside the grid");
    const std::size_t c = f.index(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    f.mask[c] = 1;
    f.rho[c] = rho;
    f.speed[c] = v;
    f.flow[c] = q;
    f.sum_time[c] = rho * grid.dx * grid.dt;
    f.sum_distance[c] = q * grid.dx * grid.dt;
    if (cn && csv::parse_int(fields[*cn], n)) f.n_vehicles[c] = static_cast<std::size_t>(std::max(0, n));
    if (co) {
      double w = 0.0;
      (*f.omega)[c] = csv::parse_double(fields[*co], w) ? w : std::numeric_limits<double>::quiet_NaN();
    }
  }
  return f;
}

std::string grid_json(const GridSpec& g) {
  nlohmann::json j = {{"x0", g.x0}, {"x1", g.x1}, {"t0", g.t0}, {"t1", g.t1}, {"dx", g.dx}, {"dt", g.dt}};
  return j.dump(2);
}

GridSpec parse_grid_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    GridSpec g;
    g.x0 = j.at("x0").get<double>();
    g.x1 = j.at("x1").get<double>();
    g.t0 = j.at("t0").get<double>();
    g.t1 = j.at("t1").get<double>();
    g.dx = j.value("dx", 30.0);
    g.dt = j.value("dt", 30.0);
    validate(g);
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("grid config: ") + e.what());
  }
}

}  // namespace hetflow

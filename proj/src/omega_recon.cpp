#include "hetflow/omega_recon.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <sstream>

#include "hetflow/csv.hpp"
#include "hetflow/error.hpp"

namespace hetflow {

using csv::format_double;

std::string profiles_csv(const ProfileMap& profiles) {
  std::ostringstream os;
  os << "id,class,tau,beta,v_free,time_gap,min_gap,length,omega_l\n";
  for (const auto& [id, p] : profiles)
    os << id << ',' << to_string(p.class_label) << ',' << format_double(p.ovm.tau) << ','
       << format_double(p.ovm.beta) << ',' << format_double(p.ovm.v_free) << ',' << format_double(p.ovm.time_gap)
       << ',' << format_double(p.ovm.min_gap) << ',' << format_double(p.length) << ',' << format_double(p.omega_l)
       << '\n';
  return os.str();
}

ProfileMap read_profiles_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::EmptyDataset, "profile file is empty");
  const auto header = csv::split_line(line);
  const std::vector<std::string> expected{"id", "class", "tau", "beta", "v_free", "time_gap", "min_gap", "length",
                                          "omega_l"};
  if (header != expected) throw Error(Errc::MalformedRow, "unexpected profile header: " + line);
  ProfileMap out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (csv::trim(line).empty()) continue;
    const auto f = csv::split_line(line);
    DriverProfile p;
    double* targets[] = {&p.ovm.tau, &p.ovm.beta, &p.ovm.v_free, &p.ovm.time_gap, &p.ovm.min_gap, &p.length,
                         &p.omega_l};
    bool ok = f.size() == expected.size();
    for (std::size_t k = 0; ok && k < 7; ++k) ok = csv::parse_double(f[k + 2], *targets[k]);
    if (!ok) throw Error(Errc::MalformedRow, "profile row " + std::to_string(row));
    p.vehicle_id = f[0];
    p.class_label = parse_vehicle_class(f[1]);
    p.ovm.length = p.length;
    out[p.vehicle_id] = p;
  }
  return out;
}

std::string to_string(OmegaProvenance p) {
  switch (p) {
    case OmegaProvenance::AbundantFormula: return "ABUNDANT_FORMULA";
    case OmegaProvenance::FdQuotient: return "FD_QUOTIENT";
    case OmegaProvenance::NnMapping: return "NN_MAPPING";
  }
  return "UNKNOWN";
}

namespace {

OmegaField blank(const CellField& field, OmegaProvenance prov) {
  OmegaField w;
  w.grid = field.grid;
  w.nt = field.nt;
  w.nx = field.nx;
  w.omega.assign(field.rho.size(), std::numeric_limits<double>::quiet_NaN());
  w.mask.assign(field.rho.size(), 0);
  w.flags.assign(field.rho.size(), 0);
  w.provenance = prov;
  return w;
}

std::map<VehicleClass, DriverProfile> class_averages(const ProfileMap& profiles) {
  constexpr std::size_t kFields = 7;
  std::map<VehicleClass, std::pair<std::array<double, kFields>, int>> acc;
  for (const auto& [id, p] : profiles) {
    auto& [sum, n] = acc[p.class_label];
    const std::array<double, kFields> v{p.ovm.tau,     p.ovm.beta, p.ovm.v_free, p.ovm.time_gap,
                                        p.ovm.min_gap, p.length,   p.omega_l};
    for (std::size_t k = 0; k < kFields; ++k) sum[k] += v[k];
    ++n;
  }
  std::map<VehicleClass, DriverProfile> out;
  for (const auto& [cls, entry] : acc) {
    const auto& [sum, n] = entry;
    const double k = static_cast<double>(n);
    DriverProfile p;
    p.class_label = cls;
    p.ovm = {sum[0] / k, sum[1] / k, sum[2] / k, sum[3] / k, sum[4] / k, sum[5] / k};
    p.length = sum[5] / k;
    p.omega_l = sum[6] / k;
    out[cls] = p;
  }
  return out;
}

}  // namespace

OmegaField reconstruct_omega_abundant(const CellStatsResult& stats, const CellField& field,
                                      const ProfileMap& profiles, const AbundantOptions& opts) {
  OmegaField w = blank(field, OmegaProvenance::AbundantFormula);
  const auto averages = opts.policy == MissingProfilePolicy::ClassAverage ? class_averages(profiles)
                                                                          : std::map<VehicleClass, DriverProfile>{};
  const std::size_t n = field.rho.size();
  std::vector<double> vf_sum(n, 0.0), weight_sum(n, 0.0), resid_sum(n, 0.0);
  std::vector<std::size_t> members(n, 0);

  for (const auto& s : stats.stats) {
    const std::size_t c = field.index(s.i, s.j);
    if (c >= n) throw Error(Errc::DimensionMismatch, "cell statistics do not match the field");
    if (!field.mask[c] || (w.flags[c] & kFlagMissingProfile)) continue;
    const DriverProfile* p = nullptr;
    if (auto it = profiles.find(s.vehicle_id); it != profiles.end()) {
      p = &it->second;
    } else if (opts.policy == MissingProfilePolicy::Throw) {
      throw Error(Errc::MissingProfile, "no driver profile for vehicle " + s.vehicle_id);
    } else if (opts.policy == MissingProfilePolicy::ClassAverage) {
      const auto cls = opts.vehicle_classes.find(s.vehicle_id);
      if (cls != opts.vehicle_classes.end())
        if (auto a = averages.find(cls->second); a != averages.end()) p = &a->second;
    }
    if (!p) {
      w.flags[c] |= kFlagMissingProfile;
      continue;
    }
    if (!(field.rho[c] > 0.0)) throw Error(Errc::ZeroDensity, "occupied cell with zero density");
    const double v_cell = s.distance / s.time;
    const double v_desired = ovm_desired_speed(p->ovm, 1.0 / field.rho[c] - p->length);
    const double weight = std::exp(-p->omega_l);
    vf_sum[c] += p->ovm.v_free;
    weight_sum[c] += weight;
    resid_sum[c] += weight * (v_cell - v_desired);
    ++members[c];
  }

  for (std::size_t c = 0; c < n; ++c) {
    if (!field.mask[c]) continue;
    if ((w.flags[c] & kFlagMissingProfile) || members[c] == 0) {
      ++w.masked_cells;
      continue;
    }
    w.omega[c] = vf_sum[c] / static_cast<double>(members[c]) + resid_sum[c] / weight_sum[c];
    w.mask[c] = 1;
  }
  return w;
}

OmegaField reconstruct_omega_scarce(const CellField& field, const std::function<double(double)>& v_of_rho,
                                    double eps_v) {
  if (!(eps_v > 0.0)) throw Error(Errc::InvalidArgument, "speed clamp must be positive");
  OmegaField w = blank(field, OmegaProvenance::FdQuotient);
  for (std::size_t c = 0; c < field.rho.size(); ++c) {
    if (!field.mask[c]) continue;
    double v_eq = v_of_rho(field.rho[c]);
    if (!(v_eq >= eps_v)) {
      v_eq = eps_v;
      w.flags[c] |= kFlagClamped;
      ++w.clamped_cells;
    }
    w.omega[c] = field.speed[c] / v_eq;
    w.mask[c] = 1;
  }
  return w;
}

CellField attach_omega(const CellField& field, const OmegaField& omega) {
  if (omega.omega.size() != field.rho.size())
    throw Error(Errc::DimensionMismatch, "omega field does not match the cell field");
  CellField out = field;
  out.omega = omega.omega;
  for (std::size_t c = 0; c < omega.mask.size(); ++c)
    if (!omega.mask[c]) (*out.omega)[c] = std::numeric_limits<double>::quiet_NaN();
  return out;
}

std::string omega_csv(const CellField& field, const OmegaField& omega) {
  if (omega.omega.size() != field.rho.size())
    throw Error(Errc::DimensionMismatch, "omega field does not match the cell field");
  std::ostringstream os;
  os << "i,j,t_center,x_center,rho,v,q,n_vehicles,omega,omega_provenance,flags\n";
  const std::string prov = to_string(omega.provenance);
  for (std::size_t i = 0; i < field.nt; ++i)
    for (std::size_t j = 0; j < field.nx; ++j) {
      const std::size_t c = field.index(i, j);
      if (!field.mask[c]) continue;
      os << i << ',' << j << ',' << format_double(field.t_center(i)) << ',' << format_double(field.x_center(j)) << ','
         << format_double(field.rho[c]) << ',' << format_double(field.speed[c]) << ','
         << format_double(field.flow[c]) << ',' << field.n_vehicles[c] << ',';
      if (omega.mask[c]) os << format_double(omega.omega[c]);
      os << ',' << prov << ',';
      if (omega.flags[c] & kFlagClamped) os << "CLAMPED";
      if ((omega.flags[c] & kFlagClamped) && (omega.flags[c] & kFlagMissingProfile)) os << '|';
      if (omega.flags[c] & kFlagMissingProfile) os << "MISSING_PROFILE";
      os << '\n';
    }
  return os.str();
}

}  // namespace hetflow

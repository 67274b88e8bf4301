#include "hetflow/gsom_pde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "hetflow/csv.hpp"
#include "hetflow/error.hpp"

namespace hetflow {

std::string to_string(ClosureKind k) {
  switch (k) {
    case ClosureKind::Learned: return "LEARNED";
    case ClosureKind::Arz: return "ARZ";
    case ClosureKind::Lwr: return "LWR";
  }
  return "?";
}

void validate(const ArzParams& p) {
  if (!(p.v_ref > 0.0) || !(p.rho_max > 0.0) || !(p.gamma > 0.0))
    throw Error(Errc::InvalidArgument, "ARZ pressure needs v_ref > 0, rho_max > 0, gamma > 0");
}

double arz_pressure(const ArzParams& p, double rho) { return p.v_ref * std::pow(std::max(rho, 0.0) / p.rho_max, p.gamma); }

ArzParams default_arz_params(const CellField& observed, double gamma) {
  ArzParams p;
  p.gamma = gamma;
  p.rho_max = 0.0;
  p.v_ref = 0.0;
  for (std::size_t k = 0; k < observed.mask.size(); ++k) {
    if (!observed.mask[k]) continue;
    p.rho_max = std::max(p.rho_max, observed.rho[k]);
    p.v_ref = std::max(p.v_ref, observed.speed[k]);
  }
  if (!(p.rho_max > 0.0) || !(p.v_ref > 0.0)) throw Error(Errc::EmptyCells, "no occupied cell with positive rho and v");
  return p;
}

Closure learned_closure(const FdModel& m) {
  Closure c;
  c.kind = m.kind == FdKind::TwoVar ? ClosureKind::Learned : ClosureKind::Lwr;
  c.eval = [m](const Eigen::ArrayXd& rho, const Eigen::ArrayXd& omega, Eigen::ArrayXd& v, Eigen::ArrayXd& dv) {
    const auto jets = fd_eval_jets_batch(m, rho.matrix(), omega.matrix());
    v = jets[0].array().max(0.0);
    dv = (jets[0].array() > 0.0).select(jets[1].array(), 0.0);
  };
  return c;
}

Closure arz_closure(const ArzParams& p) {
  validate(p);
  Closure c;
  c.kind = ClosureKind::Arz;
  c.eval = [p](const Eigen::ArrayXd& rho, const Eigen::ArrayXd& omega, Eigen::ArrayXd& v, Eigen::ArrayXd& dv) {
    const Eigen::ArrayXd r = rho.max(0.0) / p.rho_max;
    const Eigen::ArrayXd pr = p.v_ref * r.pow(p.gamma);
    const Eigen::ArrayXd dp = p.v_ref * p.gamma / p.rho_max * r.pow(p.gamma - 1.0);
    const Eigen::ArrayXd raw = omega - pr;
    v = raw.max(0.0);
    dv = (raw > 0.0).select(-dp, 0.0);
  };
  return c;
}

Closure greenshields_closure(double v_free, double rho_max) {
  if (!(v_free > 0.0) || !(rho_max > 0.0)) throw Error(Errc::InvalidArgument, "Greenshields needs v_free, rho_max > 0");
  Closure c;
  c.kind = ClosureKind::Lwr;
  c.eval = [v_free, rho_max](const Eigen::ArrayXd& rho, const Eigen::ArrayXd&, Eigen::ArrayXd& v, Eigen::ArrayXd& dv) {
    const Eigen::ArrayXd raw = v_free * (1.0 - rho / rho_max);
    v = raw.max(0.0);
    dv = (raw > 0.0).select(Eigen::ArrayXd::Constant(rho.size(), -v_free / rho_max), 0.0);
  };
  return c;
}

std::array<double, 2> wavespeeds(const Closure& c, double rho, double omega) {
  Eigen::ArrayXd v, dv;
  c.eval(Eigen::ArrayXd::Constant(1, rho), Eigen::ArrayXd::Constant(1, omega), v, dv);
  return {v[0] + rho * dv[0], v[0]};
}

double PdeState::omega(std::size_t k) const {
  const double w = rho[k] > kEpsRho ? y[k] / rho[k] : y[k] / kEpsRho;
  return std::clamp(w, omega_lo, omega_hi);
}

double PdeState::mass() const {
  double s = 0.0;
  for (double r : rho) s += r;
  return s * dx();
}

double PdeState::attribute() const {
  double s = 0.0;
  for (double v : y) s += v;
  return s * dx();
}

PdeState make_pde_state(double x0, double length, const std::vector<double>& rho, const std::vector<double>& omega,
                        const BoundaryConditions& bc, double margin) {
  if (rho.empty() || rho.size() != omega.size()) throw Error(Errc::DimensionMismatch, "rho and omega must be non-empty and equal length");
  if (!(length > 0.0)) throw Error(Errc::InvalidArgument, "domain length must be positive");
  PdeState s;
  s.x0 = x0;
  s.length = length;
  s.bc = bc;
  s.rho.resize(rho.size());
  s.y.resize(rho.size());
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t k = 0; k < rho.size(); ++k) {
    if (!std::isfinite(rho[k]) || !std::isfinite(omega[k]) || rho[k] < 0.0)
      throw Error(Errc::InvalidArgument, "initial state must be finite with rho >= 0");
    s.rho[k] = rho[k];
    s.y[k] = rho[k] * omega[k];
    lo = std::min(lo, omega[k]);
    hi = std::max(hi, omega[k]);
  }
  const double span = hi > lo ? hi - lo : std::max(std::abs(hi), 1.0);
  s.omega_lo = lo - margin * span;
  s.omega_hi = hi + margin * span;
  return s;
}

namespace {

// Cell states with one ghost cell on each side, evaluated by the closure.
struct Extended {
  Eigen::ArrayXd rho, y, omega, v, dv;
};

Extended extend(const PdeState& s, const Closure& c) {
  const auto n = static_cast<Eigen::Index>(s.nx());
  Extended e;
  e.rho.resize(n + 2);
  e.y.resize(n + 2);
  e.omega.resize(n + 2);
  for (Eigen::Index k = 0; k < n; ++k) {
    e.rho[k + 1] = s.rho[static_cast<std::size_t>(k)];
    e.y[k + 1] = s.y[static_cast<std::size_t>(k)];
    e.omega[k + 1] = s.omega(static_cast<std::size_t>(k));
  }
  auto ghost = [&](Eigen::Index g, Eigen::Index inner, Eigen::Index wrap, const BoundaryTrace& tr) {
    if (s.bc.periodic) {
      e.rho[g] = e.rho[wrap];
      e.y[g] = e.y[wrap];
      e.omega[g] = e.omega[wrap];
    } else if (tr.kind == TraceKind::Prescribed) {
      if (!tr.state) throw Error(Errc::InvalidArgument, "prescribed boundary without a state function");
      const auto [r, w] = tr.state(s.time);
      e.rho[g] = r;
      e.y[g] = r * w;
      e.omega[g] = w;
    } else {
      e.rho[g] = e.rho[inner];
      e.y[g] = e.y[inner];
      e.omega[g] = e.omega[inner];
    }
  };
  ghost(0, 1, n, s.bc.left);
  ghost(n + 1, n, 1, s.bc.right);
  c.eval(e.rho, e.omega, e.v, e.dv);
  return e;
}

double max_speed(const Extended& e) {
  double m = 0.0;
  for (Eigen::Index k = 0; k < e.rho.size(); ++k) {
    m = std::max(m, std::abs(e.v[k]));
    m = std::max(m, std::abs(e.v[k] + e.rho[k] * e.dv[k]));
  }
  return m;
}

}  // namespace

double max_wavespeed(const PdeState& s, const Closure& c) { return max_speed(extend(s, c)); }

double stable_dt(const PdeState& s, const Closure& c, double cfl) {
  const double m = max_wavespeed(s, c);
  return m > 0.0 ? cfl * s.dx() / m : std::numeric_limits<double>::infinity();
}

PdeState gsom_step(const PdeState& s, const Closure& c, double dt, double cfl) {
  if (s.rho.empty() || s.y.size() != s.rho.size()) throw Error(Errc::DimensionMismatch, "malformed PDE state");
  if (!(dt > 0.0) || !(cfl > 0.0)) throw Error(Errc::InvalidArgument, "step needs dt > 0 and cfl > 0");
  const Extended e = extend(s, c);
  const double dx = s.dx();
  const double lam = max_speed(e);
  if (!std::isfinite(lam)) throw Error(Errc::CflViolation, "non-finite wave speed at t = " + std::to_string(s.time));
  if (dt * lam > cfl * dx * (1.0 + 1e-12))
    throw Error(Errc::CflViolation, "dt = " + std::to_string(dt) + " exceeds the CFL bound " +
                                        std::to_string(cfl * dx / lam));
  const auto n = static_cast<Eigen::Index>(s.nx());
  // Interface k sits between extended cells k and k + 1.
  Eigen::ArrayXd f_rho(n + 1), f_y(n + 1);
  for (Eigen::Index k = 0; k <= n; ++k) {
    const Eigen::Index l = k, r = k + 1;
    const double ql = e.rho[l] * e.v[l], qr = e.rho[r] * e.v[r];
    const double al = e.y[l] * e.v[l], ar = e.y[r] * e.v[r];
    const double sl = std::min(e.v[l] + e.rho[l] * e.dv[l], e.v[r] + e.rho[r] * e.dv[r]);
    const double sr = std::max({e.v[l], e.v[r], 0.0});
    if (sl >= 0.0) {
      f_rho[k] = ql;
      f_y[k] = al;
    } else if (sr <= 0.0) {
      f_rho[k] = qr;
      f_y[k] = ar;
    } else {
      const double inv = 1.0 / (sr - sl);
      f_rho[k] = (sr * ql - sl * qr + sl * sr * (e.rho[r] - e.rho[l])) * inv;
      f_y[k] = (sr * al - sl * ar + sl * sr * (e.y[r] - e.y[l])) * inv;
    }
  }
  if (!s.bc.periodic) {
    if (s.bc.left.kind == TraceKind::Closed) f_rho[0] = f_y[0] = 0.0;
    if (s.bc.right.kind == TraceKind::Closed) f_rho[n] = f_y[n] = 0.0;
  }

  PdeState out = s;
  // Inflow data is part of the admissible omega range.
  if (!s.bc.periodic) {
    if (s.bc.left.kind == TraceKind::Prescribed && e.rho[0] > 0.0) {
      out.omega_lo = std::min(out.omega_lo, e.omega[0]);
      out.omega_hi = std::max(out.omega_hi, e.omega[0]);
    }
    if (s.bc.right.kind == TraceKind::Prescribed && e.rho[n + 1] > 0.0) {
      out.omega_lo = std::min(out.omega_lo, e.omega[n + 1]);
      out.omega_hi = std::max(out.omega_hi, e.omega[n + 1]);
    }
  }
  const double ratio = dt / dx;
  // Excursions at rounding level are left alone so that I stays conserved exactly.
  const double slack = 1e-12 * std::max({std::abs(out.omega_lo), std::abs(out.omega_hi), 1.0});
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(k);
    double r = s.rho[i] - ratio * (f_rho[k + 1] - f_rho[k]);
    double y = s.y[i] - ratio * (f_y[k + 1] - f_y[k]);
    if (r <= 0.0) {
      r = 0.0;
      y = 0.0;
    } else if (r > kEpsRho) {
      const double w = y / r;
      if (w < out.omega_lo - slack || w > out.omega_hi + slack) {
        y = r * std::clamp(w, out.omega_lo, out.omega_hi);
        ++out.clamps;
      }
    }
    out.rho[i] = r;
    out.y[i] = y;
  }
  out.time = s.time + dt;
  out.q_in += dt * f_rho[0];
  out.q_out += dt * f_rho[n];
  out.a_in += dt * f_y[0];
  out.a_out += dt * f_y[n];
  return out;
}

ConservationReport conservation_report(const PdeState& initial, const PdeState& fin) {
  ConservationReport r;
  r.times = {initial.time, fin.time};
  r.n_series = {initial.mass(), fin.mass()};
  r.i_series = {initial.attribute(), fin.attribute()};
  r.q_in = fin.q_in - initial.q_in;
  r.q_out = fin.q_out - initial.q_out;
  r.a_in = fin.a_in - initial.a_in;
  r.a_out = fin.a_out - initial.a_out;
  r.n_residual = std::abs(r.n_series[1] - r.n_series[0] - (r.q_in - r.q_out));
  r.i_residual = std::abs(r.i_series[1] - r.i_series[0] - (r.a_in - r.a_out));
  const double n_scale = std::max({std::abs(r.n_series[0]), std::abs(r.q_in), std::abs(r.q_out)});
  const double i_scale = std::max({std::abs(r.i_series[0]), std::abs(r.a_in), std::abs(r.a_out)});
  r.n_relative = n_scale > 0.0 ? r.n_residual / n_scale : r.n_residual;
  r.i_relative = i_scale > 0.0 ? r.i_residual / i_scale : r.i_residual;
  return r;
}

namespace {

void record(ConservationReport& r, const PdeState& s) {
  r.times.push_back(s.time);
  r.n_series.push_back(s.mass());
  r.i_series.push_back(s.attribute());
}

void finish(PdeRun& run, const PdeState& initial) {
  auto summary = conservation_report(initial, run.state);
  summary.times = std::move(run.report.times);
  summary.n_series = std::move(run.report.n_series);
  summary.i_series = std::move(run.report.i_series);
  run.report = std::move(summary);
}

}  // namespace

PdeRun advance(const PdeState& s, const Closure& c, double t_end, double cfl, const StepObserver& observer) {
  PdeRun run;
  run.state = s;
  record(run.report, s);
  const double tol = 1e-12 * std::max(1.0, std::abs(t_end));
  while (run.state.time < t_end - tol) {
    double dt = stable_dt(run.state, c, cfl);
    const bool last = run.state.time + dt >= t_end;
    if (last) dt = t_end - run.state.time;
    PdeState next = gsom_step(run.state, c, dt, cfl);
    if (last) next.time = t_end;
    if (observer) observer(run.state, next, dt);
    run.state = std::move(next);
    ++run.steps;
    record(run.report, run.state);
  }
  finish(run, s);
  return run;
}

PdeRun advance_steps(const PdeState& s, const Closure& c, double dt, std::size_t n_steps, double cfl) {
  PdeRun run;
  run.state = s;
  record(run.report, s);
  for (std::size_t k = 0; k < n_steps; ++k) {
    run.state = gsom_step(run.state, c, dt, cfl);
    ++run.steps;
    record(run.report, run.state);
  }
  finish(run, s);
  return run;
}

OmegaField arz_omega_field(const CellField& observed, const ArzParams& p) {
  validate(p);
  OmegaField f;
  f.grid = observed.grid;
  f.nt = observed.nt;
  f.nx = observed.nx;
  const std::size_t n = f.nt * f.nx;
  f.omega.assign(n, std::numeric_limits<double>::quiet_NaN());
  f.mask.assign(n, 0);
  f.flags.assign(n, 0);
  for (std::size_t k = 0; k < n; ++k) {
    if (!observed.mask[k]) continue;
    f.omega[k] = observed.speed[k] + arz_pressure(p, observed.rho[k]);
    f.mask[k] = 1;
  }
  return f;
}

SimulationResult simulate(const CellField& init, const OmegaField& omega, const Closure& c, const SimulationConfig& cfg) {
  if (cfg.refine < 1 || !(cfg.cfl > 0.0)) throw Error(Errc::InvalidArgument, "simulation needs refine >= 1 and cfl > 0");
  if (init.nt == 0 || init.nx == 0) throw Error(Errc::EmptyInitialCondition, "empty evaluation grid");
  if (omega.nt != init.nt || omega.nx != init.nx) throw Error(Errc::DimensionMismatch, "omega and cell grids differ");
  const std::size_t nx = init.nx;

  std::vector<std::uint8_t> known(nx, 0);
  std::size_t n_known = 0;
  for (std::size_t j = 0; j < nx; ++j)
    if (init.mask[j] && omega.mask[j] && std::isfinite(omega.omega[j])) {
      known[j] = 1;
      ++n_known;
    }
  if (n_known == 0 || static_cast<double>(n_known) < cfg.min_coverage * static_cast<double>(nx))
    throw Error(Errc::EmptyInitialCondition, std::to_string(n_known) + " of " + std::to_string(nx) +
                                                 " initial cells are occupied with a defined omega");

  SimulationResult res;
  res.filled.assign(nx, 0);
  std::vector<double> rho0(nx), w0(nx);
  for (std::size_t j = 0; j < nx; ++j) {
    std::size_t src = j;
    if (!known[j]) {
      res.filled[j] = 1;
      for (std::size_t d = 1; d < nx; ++d) {
        const bool periodic = cfg.bc.periodic;
        const std::size_t lo = j >= d ? j - d : (periodic ? j + nx - d : nx);
        const std::size_t hi = j + d < nx ? j + d : (periodic ? j + d - nx : nx);
        if (lo < nx && known[lo]) {
          src = lo;
          break;
        }
        if (hi < nx && known[hi]) {
          src = hi;
          break;
        }
      }
    }
    rho0[j] = init.rho[src];
    w0[j] = omega.omega[src];
  }

  const auto m = static_cast<std::size_t>(cfg.refine);
  std::vector<double> rho_mesh(nx * m), w_mesh(nx * m);
  for (std::size_t k = 0; k < nx * m; ++k) {
    rho_mesh[k] = rho0[k / m];
    w_mesh[k] = w0[k / m];
  }
  const GridSpec& g = init.grid;
  PdeState s = make_pde_state(g.x0, g.dx * static_cast<double>(nx), rho_mesh, w_mesh, cfg.bc, cfg.omega_margin);
  s.time = g.t0;

  CellField& out = res.field;
  out.grid = g;
  out.nt = init.nt;
  out.nx = nx;
  const std::size_t n_cells = out.nt * nx;
  out.rho.assign(n_cells, 0.0);
  out.speed.assign(n_cells, 0.0);
  out.flow.assign(n_cells, 0.0);
  out.sum_distance.assign(n_cells, 0.0);
  out.sum_time.assign(n_cells, 0.0);
  out.mask.assign(n_cells, 1);
  out.n_vehicles.assign(n_cells, 0);
  std::vector<double> y_avg(n_cells, 0.0);

  Eigen::ArrayXd v_before, dv;
  auto speeds = [&](const PdeState& st, Eigen::ArrayXd& v) {
    Eigen::ArrayXd r(static_cast<Eigen::Index>(st.nx())), w(r.size());
    for (std::size_t k = 0; k < st.nx(); ++k) {
      r[static_cast<Eigen::Index>(k)] = st.rho[k];
      w[static_cast<Eigen::Index>(k)] = st.omega(k);
    }
    c.eval(r, w, v, dv);
  };

  PdeState first = s;
  PdeRun total;
  total.state = s;
  record(total.report, s);
  for (std::size_t i = 0; i < out.nt; ++i) {
    const double t_end = g.t0 + static_cast<double>(i + 1) * g.dt;
    std::size_t row = i;
    speeds(total.state, v_before);
    auto observer = [&](const PdeState& a, const PdeState& b, double dt) {
      Eigen::ArrayXd v_after;
      speeds(b, v_after);
      const double wgt = 0.5 * dt / (g.dt * static_cast<double>(m));
      for (std::size_t k = 0; k < a.nx(); ++k) {
        const std::size_t cell = row * nx + k / m;
        const auto kk = static_cast<Eigen::Index>(k);
        out.rho[cell] += wgt * (a.rho[k] + b.rho[k]);
        out.flow[cell] += wgt * (a.rho[k] * v_before[kk] + b.rho[k] * v_after[kk]);
        y_avg[cell] += wgt * (a.y[k] + b.y[k]);
      }
      v_before = std::move(v_after);
    };
    PdeRun part = advance(total.state, c, t_end, cfg.cfl, observer);
    total.steps += part.steps;
    for (std::size_t k = 1; k < part.report.times.size(); ++k) {
      total.report.times.push_back(part.report.times[k]);
      total.report.n_series.push_back(part.report.n_series[k]);
      total.report.i_series.push_back(part.report.i_series[k]);
    }
    total.state = std::move(part.state);
  }
  finish(total, first);
  res.run = std::move(total);

  res.omega.assign(n_cells, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t k = 0; k < n_cells; ++k) {
    out.speed[k] = out.rho[k] > kEpsRho ? out.flow[k] / out.rho[k] : 0.0;
    if (out.rho[k] > kEpsRho) res.omega[k] = y_avg[k] / out.rho[k];
    out.sum_time[k] = out.rho[k] * g.dx * g.dt;
    out.sum_distance[k] = out.flow[k] * g.dx * g.dt;
  }
  out.omega = res.omega;
  return res;
}

ModelError model_error(const CellField& sim, const CellField& obs) {
  if (sim.nt != obs.nt || sim.nx != obs.nx) throw Error(Errc::DimensionMismatch, "simulated and observed grids differ");
  ModelError e;
  double sr = 0.0, sv = 0.0, sq = 0.0;
  for (std::size_t k = 0; k < obs.mask.size(); ++k) {
    if (!obs.mask[k] || !sim.mask[k]) continue;
    if (!(obs.rho[k] > 0.0) || !(obs.speed[k] > 0.0) || !(obs.flow[k] > 0.0)) {
      ++e.excluded;
      continue;
    }
    const double a = (sim.rho[k] - obs.rho[k]) / obs.rho[k];
    const double b = (sim.speed[k] - obs.speed[k]) / obs.speed[k];
    const double q = (sim.flow[k] - obs.flow[k]) / obs.flow[k];
    sr += a * a;
    sv += b * b;
    sq += q * q;
    ++e.n_cells;
  }
  if (e.n_cells == 0) throw Error(Errc::EmptyCells, "no common occupied cell with positive observations");
  const double n = static_cast<double>(e.n_cells);
  e.e_rho = std::sqrt(sr / n) * 100.0;
  e.e_v = std::sqrt(sv / n) * 100.0;
  e.e_q = std::sqrt(sq / n) * 100.0;
  return e;
}

std::string simulation_csv(const SimulationResult& r) {
  const CellField& f = r.field;
  std::ostringstream os;
  os << "t,x,rho,v,q,omega\n";
  for (std::size_t i = 0; i < f.nt; ++i)
    for (std::size_t j = 0; j < f.nx; ++j) {
      const std::size_t k = f.index(i, j);
      os << csv::format_double(f.t_center(i)) << ',' << csv::format_double(f.x_center(j)) << ','
         << csv::format_double(f.rho[k]) << ',' << csv::format_double(f.speed[k]) << ','
         << csv::format_double(f.flow[k]) << ',';
      if (std::isfinite(r.omega[k])) os << csv::format_double(r.omega[k]);
      os << '\n';
    }
  return os.str();
}

}  // namespace hetflow

#include "hetflow/ovm_calib.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hetflow/error.hpp"
#include "hetflow/rng.hpp"

namespace hetflow {

namespace {

struct Track {
  std::vector<double> t, x, v;
  bool has_speed = false;

  // Linear interpolation of position; speed interpolated when recorded,
  // otherwise the slope of the bracketing interval.
  std::pair<double, double> at(double time) const {
    auto it = std::upper_bound(t.begin(), t.end(), time);
    std::size_t hi = static_cast<std::size_t>(it - t.begin());
    hi = std::clamp<std::size_t>(hi, 1, t.size() - 1);
    const std::size_t lo = hi - 1;
    const double w = (time - t[lo]) / (t[hi] - t[lo]);
    const double pos = x[lo] + w * (x[hi] - x[lo]);
    const double spd = has_speed ? v[lo] + w * (v[hi] - v[lo]) : (x[hi] - x[lo]) / (t[hi] - t[lo]);
    return {pos, spd};
  }
};

Track make_track(const VehicleTrajectory& traj, std::optional<double> road_length) {
  Track tr;
  tr.x = unwrap_positions(traj.samples, road_length);
  tr.has_speed = std::all_of(traj.samples.begin(), traj.samples.end(), [](const auto& s) { return s.speed.has_value(); });
  for (const auto& s : traj.samples) {
    tr.t.push_back(s.time);
    tr.v.push_back(s.speed.value_or(0.0));
  }
  return tr;
}

}  // namespace

CalibrationPair make_calibration_pair(const VehicleTrajectory& follower, const VehicleTrajectory& leader,
                                      std::optional<double> road_length) {
  if (follower.samples.size() < 2 || leader.samples.size() < 2)
    throw Error(Errc::InvalidArgument, "calibration pair needs at least two samples per vehicle");
  Track lead = make_track(leader, road_length);
  const Track fol = make_track(follower, road_length);

  const double t_lo = std::max(fol.t.front(), lead.t.front());
  const double t_hi = std::min(fol.t.back(), lead.t.back());
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < fol.t.size(); ++k)
    if (fol.t[k] >= t_lo && fol.t[k] <= t_hi) keep.push_back(k);
  if (keep.size() < 2)
    throw Error(Errc::InvalidArgument, "follower " + follower.vehicle_id + " and leader " + leader.vehicle_id +
                                           " do not overlap in time");

  if (road_length) {
    const double d = lead.at(fol.t[keep.front()]).first - fol.x[keep.front()];
    const double laps = std::ceil(-d / *road_length);
    if (laps != 0.0)
      for (double& x : lead.x) x += laps * *road_length;
    if (lead.at(fol.t[keep.front()]).first - fol.x[keep.front()] <= 0.0)
      for (double& x : lead.x) x += *road_length;
  }

  CalibrationPair pair;
  pair.follower = follower;
  pair.leader = leader;
  const std::size_t n = keep.size();
  pair.times.resize(n);
  pair.observed_gap.resize(n);
  pair.observed_speed.resize(n);
  pair.leader_position.resize(2 * n - 1);
  pair.leader_speed.resize(2 * n - 1);

  std::vector<double> fx(n);
  for (std::size_t j = 0; j < n; ++j) {
    pair.times[j] = fol.t[keep[j]];
    fx[j] = fol.x[keep[j]];
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (fol.has_speed) {
      pair.observed_speed[j] = fol.v[keep[j]];
    } else {
      const std::size_t a = j == 0 ? 0 : j - 1;
      const std::size_t b = j + 1 == n ? n - 1 : j + 1;
      pair.observed_speed[j] = (fx[b] - fx[a]) / (pair.times[b] - pair.times[a]);
    }
    const auto [lx, lv] = lead.at(pair.times[j]);
    pair.leader_position[2 * j] = lx;
    pair.leader_speed[2 * j] = lv;
    pair.observed_gap[j] = lx - fx[j] - leader.length;
    if (j + 1 < n) {
      const auto [mx, mv] = lead.at(0.5 * (fol.t[keep[j]] + fol.t[keep[j + 1]]));
      pair.leader_position[2 * j + 1] = mx;
      pair.leader_speed[2 * j + 1] = mv;
    }
  }
  pair.initial_gap = pair.observed_gap.front();
  pair.initial_speed = pair.observed_speed.front();
  if (!(pair.initial_gap > 0.0))
    throw Error(Errc::InvalidArgument, "leader " + leader.vehicle_id + " is not ahead of follower " +
                                           follower.vehicle_id + " at the first common time");
  return pair;
}

FollowerPrediction simulate_follower(const OvmParams& p, const CalibrationPair& pair) {
  const std::size_t n = pair.times.size();
  const double l_lead = pair.leader.length;
  FollowerPrediction out;
  out.gap.resize(n);
  out.speed.resize(n);
  double x = pair.leader_position[0] - l_lead - pair.initial_gap;
  double v = pair.initial_speed;
  out.gap[0] = pair.initial_gap;
  out.speed[0] = v;
  const double v_limit = 10.0 * std::max(p.v_free, 1.0);

  auto accel = [&](double xf, double vf, std::size_t idx) {
    const double gap = pair.leader_position[idx] - xf - l_lead;
    return ovm_acceleration(p, vf, gap, pair.leader_speed[idx]);
  };
  for (std::size_t j = 0; j + 1 < n; ++j) {
    const double h = pair.times[j + 1] - pair.times[j];
    const std::size_t i0 = 2 * j, im = 2 * j + 1, i1 = 2 * j + 2;
    const double k1x = v, k1v = accel(x, v, i0);
    const double k2x = v + 0.5 * h * k1v, k2v = accel(x + 0.5 * h * k1x, v + 0.5 * h * k1v, im);
    const double k3x = v + 0.5 * h * k2v, k3v = accel(x + 0.5 * h * k2x, v + 0.5 * h * k2v, im);
    const double k4x = v + h * k3v, k4v = accel(x + h * k3x, v + h * k3v, i1);
    x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
    v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
    v = std::max(0.0, v);
    if (!std::isfinite(v) || !std::isfinite(x) || v > v_limit)
      throw Error(Errc::BlowUp, "follower prediction diverged at t=" + std::to_string(pair.times[j + 1]));
    out.gap[j + 1] = pair.leader_position[i1] - x - l_lead;
    out.speed[j + 1] = v;
  }
  return out;
}

double calibration_alpha(const CalibrationPair& pair) {
  const double n = static_cast<double>(pair.times.size());
  const double s_mean = std::accumulate(pair.observed_gap.begin(), pair.observed_gap.end(), 0.0) / n;
  const double v_mean = std::accumulate(pair.observed_speed.begin(), pair.observed_speed.end(), 0.0) / n;
  if (!(v_mean > 0.0))
    throw Error(Errc::DegenerateTrajectory, "follower " + pair.follower.vehicle_id + " has zero mean speed");
  return (s_mean / v_mean) * (s_mean / v_mean);
}

double calibration_objective(const OvmParams& p, const CalibrationPair& pair) {
  const double alpha = calibration_alpha(pair);
  const auto pred = simulate_follower(p, pair);
  double cost = 0.0;
  for (std::size_t j = 0; j < pair.times.size(); ++j) {
    const double eg = pred.gap[j] - pair.observed_gap[j];
    const double ev = pred.speed[j] - pair.observed_speed[j];
    cost += eg * eg + alpha * ev * ev;
  }
  return cost;
}

std::pair<double, double> calibration_errors(const OvmParams& p, const CalibrationPair& pair) {
  const auto pred = simulate_follower(p, pair);
  double ng = 0.0, dg = 0.0, nv = 0.0, dv = 0.0;
  for (std::size_t j = 0; j < pair.times.size(); ++j) {
    ng += (pred.gap[j] - pair.observed_gap[j]) * (pred.gap[j] - pair.observed_gap[j]);
    dg += pair.observed_gap[j] * pair.observed_gap[j];
    nv += (pred.speed[j] - pair.observed_speed[j]) * (pred.speed[j] - pair.observed_speed[j]);
    dv += pair.observed_speed[j] * pair.observed_speed[j];
  }
  return {ng / dg * 100.0, nv / dv * 100.0};
}

void validate(const GaConfig& cfg) {
  if (cfg.population < 4 || cfg.iterations < 0)
    throw Error(Errc::InvalidArgument, "GA needs population >= 4 and iterations >= 0");
  auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!rate_ok(cfg.crossover_rate) || !rate_ok(cfg.mutation_rate))
    throw Error(Errc::InvalidArgument, "GA rates must lie in [0, 1]");
  for (const auto& b : {cfg.tau, cfg.beta, cfg.min_gap, cfg.time_gap, cfg.v_free})
    if (!(b.lo < b.hi)) throw Error(Errc::InvalidArgument, "GA bound with lower >= upper");
}

namespace {

constexpr std::size_t kGenes = 5;
using Genome = std::array<double, kGenes>;

OvmParams decode(const Genome& g, double length) {
  OvmParams p;
  p.tau = g[0];
  p.beta = g[1];
  p.min_gap = g[2];
  p.time_gap = g[3];
  p.v_free = g[4];
  p.length = length;
  return p;
}

double fitness(const Genome& g, const CalibrationPair& pair, double length) {
  if (!(g[0] > 0.0)) return std::numeric_limits<double>::infinity();
  try {
    const double c = calibration_objective(decode(g, length), pair);
    return std::isfinite(c) ? c : std::numeric_limits<double>::infinity();
  } catch (const Error& e) {
    if (e.code() == Errc::BlowUp) return std::numeric_limits<double>::infinity();
    throw;
  }
}

}  // namespace

CalibrationResult calibrate_ovm(const CalibrationPair& pair, const GaConfig& cfg) {
  validate(cfg);
  const double alpha = calibration_alpha(pair);  // raises DegenerateTrajectory up front
  const std::array<ParamBounds, kGenes> bounds = {cfg.tau, cfg.beta, cfg.min_gap, cfg.time_gap, cfg.v_free};
  const double length = pair.follower.length;
  Rng rng = make_rng(cfg.seed, "ovm_ga");

  const auto pop_size = static_cast<std::size_t>(cfg.population);
  std::vector<Genome> pop(pop_size);
  std::vector<double> cost(pop_size);
  for (auto& g : pop)
    for (std::size_t d = 0; d < kGenes; ++d) g[d] = uniform(rng, bounds[d].lo, bounds[d].hi);
  for (std::size_t i = 0; i < pop_size; ++i) cost[i] = fitness(pop[i], pair, length);

  auto best_index = [&] {
    return static_cast<std::size_t>(std::min_element(cost.begin(), cost.end()) - cost.begin());
  };
  auto tournament = [&]() -> const Genome& {
    std::size_t winner = uniform_index(rng, pop_size);
    for (int k = 1; k < 3; ++k) {
      const std::size_t c = uniform_index(rng, pop_size);
      if (cost[c] < cost[winner]) winner = c;
    }
    return pop[winner];
  };

  CalibrationResult result;
  result.best_cost_history.reserve(static_cast<std::size_t>(cfg.iterations));
  std::vector<Genome> next(pop_size);
  std::vector<double> next_cost(pop_size);
  for (int it = 0; it < cfg.iterations; ++it) {
    const std::size_t elite = best_index();
    next[0] = pop[elite];
    next_cost[0] = cost[elite];
    for (std::size_t i = 1; i < pop_size; ++i) {
      const Genome& a = tournament();
      const Genome& b = tournament();
      Genome child = a;
      if (uniform01(rng) < cfg.crossover_rate) {
        for (std::size_t d = 0; d < kGenes; ++d) {
          const double lo = std::min(a[d], b[d]), hi = std::max(a[d], b[d]);
          const double spread = 0.5 * (hi - lo);
          child[d] = uniform(rng, lo - spread, hi + spread);
        }
      }
      for (std::size_t d = 0; d < kGenes; ++d) {
        if (uniform01(rng) < cfg.mutation_rate)
          child[d] += 0.05 * (bounds[d].hi - bounds[d].lo) * standard_normal(rng);
        child[d] = std::clamp(child[d], bounds[d].lo, bounds[d].hi);
      }
      next[i] = child;
      next_cost[i] = fitness(child, pair, length);
    }
    pop.swap(next);
    cost.swap(next_cost);
    result.best_cost_history.push_back(cost[best_index()]);
  }

  const std::size_t best = best_index();
  if (!std::isfinite(cost[best]))
    throw Error(Errc::BlowUp, "no stable parameter set found for " + pair.follower.vehicle_id);
  result.params = decode(pop[best], length);
  result.cost = cost[best];
  result.alpha = alpha;
  std::tie(result.e_gap, result.e_speed) = calibration_errors(result.params, pair);
  return result;
}

std::vector<std::size_t> infer_ring_leaders(const Dataset& ds) {
  if (ds.topology != Topology::Ring || !ds.road_length)
    throw Error(Errc::InvalidArgument, "leader inference needs a ring dataset");
  const std::size_t n = ds.trajectories.size();
  if (n < 2) throw Error(Errc::InvalidArgument, "leader inference needs at least two vehicles");
  double t0 = -std::numeric_limits<double>::infinity();
  for (const auto& t : ds.trajectories) t0 = std::max(t0, t.start_time());
  std::vector<double> pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = ds.trajectories[i].samples;
    auto it = std::lower_bound(s.begin(), s.end(), t0, [](const auto& a, double t) { return a.time < t; });
    if (it == s.end()) throw Error(Errc::InvalidArgument, "vehicles share no common time");
    pos[i] = it->position;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pos[a] < pos[b]; });
  std::vector<std::size_t> leader(n);
  for (std::size_t k = 0; k < n; ++k) leader[order[k]] = order[(k + 1) % n];
  return leader;
}

}  // namespace hetflow

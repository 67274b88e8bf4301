#include "hetflow/fd_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>

#include "hetflow/error.hpp"
#include "hetflow/rng.hpp"

namespace hetflow {

std::string to_string(FdKind k) { return k == FdKind::TwoVar ? "TWO_VAR" : "ONE_VAR"; }

FdKind parse_fd_kind(const std::string& s) {
  if (s == "TWO_VAR" || s == "two" || s == "two_var") return FdKind::TwoVar;
  if (s == "ONE_VAR" || s == "one" || s == "one_var") return FdKind::OneVar;
  throw Error(Errc::InvalidArgument, "unknown FD kind '" + s + "'");
}

void validate(const FdTrainConfig& c) {
  if (!(c.penalty > 0.0) || c.n_penalty < 1 || !(c.train_fraction > 0.0 && c.train_fraction <= 1.0) ||
      c.epochs < 0 || c.audit_grid < 2 || !(c.bounds_margin >= 0.0))
    throw Error(Errc::InvalidArgument,
                "FD training needs penalty > 0, n_penalty >= 1, train_fraction in (0, 1], epochs >= 0");
  if (c.bounds && (!(c.bounds->rho_max > 0.0) || !(c.bounds->omega_min < c.bounds->omega_max)))
    throw Error(Errc::InvalidArgument, "FD bounds must satisfy rho_max > 0 and omega_min < omega_max");
}

FdBounds default_bounds(std::span<const FdSample> samples, double margin) {
  if (samples.empty()) throw Error(Errc::InsufficientData, "no FD samples");
  FdBounds b;
  double rho_hi = 0.0, w_lo = std::numeric_limits<double>::infinity(), w_hi = -w_lo;
  for (const auto& s : samples) {
    rho_hi = std::max(rho_hi, s.rho);
    w_lo = std::min(w_lo, s.omega);
    w_hi = std::max(w_hi, s.omega);
  }
  b.rho_max = (1.0 + margin) * rho_hi;
  b.omega_min = w_lo - margin * std::abs(w_lo);
  b.omega_max = w_hi + margin * std::abs(w_hi);
  if (!(b.omega_max > b.omega_min)) {
    b.omega_min -= 0.5;
    b.omega_max += 0.5;
  }
  if (!(b.rho_max > 0.0)) throw Error(Errc::InsufficientData, "FD samples have no positive density");
  return b;
}

namespace {

int in_dim(FdKind k) { return k == FdKind::TwoVar ? 2 : 1; }

Eigen::MatrixXd inputs(FdKind k, const Eigen::VectorXd& rho, const Eigen::VectorXd& omega) {
  Eigen::MatrixXd x(in_dim(k), rho.size());
  x.row(0) = rho.transpose();
  if (k == FdKind::TwoVar) x.row(1) = omega.transpose();
  return x;
}

double rmse_percent(const Eigen::VectorXd& pred, std::span<const FdSample> samples,
                    const std::vector<std::size_t>& idx, std::size_t* excluded) {
  double acc = 0.0;
  std::size_t used = 0, skipped = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const double v = samples[idx[k]].v;
    if (!(v > 0.0)) {
      ++skipped;
      continue;
    }
    const double r = (pred[static_cast<Eigen::Index>(k)] - v) / v;
    acc += r * r;
    ++used;
  }
  if (excluded) *excluded = skipped;
  return used ? std::sqrt(acc / static_cast<double>(used)) * 100.0 : std::numeric_limits<double>::quiet_NaN();
}

Eigen::VectorXd predict(const FdModel& m, std::span<const FdSample> samples, const std::vector<std::size_t>& idx) {
  Eigen::VectorXd rho(static_cast<Eigen::Index>(idx.size())), w(rho.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    rho[static_cast<Eigen::Index>(k)] = samples[idx[k]].rho;
    w[static_cast<Eigen::Index>(k)] = samples[idx[k]].omega;
  }
  return fd_eval_batch(m, rho, w);
}

}  // namespace

FdTrainResult train_fd(std::span<const FdSample> samples, FdKind kind, const FdTrainConfig& cfg) {
  validate(cfg);
  if (samples.size() < 10) throw Error(Errc::InsufficientData, "FD training needs at least 10 samples");
  for (const auto& s : samples)
    if (!std::isfinite(s.rho) || !std::isfinite(s.v) || (kind == FdKind::TwoVar && !std::isfinite(s.omega)))
      throw Error(Errc::InvalidArgument, "FD samples must be finite");

  FdTrainResult res;
  Rng split_rng = make_rng(cfg.seed, "fd_split");
  const auto order = permutation(samples.size(), split_rng);
  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(samples.size()))), 1,
      samples.size());
  res.train_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  res.test_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());

  FdModel& m = res.model;
  m.kind = kind;
  m.bounds = cfg.bounds ? *cfg.bounds : default_bounds(samples, cfg.bounds_margin);

  MlpSpec spec;
  spec.input_dim = in_dim(kind);
  spec.output_dim = 1;
  spec.hidden_layers = cfg.hidden_layers;
  spec.hidden_width = cfg.hidden_width;
  spec.seed = substream_seed(cfg.seed, "fd_net");
  m.net = mlp_init(spec);
  Eigen::VectorXd lo(spec.input_dim), hi(spec.input_dim);
  lo[0] = 0.0;
  hi[0] = m.bounds.rho_max;
  if (kind == FdKind::TwoVar) {
    lo[1] = m.bounds.omega_min;
    hi[1] = m.bounds.omega_max;
  }
  set_input_normalization(m.net, lo, hi);
  // Scale by the largest |v| and centre on the mean speed, so the untrained
  // network starts near the data instead of straddling zero, where the
  // non-negativity penalty would dominate the first thousands of epochs.
  double v_scale = 0.0, v_mean = 0.0;
  for (std::size_t i : res.train_indices) {
    v_scale = std::max(v_scale, std::abs(samples[i].v));
    v_mean += samples[i].v;
  }
  v_mean /= static_cast<double>(n_train);
  set_output_affine(m.net, Eigen::VectorXd::Constant(1, v_scale > 0.0 ? v_scale : 1.0),
                    Eigen::VectorXd::Constant(1, v_mean));

  Eigen::VectorXd rho(static_cast<Eigen::Index>(n_train)), w(rho.size());
  Eigen::MatrixXd target(1, rho.size());
  for (std::size_t k = 0; k < n_train; ++k) {
    const auto& s = samples[res.train_indices[k]];
    rho[static_cast<Eigen::Index>(k)] = s.rho;
    w[static_cast<Eigen::Index>(k)] = s.omega;
    target(0, static_cast<Eigen::Index>(k)) = s.v;
  }

  Rng pen_rng = make_rng(cfg.seed, "fd_penalty_points");
  Eigen::VectorXd prho(cfg.n_penalty), pw(cfg.n_penalty);
  for (int k = 0; k < cfg.n_penalty; ++k) {
    prho[k] = uniform(pen_rng, 0.0, m.bounds.rho_max);
    pw[k] = uniform(pen_rng, m.bounds.omega_min, m.bounds.omega_max);
  }
  // Both terms are evaluated on the normalised surface V / v_scale over
  // rho / rho_max; the constraint signs are unchanged by the scaling.
  const double vs = m.net.out_scale[0];
  const double dens = m.bounds.rho_max;
  LossTerm data;
  data.inputs = inputs(kind, rho, w);
  data.evaluate = [target, vs](const Jets& out, Jets& seed) {
    const double n = static_cast<double>(target.cols());
    const Eigen::MatrixXd r = (out.value - target) / vs;
    seed.value = (2.0 / (n * vs)) * r;
    return r.squaredNorm() / n;
  };
  LossTerm penalty;
  penalty.inputs = inputs(kind, prho, pw);
  penalty.derivative_dim = 0;
  penalty.evaluate = [prho, p = cfg.penalty, vs, dens](const Jets& out, Jets& seed) {
    const double scale = p / static_cast<double>(prho.size());
    const double c_unit = dens / vs;
    double loss = 0.0;
    for (Eigen::Index k = 0; k < prho.size(); ++k) {
      const double neg = std::min(0.0, out.value(0, k) / vs);
      const double conc = std::max(0.0, (2.0 * out.d1(0, k) + prho[k] * out.d2(0, k)) * c_unit);
      loss += neg * neg + conc * conc;
      seed.value(0, k) = 2.0 * scale * neg / vs;
      seed.d1(0, k) = 4.0 * scale * conc * c_unit;
      seed.d2(0, k) = 2.0 * scale * conc * c_unit * prho[k];
    }
    return scale * loss;
  };

  AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  adam.epochs = cfg.epochs;
  auto trained = train(m.net, {data, penalty}, adam);
  m.net = std::move(trained.model);
  res.loss_history = std::move(trained.loss_history);
  m.audit = audit_constraints(m, cfg.audit_grid, cfg.audit_tolerance);

  res.train_error = rmse_percent(predict(m, samples, res.train_indices), samples, res.train_indices, nullptr);
  res.test_error = res.test_indices.empty()
                       ? std::numeric_limits<double>::quiet_NaN()
                       : rmse_percent(predict(m, samples, res.test_indices), samples, res.test_indices, nullptr);
  return res;
}

double fd_eval(const FdModel& m, double rho, double omega) {
  return fd_eval_batch(m, Eigen::VectorXd::Constant(1, rho), Eigen::VectorXd::Constant(1, omega))[0];
}

std::array<double, 3> fd_eval_jets(const FdModel& m, double rho, double omega) {
  const auto j = mlp_input_derivatives_batch(
      m.net, inputs(m.kind, Eigen::VectorXd::Constant(1, rho), Eigen::VectorXd::Constant(1, omega)), 0);
  return {j.value(0, 0), j.d1(0, 0), j.d2(0, 0)};
}

Eigen::VectorXd fd_eval_batch(const FdModel& m, const Eigen::VectorXd& rho, const Eigen::VectorXd& omega) {
  if (m.kind == FdKind::TwoVar && omega.size() != rho.size())
    throw Error(Errc::DimensionMismatch, "rho and omega differ in length");
  return mlp_forward_batch(m.net, inputs(m.kind, rho, omega)).row(0).transpose();
}

std::array<Eigen::VectorXd, 3> fd_eval_jets_batch(const FdModel& m, const Eigen::VectorXd& rho,
                                                  const Eigen::VectorXd& omega) {
  if (m.kind == FdKind::TwoVar && omega.size() != rho.size())
    throw Error(Errc::DimensionMismatch, "rho and omega differ in length");
  const auto j = mlp_input_derivatives_batch(m.net, inputs(m.kind, rho, omega), 0);
  return {j.value.row(0).transpose(), j.d1.row(0).transpose(), j.d2.row(0).transpose()};
}

double fd_rmse(const FdModel& m, std::span<const FdSample> samples, std::size_t* excluded) {
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  return rmse_percent(predict(m, samples, idx), samples, idx, excluded);
}

FdAudit audit_surface(const SurfaceJets& f, const FdBounds& box, bool two_var, int n_grid, double tol) {
  if (n_grid < 2) throw Error(Errc::InvalidArgument, "audit lattice needs at least 2 points per axis");
  FdAudit a;
  a.tolerance = tol;
  a.worst_concavity = -std::numeric_limits<double>::infinity();
  const int n_w = two_var ? n_grid : 1;
  for (int i = 0; i < n_grid; ++i) {
    const double rho = box.rho_max * i / (n_grid - 1);
    for (int k = 0; k < n_w; ++k) {
      const double w = two_var ? box.omega_min + (box.omega_max - box.omega_min) * k / (n_grid - 1) : 0.0;
      const auto [v, dv, ddv] = f(rho, w);
      const double conc = 2.0 * dv + rho * ddv;
      a.worst_negative_speed = std::min(a.worst_negative_speed, v);
      a.worst_concavity = std::max(a.worst_concavity, conc);
      if (v < -tol || conc > tol) ++a.n_violations;
      ++a.n_points;
    }
  }
  a.violation_fraction = static_cast<double>(a.n_violations) / static_cast<double>(a.n_points);
  return a;
}

FdAudit audit_constraints(const FdModel& m, int n_grid, double tol) {
  return audit_surface([&](double rho, double w) { return fd_eval_jets(m, rho, w); }, m.bounds,
                       m.kind == FdKind::TwoVar, n_grid, tol);
}

std::string fd_to_json(const FdModel& m) {
  nlohmann::json j;
  j["format"] = "hetflow-fd";
  j["version"] = 1;
  j["kind"] = to_string(m.kind);
  j["bounds"] = {{"rho_max", m.bounds.rho_max}, {"omega_min", m.bounds.omega_min}, {"omega_max", m.bounds.omega_max}};
  j["audit"] = {{"n_points", m.audit.n_points},
                {"n_violations", m.audit.n_violations},
                {"violation_fraction", m.audit.violation_fraction},
                {"worst_negative_speed", m.audit.worst_negative_speed},
                {"worst_concavity", m.audit.worst_concavity},
                {"tolerance", m.audit.tolerance}};
  j["net"] = nlohmann::json::parse(mlp_to_json(m.net));
  return j.dump();
}

FdModel fd_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "hetflow-fd" || j.at("version") != 1)
      throw Error(Errc::InvalidArgument, "unsupported FD model file");
    FdModel m;
    m.kind = parse_fd_kind(j.at("kind").get<std::string>());
    const auto& b = j.at("bounds");
    m.bounds = {b.at("rho_max"), b.at("omega_min"), b.at("omega_max")};
    const auto& a = j.at("audit");
    m.audit.n_points = a.at("n_points");
    m.audit.n_violations = a.at("n_violations");
    m.audit.violation_fraction = a.at("violation_fraction");
    m.audit.worst_negative_speed = a.at("worst_negative_speed");
    m.audit.worst_concavity = a.at("worst_concavity");
    m.audit.tolerance = a.at("tolerance");
    m.net = mlp_from_json(j.at("net").dump());
    if (m.net.spec.input_dim != in_dim(m.kind)) throw Error(Errc::DimensionMismatch, "FD kind and network disagree");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("FD model file: ") + e.what());
  }
}

std::function<double(double)> fd_speed_function(const FdModel& m) {
  return [m](double rho) { return fd_eval(m, rho, 0.0); };
}

}  // namespace hetflow

/// @file fd_model.hpp
/// @brief Penalty-constrained neural fundamental diagrams V(rho, omega) and V(rho).
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hetflow/nn_engine.hpp"

namespace hetflow {

enum class FdKind { TwoVar, OneVar };
std::string to_string(FdKind k);
FdKind parse_fd_kind(const std::string& s);

struct FdSample {
  double rho = 0.0;    // veh/m
  double omega = 0.0;  // ignored by one-variable models
  double v = 0.0;      // m/s
};

struct FdBounds {
  double rho_max = 0.2;
  double omega_min = 0.0;
  double omega_max = 1.0;

  bool operator==(const FdBounds&) const = default;
};

struct FdAudit {
  std::size_t n_points = 0;
  std::size_t n_violations = 0;
  double violation_fraction = 0.0;
  double worst_negative_speed = 0.0;  // most negative V (0 if none)
  double worst_concavity = 0.0;       // largest 2 dV/drho + rho d2V/drho2 (may be negative)
  double tolerance = 1e-2;
};

struct FdModel {
  FdKind kind = FdKind::TwoVar;
  MlpModel net;
  FdBounds bounds;
  FdAudit audit;
};

struct FdTrainConfig {
  double penalty = 1000.0;
  int n_penalty = 200;
  double train_fraction = 0.6;
  int epochs = 50000;
  double learning_rate = 1e-3;
  int hidden_layers = 3;
  int hidden_width = 50;
  std::optional<FdBounds> bounds;  // default: widened data extrema
  double bounds_margin = 0.1;
  std::uint64_t seed = 1;
  int audit_grid = 50;
  double audit_tolerance = 1e-2;
};

void validate(const FdTrainConfig& cfg);

struct FdTrainResult {
  FdModel model;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
  std::vector<double> loss_history;
  double train_error = 0.0;  // percent
  double test_error = 0.0;   // percent; NaN without a test split
};

/// Splits the samples with the seed, then minimises
/// mean((V - v)^2) + p * (mean(min(0, V)^2) + mean(max(0, 2 V_rho + rho V_rhorho)^2))
/// with the penalty evaluated on a fixed uniform point set over the bounds box.
/// Speeds are measured in units of the largest training speed and density in
/// units of rho_max while training.
FdTrainResult train_fd(std::span<const FdSample> samples, FdKind kind, const FdTrainConfig& cfg);

/// Bounds from the data: rho in [0, (1 + margin) max rho], omega widened by
/// `margin` of its magnitude on each side.
FdBounds default_bounds(std::span<const FdSample> samples, double margin = 0.1);

double fd_eval(const FdModel& m, double rho, double omega = 0.0);
/// V, dV/drho, d2V/drho2.
std::array<double, 3> fd_eval_jets(const FdModel& m, double rho, double omega = 0.0);
/// Batch evaluation; omega ignored for one-variable models.
Eigen::VectorXd fd_eval_batch(const FdModel& m, const Eigen::VectorXd& rho, const Eigen::VectorXd& omega);
/// Batch V, dV/drho, d2V/drho2.
std::array<Eigen::VectorXd, 3> fd_eval_jets_batch(const FdModel& m, const Eigen::VectorXd& rho,
                                                  const Eigen::VectorXd& omega);

/// sqrt(mean(((V - v) / v)^2)) * 100 over samples with v > 0.
double fd_rmse(const FdModel& m, std::span<const FdSample> samples, std::size_t* excluded = nullptr);

using SurfaceJets = std::function<std::array<double, 3>(double rho, double omega)>;

/// Checks V >= -tol and 2 V_rho + rho V_rhorho <= tol on an n x n lattice over the box.
FdAudit audit_surface(const SurfaceJets& f, const FdBounds& box, bool two_var, int n_grid, double tol = 1e-2);
FdAudit audit_constraints(const FdModel& m, int n_grid, double tol = 1e-2);

std::string fd_to_json(const FdModel& m);
FdModel fd_from_json(const std::string& text);

/// V(rho) of a one-variable model as a plain function.
std::function<double(double)> fd_speed_function(const FdModel& m);

}  // namespace hetflow

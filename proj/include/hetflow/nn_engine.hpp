/// @file nn_engine.hpp
/// @brief Small dense tanh network: batched evaluation, input-derivative jets,
/// backpropagation through those jets, and full-batch ADAM.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace hetflow {

struct MlpSpec {
  int input_dim = 1;
  int output_dim = 1;
  int hidden_layers = 3;
  int hidden_width = 50;
  std::uint64_t seed = 1;
  double init_scale = 1.0;  // weights ~ U(-s, s) / sqrt(fan_in)

  bool operator==(const MlpSpec&) const = default;
};

void validate(const MlpSpec& spec);

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;
};

struct MlpModel {
  MlpSpec spec;
  std::vector<DenseLayer> layers;
  Eigen::VectorXd in_min, in_max;   // per-input min-max normalization
  Eigen::VectorXd out_scale, out_shift;  // y = scale * net + shift, fixed during training

  std::size_t parameter_count() const;
};

MlpModel mlp_init(const MlpSpec& spec);

/// Throws InvalidArgument unless min < max in every dimension.
void set_input_normalization(MlpModel& m, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi);
void set_output_affine(MlpModel& m, const Eigen::VectorXd& scale, const Eigen::VectorXd& shift);

Eigen::VectorXd mlp_forward(const MlpModel& m, const Eigen::VectorXd& x);
/// Columns of `x` are samples.
Eigen::MatrixXd mlp_forward_batch(const MlpModel& m, const Eigen::MatrixXd& x);

/// Output value with its first and second derivatives along one physical input axis.
struct Jets {
  Eigen::MatrixXd value;  // output_dim x N
  Eigen::MatrixXd d1;
  Eigen::MatrixXd d2;
};

Jets mlp_input_derivatives_batch(const MlpModel& m, const Eigen::MatrixXd& x, int dim);

struct InputDerivatives {
  Eigen::VectorXd value, d1, d2;
};
InputDerivatives mlp_input_derivatives(const MlpModel& m, const Eigen::VectorXd& x, int dim);

/// One block of a composite loss. The callback receives the network output
/// (and, when `derivative_dim` is set, the jets along that axis), returns the
/// loss contribution and writes dLoss/d(value, d1, d2) into `seed`.
struct LossTerm {
  Eigen::MatrixXd inputs;  // input_dim x N, physical units
  std::optional<int> derivative_dim;
  std::function<double(const Jets& out, Jets& seed)> evaluate;
};

struct LossGradient {
  double loss = 0.0;
  Eigen::VectorXd gradient;  // flattened like mlp_parameters
};

LossGradient loss_and_gradient(const MlpModel& m, const std::vector<LossTerm>& terms);

/// Flattened parameters: per layer, weights row-major then bias.
Eigen::VectorXd mlp_parameters(const MlpModel& m);
void set_mlp_parameters(MlpModel& m, const Eigen::VectorXd& theta);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int epochs = 1000;
};

void validate(const AdamConfig& cfg);

struct TrainResult {
  MlpModel model;
  std::vector<double> loss_history;  // loss before each update
};

/// Full-batch ADAM. Throws NonFiniteLoss if the loss or gradient stops being finite.
TrainResult train(const MlpModel& init, const std::vector<LossTerm>& terms, const AdamConfig& cfg);

/// Mean squared error term on (inputs, targets), targets output_dim x N.
LossTerm mse_term(Eigen::MatrixXd inputs, Eigen::MatrixXd targets);

std::string mlp_to_json(const MlpModel& m);
MlpModel mlp_from_json(const std::string& text);

}  // namespace hetflow

/// @file micro2macro.hpp
/// @brief Per-vehicle in-cell features and the sum-pooled mapping network that
/// predicts a cell's traffic attribute from its members.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hetflow/edie_grid.hpp"
#include "hetflow/nn_engine.hpp"
#include "hetflow/omega_recon.hpp"

namespace hetflow {

inline constexpr int kFeatureCount = 8;

/// Feature order: density, speed mean, speed std, accel mean, accel std,
/// jerk mean, jerk abs-mean, jerk std.
using FeatureVector = std::array<double, kFeatureCount>;

struct VehicleFeatures {
  std::size_t i = 0, j = 0;  // cell (time, space)
  std::string vehicle_id;
  FeatureVector f{};
};

/// Requires at least 2 samples of speed, acceleration and jerk inside the
/// cell (TooFewSamples) and an occupied cell (InvalidArgument).
VehicleFeatures extract_features(const CellVehicleStats& stats, const CellField& field);

struct FeatureSet {
  std::vector<VehicleFeatures> features;  // ordered like the input stats
  std::vector<std::string> skipped;       // "vehicle_id@i,j" with too few samples
};

FeatureSet extract_all_features(const CellStatsResult& stats, const CellField& field);

/// i,j,vehicle_id,rho,v_mean,v_std,a_mean,a_std,j_mean,j_absmean,j_std
std::string features_csv(const FeatureSet& set);

enum class FeatureVariant { All, Macro, Micro, MicroV, MicroA, MicroJ, MacroV, MacroA, MacroJ };

std::string to_string(FeatureVariant v);
FeatureVariant parse_feature_variant(const std::string& s);
std::vector<FeatureVariant> all_feature_variants();

/// Indices into FeatureVector used by a variant.
std::vector<int> variant_indices(FeatureVariant v);
Eigen::VectorXd select_variant(const FeatureVector& f, FeatureVariant v);

/// One cell with its members' full feature vectors and the target attribute.
struct MappingCell {
  std::size_t i = 0, j = 0;
  double rho = 0.0;
  double omega = 0.0;
  std::vector<FeatureVector> members;
};

/// Groups features by cell and attaches targets; cells without a defined
/// target or without members are dropped. Throws EmptyCells if none remain.
std::vector<MappingCell> build_mapping_cells(const FeatureSet& set, const OmegaField& targets);

struct MappingModel {
  MlpModel net;  // input = variant dimension, output 1
  FeatureVariant variant = FeatureVariant::All;
};

struct MappingConfig {
  FeatureVariant variant = FeatureVariant::All;
  int hidden_layers = 7;
  int hidden_width = 50;
  int epochs = 3000;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
};

void validate(const MappingConfig& cfg);

struct MappingTrainResult {
  MappingModel model;
  std::vector<double> loss_history;
  double train_error = 0.0;  // percent
};

/// Minimises the mean over cells of ((sum_k NN(f_k) - omega) / omega_bar)^2.
/// Input normalisation comes from the training members only; the output is
/// scaled by the mean per-member attribute so an O(1) net sums to O(omega).
MappingTrainResult train_mapping(std::span<const MappingCell> cells, const MappingConfig& cfg);

/// Sum of the per-member outputs; members hold full feature vectors.
double predict_omega(const MappingModel& m, std::span<const FeatureVector> members);
std::vector<double> predict_omega(const MappingModel& m, std::span<const MappingCell> cells);

/// sqrt(mean(((pred - omega) / omega)^2)) * 100 over cells with omega != 0.
double mapping_error(const MappingModel& m, std::span<const MappingCell> cells);

/// Field of predicted omega on the target grid (NnMapping provenance).
OmegaField predict_omega_field(const MappingModel& m, std::span<const MappingCell> cells, const GridSpec& grid);

std::string mapping_to_json(const MappingModel& m);
MappingModel mapping_from_json(const std::string& text);

}  // namespace hetflow

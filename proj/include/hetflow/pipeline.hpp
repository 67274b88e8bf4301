/// @file pipeline.hpp
/// @brief End-to-end stage orchestration, sensitivity experiments and
/// machine-readable reports.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hetflow/edie_grid.hpp"
#include "hetflow/fd_model.hpp"
#include "hetflow/gsom_pde.hpp"
#include "hetflow/micro2macro.hpp"
#include "hetflow/ovm_calib.hpp"
#include "hetflow/stochastic_attr.hpp"
#include "hetflow/trajectory.hpp"

namespace hetflow {

// ---------------------------------------------------------------- reports

struct ReportRow {
  std::string experiment;
  std::string condition;
  std::string metric;
  double value = 0.0;

  bool operator==(const ReportRow&) const = default;
};

struct Report {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<ReportRow> rows;
  std::map<std::string, double> timings;  // seconds; not part of the metrics table

  double value(const std::string& experiment, const std::string& condition, const std::string& metric) const;
};

/// 16 hex digits of FNV-1a over the text.
std::string hash_text(const std::string& text);

/// config_hash,seed,experiment,condition,metric,value (one row per metric).
std::string report_csv(const Report& r);
Report parse_report_csv(const std::string& text);
std::string report_json(const Report& r);

/// Writes <stem>.csv and <stem>.json into `dir`. Throws IoFailure.
void emit_report(const Report& r, const std::filesystem::path& dir, const std::string& stem = "report");

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// --------------------------------------------------------------- pipeline

struct PipelineConfig {
  std::vector<std::string> stages;
  std::filesystem::path output_dir = "hetflow_out";
  std::uint64_t seed = 1;

  std::string scenario_json = R"({"scenario":"hv_av1_hv_av2","duration":900})";
  std::optional<std::filesystem::path> ingest_path;
  std::optional<std::filesystem::path> schema_path;

  SmoothingConfig kinematics;
  GaConfig ga;
  AttributeConfig attributes;
  double dx = 30.0, dt = 30.0;
  std::optional<double> t0, t1;
  std::string omega_method = "abundant";  // or "scarce"
  FdTrainConfig fd;
  MappingConfig mapping;
  double mapping_train_fraction = 0.8;
  std::vector<std::string> closures{"GSOM", "ARZ"};
  int pde_refine = 1;
  double pde_cfl = 0.5;
  double arz_gamma = 2.0;

  std::string canonical;  // canonical JSON text the hash is computed from
};

/// Every stage in dependency order.
const std::vector<std::string>& pipeline_stages();

/// Parses a JSON config; unknown stage names are rejected.
PipelineConfig parse_pipeline_config(const std::string& json_text);
/// Canonical JSON of a config (sorted keys, defaults filled in).
std::string canonical_config(const PipelineConfig& cfg);

/// Runs one stage, reading upstream artifacts from and writing its own into
/// cfg.output_dir. Errors are rethrown as StageFailure naming the stage and
/// the hashes of the upstream artifacts it found.
std::vector<ReportRow> run_stage(const std::string& stage, const PipelineConfig& cfg);

/// Runs cfg.stages (all stages when empty) in dependency order and writes report.{csv,json}.
Report run_pipeline(const PipelineConfig& cfg);

/// Mapping cells (member features plus omega target) rebuilt from the
/// kinematics, grid and omega artifacts in cfg.output_dir. Throws IoFailure
/// when one is missing.
std::vector<MappingCell> pipeline_mapping_cells(const PipelineConfig& cfg);

// ------------------------------------------------------------ experiments

enum class ExperimentKind { TrainRatio, DensitySplit, OmegaSplit, FeatureAblation, NnSize };
std::string to_string(ExperimentKind k);
ExperimentKind parse_experiment_kind(const std::string& s);

struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::TrainRatio;
  std::vector<double> ratios{0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 0.9};
  double density_lo = 0.1, density_hi = 0.15;  // veh/m, training band
  double omega_threshold = 1.0;                // train on omega < threshold
  std::vector<FeatureVariant> variants;        // empty: all nine
  std::vector<int> layer_grid{2, 7};
  std::vector<int> width_grid{5, 50};
  double train_fraction = 0.8;  // random split for ablation and size runs
  int repetitions = 1;
  std::uint64_t seed = 1;
  MappingConfig mapping;
};

void validate(const ExperimentSpec& spec);
ExperimentSpec parse_experiment_spec(const std::string& json_text);
std::string canonical_experiment(const ExperimentSpec& spec);

/// One mapping model per condition; rows carry test_error, train_error,
/// n_train and n_test. Throws EmptySplit when a condition has no train or test cell.
Report run_experiment(const ExperimentSpec& spec, std::span<const MappingCell> cells);

/// Cells whose targets are per-cell sums of a known per-vehicle function
/// driven by each member's speed relative to a Greenshields curve.
std::vector<MappingCell> synthetic_mapping_cells(std::size_t n_cells, std::uint64_t seed, int max_members = 4);
/// The per-vehicle function used by synthetic_mapping_cells.
double synthetic_member_attribute(const FeatureVector& f);

// --------------------------------------------------------------- analyses

/// Mean over density bins of the within-bin standard deviation of flow
/// (bins of `bin_width` veh/m holding at least `min_count` occupied cells).
double fd_spread(const CellField& field, double bin_width = 0.005, std::size_t min_count = 3);

/// (rho, omega, v) samples from occupied cells with a defined omega.
std::vector<FdSample> fd_samples(const CellField& field, const OmegaField& omega);
std::vector<FdSample> fd_samples(const CellField& field);

/// OmegaField from a field carrying an omega column (NaN marks missing).
OmegaField omega_from_field(const CellField& field, OmegaProvenance provenance);

}  // namespace hetflow

/// @file hetflow.cpp
/// @brief Command-line front end: pipeline stages, sensitivity experiments and
/// report conversion.
///
/// Flags set config fields; a --config JSON file is applied on top of the
/// flags. A relative output directory is resolved against $HETFLOW_OUT when set.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "hetflow/error.hpp"
#include "hetflow/pipeline.hpp"
#include "hetflow/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace hetflow;

namespace {

/// Options that write into a JSON document only when given on the command line.
class JsonFlags {
 public:
  template <class T>
  void add(CLI::App* app, const std::string& flag, std::vector<std::string> key, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flag, *value, help);
    if constexpr (std::is_same_v<T, std::vector<std::string>> || std::is_same_v<T, std::vector<double>> ||
                  std::is_same_v<T, std::vector<int>>)
      opt->delimiter(',');
    setters_.push_back([opt, value, key = std::move(key)](json& j) {
      if (opt->count() == 0) return;
      json* node = &j;
      for (std::size_t k = 0; k + 1 < key.size(); ++k) node = &(*node)[key[k]];
      (*node)[key.back()] = *value;
    });
  }

  json collect() const {
    json j = json::object();
    for (const auto& set : setters_) set(j);
    return j;
  }

 private:
  std::vector<std::function<void(json&)>> setters_;
};

json read_json_file(const std::string& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidArgument, path + ": " + e.what());
  }
}

fs::path resolve_output(const fs::path& dir) {
  if (const char* root = std::getenv("HETFLOW_OUT"); root && *root && dir.is_relative()) return fs::path(root) / dir;
  return dir;
}

void print_rows(const Report& r) {
  for (const auto& row : r.rows)
    std::printf("%-18s %-28s %-20s %.10g\n", row.experiment.c_str(), row.condition.c_str(), row.metric.c_str(),
                row.value);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Heterogeneous traffic flow toolkit: trajectories to learned macroscopic models"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file; its fields override command-line flags")
      ->check(CLI::ExistingFile);

  JsonFlags pf;  // pipeline config fields
  pf.add<std::string>(&app, "--out", {"output_dir"}, "Artifact directory (relative paths resolve against $HETFLOW_OUT)");
  pf.add<std::uint64_t>(&app, "--seed", {"seed"}, "Global seed");
  pf.add<std::string>(&app, "--scenario", {"scenario", "scenario"}, "Reference ring scenario name");
  pf.add<double>(&app, "--duration", {"scenario", "duration"}, "Simulated seconds");
  pf.add<int>(&app, "--count", {"scenario", "count"}, "Vehicles on the ring");
  pf.add<std::string>(&app, "--input", {"ingest", "path"}, "Trajectory CSV for the ingest stage");
  pf.add<std::string>(&app, "--schema", {"ingest", "schema"}, "Column-mapping JSON for the ingest stage");
  pf.add<double>(&app, "--window", {"kinematics", "window"}, "Smoothing half-width [s]");
  pf.add<double>(&app, "--resample-dt", {"kinematics", "resample_dt"}, "Resampling step [s]");
  pf.add<int>(&app, "--population", {"calibration", "population"}, "GA population");
  pf.add<int>(&app, "--iterations", {"calibration", "iterations"}, "GA iterations");
  pf.add<double>(&app, "--segment-duration", {"attributes", "segment_duration"}, "Attribute segment length [s]");
  pf.add<double>(&app, "--dx", {"grid", "dx"}, "Cell length [m]");
  pf.add<double>(&app, "--dt", {"grid", "dt"}, "Cell duration [s]");
  pf.add<double>(&app, "--t0", {"grid", "t0"}, "Grid start time [s]");
  pf.add<double>(&app, "--t1", {"grid", "t1"}, "Grid end time [s]");
  pf.add<std::string>(&app, "--omega-method", {"omega", "method"}, "abundant or scarce");
  pf.add<int>(&app, "--fd-epochs", {"fd", "epochs"}, "FD training epochs");
  pf.add<int>(&app, "--fd-layers", {"fd", "hidden_layers"}, "FD hidden layers");
  pf.add<int>(&app, "--fd-width", {"fd", "hidden_width"}, "FD hidden width");
  pf.add<double>(&app, "--fd-train-fraction", {"fd", "train_fraction"}, "FD training fraction");
  pf.add<double>(&app, "--penalty", {"fd", "penalty"}, "FD penalty coefficient");
  pf.add<double>(&app, "--fd-lr", {"fd", "learning_rate"}, "FD learning rate");
  pf.add<std::string>(&app, "--variant", {"mapping", "variant"}, "Mapping feature variant");
  pf.add<int>(&app, "--map-epochs", {"mapping", "epochs"}, "Mapping training epochs");
  pf.add<int>(&app, "--map-layers", {"mapping", "hidden_layers"}, "Mapping hidden layers");
  pf.add<int>(&app, "--map-width", {"mapping", "hidden_width"}, "Mapping hidden width");
  pf.add<double>(&app, "--map-lr", {"mapping", "learning_rate"}, "Mapping learning rate");
  pf.add<double>(&app, "--map-train-fraction", {"mapping", "train_fraction"}, "Mapping training fraction");
  pf.add<std::vector<std::string>>(&app, "--closures", {"pde", "closures"}, "PDE closures (GSOM, ARZ, LWR)");
  pf.add<int>(&app, "--refine", {"pde", "refine"}, "PDE mesh refinement factor");
  pf.add<double>(&app, "--cfl", {"pde", "cfl"}, "PDE CFL number");

  std::vector<std::pair<std::string, CLI::App*>> stage_cmds;
  for (const auto& stage : pipeline_stages())
    stage_cmds.emplace_back(stage, app.add_subcommand(stage, "Run the " + stage + " stage"));

  CLI::App* run_cmd = app.add_subcommand("run", "Run several stages (all when none are listed) in dependency order");
  pf.add<std::vector<std::string>>(run_cmd, "--stages", {"stages"}, "Stages to run");

  CLI::App* exp_cmd = app.add_subcommand("experiment", "Run a sensitivity experiment on mapping cells");
  std::string spec_path;
  std::size_t synthetic = 0;
  exp_cmd->add_option("--spec", spec_path, "Experiment JSON; its fields override flags")->check(CLI::ExistingFile);
  exp_cmd->add_option("--synthetic", synthetic, "Use N synthetic cells instead of pipeline artifacts");
  JsonFlags ef;  // experiment spec fields
  ef.add<std::string>(exp_cmd, "--kind", {"kind"}, "TRAIN_RATIO, DENSITY_SPLIT, OMEGA_SPLIT, FEATURE_ABLATION or NN_SIZE");
  ef.add<std::vector<double>>(exp_cmd, "--ratios", {"ratios"}, "Training fractions");
  ef.add<std::vector<double>>(exp_cmd, "--density-band", {"density_band"}, "Training density band lo,hi [veh/m]");
  ef.add<double>(exp_cmd, "--omega-threshold", {"omega_threshold"}, "Train on cells with omega below this");
  ef.add<std::vector<std::string>>(exp_cmd, "--variants", {"variants"}, "Feature variants");
  ef.add<std::vector<int>>(exp_cmd, "--layer-grid", {"layer_grid"}, "Hidden-layer counts");
  ef.add<std::vector<int>>(exp_cmd, "--width-grid", {"width_grid"}, "Hidden widths");
  ef.add<double>(exp_cmd, "--train-fraction", {"train_fraction"}, "Random split fraction");
  ef.add<int>(exp_cmd, "--repetitions", {"repetitions"}, "Repetitions per condition");
  ef.add<int>(exp_cmd, "--epochs", {"mapping", "epochs"}, "Mapping epochs per condition");
  ef.add<double>(exp_cmd, "--lr", {"mapping", "learning_rate"}, "Mapping learning rate");

  CLI::App* report_cmd = app.add_subcommand("report", "Print a report table as CSV or JSON");
  std::string report_in, report_format = "csv", report_out;
  report_cmd->add_option("--from", report_in, "Report CSV (default: <out>/report.csv)");
  report_cmd->add_option("--format", report_format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  report_cmd->add_option("--to", report_out, "Write to this file instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    json cfg_json = pf.collect();
    if (cfg_json.contains("scenario")) {
      // Scenario flags refine the default scenario rather than replace it.
      json scenario = json::parse(PipelineConfig{}.scenario_json);
      scenario.merge_patch(cfg_json["scenario"]);
      cfg_json["scenario"] = scenario;
    }
    if (!config_path.empty()) cfg_json.merge_patch(read_json_file(config_path));
    PipelineConfig cfg = parse_pipeline_config(cfg_json.dump());
    cfg.output_dir = resolve_output(cfg.output_dir);

    for (const auto& [stage, cmd] : stage_cmds) {
      if (!cmd->parsed()) continue;
      Report r;
      r.seed = cfg.seed;
      r.config_hash = hash_text(cfg.canonical);
      r.rows = run_stage(stage, cfg);
      emit_report(r, cfg.output_dir, "report_" + stage);
      print_rows(r);
      return 0;
    }

    if (run_cmd->parsed()) {
      const auto r = run_pipeline(cfg);
      print_rows(r);
      for (const auto& [stage, seconds] : r.timings) std::printf("# %s: %.3f s\n", stage.c_str(), seconds);
      return 0;
    }

    if (exp_cmd->parsed()) {
      json spec_json = ef.collect();
      spec_json["seed"] = cfg.seed;
      if (!spec_path.empty()) spec_json.merge_patch(read_json_file(spec_path));
      const auto spec = parse_experiment_spec(spec_json.dump());
      const auto cells = synthetic > 0 ? synthetic_mapping_cells(synthetic, substream_seed(spec.seed, "synthetic"))
                                       : pipeline_mapping_cells(cfg);
      const auto r = run_experiment(spec, cells);
      emit_report(r, cfg.output_dir / "experiments", to_string(spec.kind));
      print_rows(r);
      return 0;
    }

    if (report_cmd->parsed()) {
      const fs::path in = report_in.empty() ? cfg.output_dir / "report.csv" : fs::path(report_in);
      const auto r = parse_report_csv(read_text_file(in));
      const std::string text = report_format == "json" ? report_json(r) : report_csv(r);
      if (report_out.empty())
        std::cout << text;
      else
        write_text_file(report_out, text);
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "hetflow: %s\n", e.what());
    return 1;
  }
  return 0;
}

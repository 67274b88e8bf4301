#include "hetflow/micro2macro.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "hetflow/csv.hpp"
#include "hetflow/error.hpp"
#include "hetflow/rng.hpp"
#include "hetflow/stats.hpp"

namespace hetflow {

VehicleFeatures extract_features(const CellVehicleStats& s, const CellField& field) {
  if (s.i >= field.nt || s.j >= field.nx || !field.mask[field.index(s.i, s.j)])
    throw Error(Errc::InvalidArgument, "features need an occupied cell");
  if (s.speed_series.size() < 2 || s.accel_series.size() < 2 || s.jerk_series.size() < 2)
    throw Error(Errc::TooFewSamples, "vehicle " + s.vehicle_id + " has fewer than 2 samples in cell (" +
                                         std::to_string(s.i) + ", " + std::to_string(s.j) + ")");
  VehicleFeatures out;
  out.i = s.i;
  out.j = s.j;
  out.vehicle_id = s.vehicle_id;
  out.f = {field.rho[field.index(s.i, s.j)],
           stats::mean(s.speed_series),
           stats::pstddev(s.speed_series),
           stats::mean(s.accel_series),
           stats::pstddev(s.accel_series),
           stats::mean(s.jerk_series),
           stats::abs_mean(s.jerk_series),
           stats::pstddev(s.jerk_series)};
  return out;
}

FeatureSet extract_all_features(const CellStatsResult& stats, const CellField& field) {
  FeatureSet set;
  for (const auto& s : stats.stats) {
    try {
      set.features.push_back(extract_features(s, field));
    } catch (const Error& e) {
      if (e.code() != Errc::TooFewSamples) throw;
      set.skipped.push_back(s.vehicle_id + "@" + std::to_string(s.i) + "," + std::to_string(s.j));
    }
  }
  return set;
}

std::string features_csv(const FeatureSet& set) {
  std::ostringstream os;
  os << "i,j,vehicle_id,rho,v_mean,v_std,a_mean,a_std,j_mean,j_absmean,j_std\n";
  for (const auto& v : set.features) {
    os << v.i << ',' << v.j << ',' << v.vehicle_id;
    for (double x : v.f) os << ',' << csv::format_double(x);
    os << '\n';
  }
  return os.str();
}

namespace {

struct VariantInfo {
  FeatureVariant v;
  const char* name;
  std::vector<int> idx;
};

const std::vector<VariantInfo>& variant_table() {
  static const std::vector<VariantInfo> t{
      {FeatureVariant::All, "ALL", {0, 1, 2, 3, 4, 5, 6, 7}},
      {FeatureVariant::Macro, "MACRO", {0}},
      {FeatureVariant::Micro, "MICRO", {1, 2, 3, 4, 5, 6, 7}},
      {FeatureVariant::MicroV, "MICRO_V", {1, 2}},
      {FeatureVariant::MicroA, "MICRO_A", {3, 4}},
      {FeatureVariant::MicroJ, "MICRO_J", {5, 6, 7}},
      {FeatureVariant::MacroV, "MACRO_V", {0, 1, 2}},
      {FeatureVariant::MacroA, "MACRO_A", {0, 3, 4}},
      {FeatureVariant::MacroJ, "MACRO_J", {0, 5, 6, 7}},
  };
  return t;
}

const VariantInfo& info(FeatureVariant v) {
  for (const auto& e : variant_table())
    if (e.v == v) return e;
  throw Error(Errc::InvalidArgument, "unknown feature variant");
}

// Members of all cells as columns of the variant inputs, plus each column's cell.
// Each cell's members are stacked in lexicographic order, so any permutation
// of a cell's members yields the same matrix and bit-identical sums.
Eigen::MatrixXd stack_members(std::span<const MappingCell> cells, FeatureVariant v, std::vector<Eigen::Index>* owner) {
  const auto& idx = info(v).idx;
  Eigen::Index n = 0;
  for (const auto& c : cells) n += static_cast<Eigen::Index>(c.members.size());
  Eigen::MatrixXd x(static_cast<Eigen::Index>(idx.size()), n);
  if (owner) owner->assign(static_cast<std::size_t>(n), 0);
  Eigen::Index col = 0;
  std::vector<const FeatureVector*> sorted;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    sorted.clear();
    for (const auto& f : cells[c].members) sorted.push_back(&f);
    std::sort(sorted.begin(), sorted.end(), [](const FeatureVector* a, const FeatureVector* b) { return *a < *b; });
    for (const FeatureVector* fp : sorted) {
      const auto& f = *fp;
      for (std::size_t d = 0; d < idx.size(); ++d) x(static_cast<Eigen::Index>(d), col) = f[static_cast<std::size_t>(idx[d])];
      if (owner) (*owner)[static_cast<std::size_t>(col)] = static_cast<Eigen::Index>(c);
      ++col;
    }
  }
  return x;
}

}  // namespace

std::string to_string(FeatureVariant v) { return info(v).name; }

FeatureVariant parse_feature_variant(const std::string& s) {
  for (const auto& e : variant_table())
    if (s == e.name) return e.v;
  throw Error(Errc::InvalidArgument, "unknown feature variant '" + s + "'");
}

std::vector<FeatureVariant> all_feature_variants() {
  std::vector<FeatureVariant> out;
  for (const auto& e : variant_table()) out.push_back(e.v);
  return out;
}

std::vector<int> variant_indices(FeatureVariant v) { return info(v).idx; }

Eigen::VectorXd select_variant(const FeatureVector& f, FeatureVariant v) {
  const auto& idx = info(v).idx;
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t d = 0; d < idx.size(); ++d) out[static_cast<Eigen::Index>(d)] = f[static_cast<std::size_t>(idx[d])];
  return out;
}

std::vector<MappingCell> build_mapping_cells(const FeatureSet& set, const OmegaField& targets) {
  std::map<std::pair<std::size_t, std::size_t>, MappingCell> by_cell;
  for (const auto& v : set.features) {
    if (v.i >= targets.nt || v.j >= targets.nx) throw Error(Errc::DimensionMismatch, "feature cell outside the target grid");
    const std::size_t k = v.i * targets.nx + v.j;
    if (!targets.mask[k]) continue;
    auto& cell = by_cell[{v.i, v.j}];
    cell.i = v.i;
    cell.j = v.j;
    cell.rho = v.f[0];
    cell.omega = targets.omega[k];
    cell.members.push_back(v.f);
  }
  if (by_cell.empty()) throw Error(Errc::EmptyCells, "no cell has both features and a target");
  std::vector<MappingCell> out;
  out.reserve(by_cell.size());
  for (auto& [key, cell] : by_cell) out.push_back(std::move(cell));
  return out;
}

void validate(const MappingConfig& c) {
  if (c.hidden_layers < 0 || c.hidden_width < 1 || c.epochs < 0 || !(c.learning_rate >= 0.0))
    throw Error(Errc::InvalidArgument, "mapping config needs layers >= 0, width >= 1, epochs >= 0, lr >= 0");
}

MappingTrainResult train_mapping(std::span<const MappingCell> cells, const MappingConfig& cfg) {
  validate(cfg);
  if (cells.empty()) throw Error(Errc::EmptyCells, "no training cells");
  double omega_bar = 0.0, per_member = 0.0;
  for (const auto& c : cells) {
    if (c.members.empty()) throw Error(Errc::EmptyCells, "training cell without members");
    if (!std::isfinite(c.omega)) throw Error(Errc::InvalidArgument, "training targets must be finite");
    omega_bar += std::abs(c.omega);
    per_member += c.omega / static_cast<double>(c.members.size());
  }
  omega_bar /= static_cast<double>(cells.size());
  per_member /= static_cast<double>(cells.size());
  if (!(omega_bar > 0.0)) throw Error(Errc::InvalidArgument, "targets are all zero");

  std::vector<Eigen::Index> owner;
  Eigen::MatrixXd x = stack_members(cells, cfg.variant, &owner);

  MlpSpec spec;
  spec.input_dim = static_cast<int>(x.rows());
  spec.hidden_layers = cfg.hidden_layers;
  spec.hidden_width = cfg.hidden_width;
  spec.seed = substream_seed(cfg.seed, "mapping_net");
  MappingTrainResult res;
  res.model.variant = cfg.variant;
  MlpModel net = mlp_init(spec);
  Eigen::VectorXd lo = x.rowwise().minCoeff(), hi = x.rowwise().maxCoeff();
  for (Eigen::Index d = 0; d < lo.size(); ++d)
    if (!(hi[d] > lo[d])) {
      const double w = 0.5 * std::max(1.0, std::abs(lo[d]));
      lo[d] -= w;
      hi[d] += w;
    }
  set_input_normalization(net, lo, hi);
  set_output_affine(net, Eigen::VectorXd::Constant(1, per_member != 0.0 ? per_member : omega_bar),
                    Eigen::VectorXd::Zero(1));

  Eigen::VectorXd target(static_cast<Eigen::Index>(cells.size()));
  for (std::size_t c = 0; c < cells.size(); ++c) target[static_cast<Eigen::Index>(c)] = cells[c].omega;
  LossTerm term;
  term.inputs = std::move(x);
  term.evaluate = [owner = std::move(owner), target, omega_bar](const Jets& out, Jets& seed) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(target.size());
    for (std::size_t k = 0; k < owner.size(); ++k) sum[owner[k]] += out.value(0, static_cast<Eigen::Index>(k));
    const Eigen::VectorXd r = (sum - target) / omega_bar;
    const double n = static_cast<double>(target.size());
    for (std::size_t k = 0; k < owner.size(); ++k)
      seed.value(0, static_cast<Eigen::Index>(k)) = 2.0 * r[owner[k]] / (n * omega_bar);
    return r.squaredNorm() / n;
  };

  AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  adam.epochs = cfg.epochs;
  auto trained = train(net, {term}, adam);
  res.model.net = std::move(trained.model);
  res.loss_history = std::move(trained.loss_history);
  res.train_error = mapping_error(res.model, cells);
  return res;
}

double predict_omega(const MappingModel& m, std::span<const FeatureVector> members) {
  if (m.net.spec.input_dim != static_cast<int>(info(m.variant).idx.size()))
    throw Error(Errc::DimensionMismatch, "network input does not match the feature variant");
  MappingCell cell;
  cell.members.assign(members.begin(), members.end());
  return predict_omega(m, std::span<const MappingCell>(&cell, 1))[0];
}

std::vector<double> predict_omega(const MappingModel& m, std::span<const MappingCell> cells) {
  if (m.net.spec.input_dim != static_cast<int>(info(m.variant).idx.size()))
    throw Error(Errc::DimensionMismatch, "network input does not match the feature variant");
  std::vector<Eigen::Index> owner;
  const Eigen::MatrixXd x = stack_members(cells, m.variant, &owner);
  std::vector<double> out(cells.size(), 0.0);
  if (x.cols() == 0) return out;
  const Eigen::MatrixXd y = mlp_forward_batch(m.net, x);
  for (std::size_t k = 0; k < owner.size(); ++k)
    out[static_cast<std::size_t>(owner[k])] += y(0, static_cast<Eigen::Index>(k));
  return out;
}

double mapping_error(const MappingModel& m, std::span<const MappingCell> cells) {
  const auto pred = predict_omega(m, cells);
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    if (cells[c].omega == 0.0) continue;
    const double r = (pred[c] - cells[c].omega) / cells[c].omega;
    s += r * r;
    ++n;
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : std::sqrt(s / static_cast<double>(n)) * 100.0;
}

OmegaField predict_omega_field(const MappingModel& m, std::span<const MappingCell> cells, const GridSpec& grid) {
  OmegaField f;
  f.grid = grid;
  f.nt = grid.nt();
  f.nx = grid.nx();
  f.omega.assign(f.nt * f.nx, std::numeric_limits<double>::quiet_NaN());
  f.mask.assign(f.nt * f.nx, 0);
  f.flags.assign(f.nt * f.nx, 0);
  f.provenance = OmegaProvenance::NnMapping;
  const auto pred = predict_omega(m, cells);
  for (std::size_t c = 0; c < cells.size(); ++c) {
    if (cells[c].i >= f.nt || cells[c].j >= f.nx) throw Error(Errc::DimensionMismatch, "cell outside the grid");
    const std::size_t k = cells[c].i * f.nx + cells[c].j;
    f.omega[k] = pred[c];
    f.mask[k] = 1;
  }
  return f;
}

std::string mapping_to_json(const MappingModel& m) {
  nlohmann::json j;
  j["format"] = "hetflow-mapping";
  j["version"] = 1;
  j["variant"] = to_string(m.variant);
  j["net"] = nlohmann::json::parse(mlp_to_json(m.net));
  return j.dump();
}

MappingModel mapping_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "hetflow-mapping" || j.at("version") != 1)
      throw Error(Errc::InvalidArgument, "unsupported mapping file format");
    MappingModel m;
    m.variant = parse_feature_variant(j.at("variant").get<std::string>());
    m.net = mlp_from_json(j.at("net").dump());
    if (m.net.spec.input_dim != static_cast<int>(info(m.variant).idx.size()))
      throw Error(Errc::DimensionMismatch, "network input does not match the feature variant");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("mapping file: ") + e.what());
  }
}

}  // namespace hetflow

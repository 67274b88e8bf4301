#include "hetflow/nn_engine.hpp"

#include <cmath>
#include <mutex>
#include <nlohmann/json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "hetflow/error.hpp"
#include "hetflow/rng.hpp"

namespace hetflow {

void validate(const MlpSpec& s) {
  if (s.input_dim < 1 || s.output_dim < 1 || s.hidden_layers < 0 || (s.hidden_layers > 0 && s.hidden_width < 1))
    throw Error(Errc::InvalidArgument, "network dims must be >= 1 and hidden_layers >= 0");
}

std::size_t MlpModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  return n;
}

MlpModel mlp_init(const MlpSpec& spec) {
  validate(spec);
  MlpModel m;
  m.spec = spec;
  Rng rng = make_rng(spec.seed, "mlp_init");
  int fan_in = spec.input_dim;
  for (int l = 0; l <= spec.hidden_layers; ++l) {
    const int out = l == spec.hidden_layers ? spec.output_dim : spec.hidden_width;
    DenseLayer layer;
    layer.weights.resize(out, fan_in);
    const double bound = spec.init_scale / std::sqrt(static_cast<double>(fan_in));
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < fan_in; ++c) layer.weights(r, c) = uniform(rng, -bound, bound);
    layer.bias = Eigen::VectorXd::Zero(out);
    m.layers.push_back(std::move(layer));
    fan_in = out;
  }
  m.in_min = Eigen::VectorXd::Zero(spec.input_dim);
  m.in_max = Eigen::VectorXd::Ones(spec.input_dim);
  m.out_scale = Eigen::VectorXd::Ones(spec.output_dim);
  m.out_shift = Eigen::VectorXd::Zero(spec.output_dim);
  return m;
}

void set_input_normalization(MlpModel& m, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  if (lo.size() != m.spec.input_dim || hi.size() != m.spec.input_dim)
    throw Error(Errc::DimensionMismatch, "normalization bounds do not match the input dimension");
  for (int d = 0; d < lo.size(); ++d)
    if (!(lo[d] < hi[d])) throw Error(Errc::InvalidArgument, "normalization needs min < max in every dimension");
  m.in_min = lo;
  m.in_max = hi;
}

void set_output_affine(MlpModel& m, const Eigen::VectorXd& scale, const Eigen::VectorXd& shift) {
  if (scale.size() != m.spec.output_dim || shift.size() != m.spec.output_dim)
    throw Error(Errc::DimensionMismatch, "output affine does not match the output dimension");
  m.out_scale = scale;
  m.out_shift = shift;
}

namespace {

void check_inputs(const MlpModel& m, const Eigen::MatrixXd& x) {
  if (x.rows() != m.spec.input_dim)
    throw Error(Errc::DimensionMismatch, "expected input dimension " + std::to_string(m.spec.input_dim) + ", got " +
                                             std::to_string(x.rows()));
}

Eigen::MatrixXd normalize(const MlpModel& m, const Eigen::MatrixXd& x) {
  const Eigen::ArrayXd range = (m.in_max - m.in_min).array();
  return ((x.colwise() - m.in_min).array().colwise() / range).matrix();
}

// Activations of every layer (index 0 is the normalized input) and, when
// requested, their first and second directional derivatives.
struct Tape {
  std::vector<Eigen::MatrixXd> a, da, dda;
  bool jets = false;
};

Tape run_forward(const MlpModel& m, const Eigen::MatrixXd& x, std::optional<int> dim) {
  check_inputs(m, x);
  Tape tp;
  tp.jets = dim.has_value();
  const Eigen::Index n = x.cols();
  tp.a.push_back(normalize(m, x));
  if (tp.jets) {
    if (*dim < 0 || *dim >= m.spec.input_dim) throw Error(Errc::DimensionMismatch, "derivative axis out of range");
    Eigen::MatrixXd seed = Eigen::MatrixXd::Zero(m.spec.input_dim, n);
    seed.row(*dim).setConstant(1.0 / (m.in_max[*dim] - m.in_min[*dim]));
    tp.da.push_back(std::move(seed));
    tp.dda.push_back(Eigen::MatrixXd::Zero(m.spec.input_dim, n));
  }
  const std::size_t n_layers = m.layers.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& L = m.layers[l];
    Eigen::MatrixXd z = L.weights * tp.a.back();
    z.colwise() += L.bias;
    const bool last = l + 1 == n_layers;
    if (last) {
      tp.a.push_back(std::move(z));
      if (tp.jets) {
        tp.da.push_back(L.weights * tp.da.back());
        tp.dda.push_back(L.weights * tp.dda.back());
      }
      break;
    }
    Eigen::ArrayXXd t = z.array().tanh();
    if (tp.jets) {
      const Eigen::ArrayXXd dz = (L.weights * tp.da.back()).array();
      const Eigen::ArrayXXd ddz = (L.weights * tp.dda.back()).array();
      const Eigen::ArrayXXd s1 = 1.0 - t.square();
      const Eigen::ArrayXXd s2 = -2.0 * t * s1;
      tp.da.push_back((s1 * dz).matrix());
      tp.dda.push_back((s2 * dz.square() + s1 * ddz).matrix());
    }
    tp.a.push_back(t.matrix());
  }
  return tp;
}

Jets output_of(const MlpModel& m, const Tape& tp) {
  Jets j;
  j.value = (tp.a.back().array().colwise() * m.out_scale.array()).matrix();
  j.value.colwise() += m.out_shift;
  if (tp.jets) {
    j.d1 = (tp.da.back().array().colwise() * m.out_scale.array()).matrix();
    j.d2 = (tp.dda.back().array().colwise() * m.out_scale.array()).matrix();
  }
  return j;
}

// Accumulates parameter gradients given seeds on the network output.
void run_backward(const MlpModel& m, const Tape& tp, const Jets& seed, std::vector<DenseLayer>& grad) {
  Eigen::MatrixXd g = (seed.value.array().colwise() * m.out_scale.array()).matrix();
  Eigen::MatrixXd gd, gdd;
  if (tp.jets) {
    gd = (seed.d1.array().colwise() * m.out_scale.array()).matrix();
    gdd = (seed.d2.array().colwise() * m.out_scale.array()).matrix();
  }
  for (std::size_t l = m.layers.size(); l-- > 0;) {
    const auto& L = m.layers[l];
    const bool last = l + 1 == m.layers.size();
    Eigen::MatrixXd gz, gdz, gddz;
    if (last) {
      gz = std::move(g);
      if (tp.jets) {
        gdz = std::move(gd);
        gddz = std::move(gdd);
      }
    } else {
      const Eigen::ArrayXXd t = tp.a[l + 1].array();
      const Eigen::ArrayXXd s1 = 1.0 - t.square();
      const Eigen::ArrayXXd s2 = -2.0 * t * s1;
      if (tp.jets) {
        const Eigen::ArrayXXd dz = (L.weights * tp.da[l]).array();
        const Eigen::ArrayXXd ddz = (L.weights * tp.dda[l]).array();
        const Eigen::ArrayXXd s3 = -2.0 * s1.square() + 4.0 * t.square() * s1;
        const Eigen::ArrayXXd ga = g.array(), gda = gd.array(), gdda = gdd.array();
        gz = (ga * s1 + gda * s2 * dz + gdda * (s3 * dz.square() + s2 * ddz)).matrix();
        gdz = (gda * s1 + 2.0 * gdda * s2 * dz).matrix();
        gddz = (gdda * s1).matrix();
      } else {
        gz = (g.array() * s1).matrix();
      }
    }
    grad[l].weights.noalias() += gz * tp.a[l].transpose();
    grad[l].bias += gz.rowwise().sum();
    if (tp.jets) {
      grad[l].weights.noalias() += gdz * tp.da[l].transpose();
      grad[l].weights.noalias() += gddz * tp.dda[l].transpose();
    }
    if (l == 0) break;
    g.noalias() = L.weights.transpose() * gz;
    if (tp.jets) {
      gd.noalias() = L.weights.transpose() * gdz;
      gdd.noalias() = L.weights.transpose() * gddz;
    }
  }
}

}  // namespace

Eigen::VectorXd mlp_forward(const MlpModel& m, const Eigen::VectorXd& x) {
  return mlp_forward_batch(m, Eigen::MatrixXd(x)).col(0);
}

Eigen::MatrixXd mlp_forward_batch(const MlpModel& m, const Eigen::MatrixXd& x) {
  return output_of(m, run_forward(m, x, std::nullopt)).value;
}

Jets mlp_input_derivatives_batch(const MlpModel& m, const Eigen::MatrixXd& x, int dim) {
  return output_of(m, run_forward(m, x, dim));
}

InputDerivatives mlp_input_derivatives(const MlpModel& m, const Eigen::VectorXd& x, int dim) {
  const Jets j = mlp_input_derivatives_batch(m, Eigen::MatrixXd(x), dim);
  return {j.value.col(0), j.d1.col(0), j.d2.col(0)};
}

Eigen::VectorXd mlp_parameters(const MlpModel& m) {
  Eigen::VectorXd theta(static_cast<Eigen::Index>(m.parameter_count()));
  Eigen::Index k = 0;
  for (const auto& l : m.layers) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) theta[k++] = l.weights(r, c);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) theta[k++] = l.bias[r];
  }
  return theta;
}

void set_mlp_parameters(MlpModel& m, const Eigen::VectorXd& theta) {
  if (static_cast<std::size_t>(theta.size()) != m.parameter_count())
    throw Error(Errc::DimensionMismatch, "parameter vector has the wrong length");
  Eigen::Index k = 0;
  for (auto& l : m.layers) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = theta[k++];
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = theta[k++];
  }
}

LossGradient loss_and_gradient(const MlpModel& m, const std::vector<LossTerm>& terms) {
  std::vector<DenseLayer> grad;
  for (const auto& l : m.layers)
    grad.push_back({Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()), Eigen::VectorXd::Zero(l.bias.size())});
  LossGradient out;
  for (const auto& term : terms) {
    if (term.inputs.cols() == 0) continue;
    const Tape tp = run_forward(m, term.inputs, term.derivative_dim);
    const Jets jets = output_of(m, tp);
    Jets seed;
    seed.value = Eigen::MatrixXd::Zero(jets.value.rows(), jets.value.cols());
    if (tp.jets) {
      seed.d1 = Eigen::MatrixXd::Zero(jets.value.rows(), jets.value.cols());
      seed.d2 = Eigen::MatrixXd::Zero(jets.value.rows(), jets.value.cols());
    }
    out.loss += term.evaluate(jets, seed);
    run_backward(m, tp, seed, grad);
  }
  MlpModel shaped = m;
  shaped.layers = std::move(grad);
  out.gradient = mlp_parameters(shaped);
  return out;
}

void validate(const AdamConfig& c) {
  auto unit = [](double r) { return r > 0.0 && r < 1.0; };
  if (!(c.learning_rate >= 0.0) || !unit(c.beta1) || !unit(c.beta2) || !(c.epsilon > 0.0) || c.epochs < 0)
    throw Error(Errc::InvalidArgument, "ADAM needs lr >= 0, betas in (0,1), epsilon > 0, epochs >= 0");
}

TrainResult train(const MlpModel& init, const std::vector<LossTerm>& terms, const AdamConfig& cfg) {
  validate(cfg);
#if defined(__GLIBC__)
  // Batch temporaries are large and short-lived; keep them on the heap
  // instead of a fresh mmap per epoch.
  static std::once_flag tuned;
  std::call_once(tuned, [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
  });
#endif
  TrainResult res{init, {}};
  res.loss_history.reserve(static_cast<std::size_t>(cfg.epochs));
  Eigen::VectorXd theta = mlp_parameters(init);
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(theta.size()), m2 = Eigen::VectorXd::Zero(theta.size());
  double b1t = 1.0, b2t = 1.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const LossGradient lg = loss_and_gradient(res.model, terms);
    if (!std::isfinite(lg.loss) || !lg.gradient.allFinite())
      throw Error(Errc::NonFiniteLoss, "loss became non-finite at epoch " + std::to_string(epoch) +
                                           " (last finite loss " +
                                           (res.loss_history.empty() ? std::string("n/a")
                                                                     : std::to_string(res.loss_history.back())) +
                                           ")");
    res.loss_history.push_back(lg.loss);
    m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * lg.gradient;
    m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * lg.gradient.cwiseProduct(lg.gradient);
    b1t *= cfg.beta1;
    b2t *= cfg.beta2;
    const Eigen::ArrayXd mhat = m1.array() / (1.0 - b1t);
    const Eigen::ArrayXd vhat = m2.array() / (1.0 - b2t);
    theta.array() -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
    set_mlp_parameters(res.model, theta);
  }
  return res;
}

LossTerm mse_term(Eigen::MatrixXd inputs, Eigen::MatrixXd targets) {
  if (inputs.cols() != targets.cols())
    throw Error(Errc::DimensionMismatch, "inputs and targets have different sample counts");
  LossTerm t;
  t.inputs = std::move(inputs);
  t.evaluate = [targets = std::move(targets)](const Jets& out, Jets& seed) {
    const double n = static_cast<double>(targets.cols());
    const Eigen::MatrixXd r = out.value - targets;
    seed.value = (2.0 / n) * r;
    return r.squaredNorm() / n;
  };
  return t;
}

namespace {

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

std::string mlp_to_json(const MlpModel& m) {
  nlohmann::json j;
  j["format"] = "hetflow-mlp";
  j["version"] = 1;
  j["spec"] = {{"input_dim", m.spec.input_dim},         {"output_dim", m.spec.output_dim},
               {"hidden_layers", m.spec.hidden_layers}, {"hidden_width", m.spec.hidden_width},
               {"activation", "tanh"},                  {"seed", m.spec.seed},
               {"init_scale", m.spec.init_scale}};
  j["in_min"] = to_vec(m.in_min);
  j["in_max"] = to_vec(m.in_max);
  j["out_scale"] = to_vec(m.out_scale);
  j["out_shift"] = to_vec(m.out_shift);
  j["layers"] = nlohmann::json::array();
  for (const auto& l : m.layers) {
    std::vector<double> w;
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) w.push_back(l.weights(r, c));
    j["layers"].push_back({{"rows", l.weights.rows()}, {"cols", l.weights.cols()}, {"weights", w},
                           {"bias", to_vec(l.bias)}});
  }
  return j.dump();
}

MlpModel mlp_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "hetflow-mlp" || j.at("version") != 1)
      throw Error(Errc::InvalidArgument, "unsupported network file format");
    const auto& s = j.at("spec");
    MlpSpec spec;
    spec.input_dim = s.at("input_dim");
    spec.output_dim = s.at("output_dim");
    spec.hidden_layers = s.at("hidden_layers");
    spec.hidden_width = s.at("hidden_width");
    spec.seed = s.at("seed");
    spec.init_scale = s.value("init_scale", 1.0);
    MlpModel m = mlp_init(spec);
    const auto& layers = j.at("layers");
    if (layers.size() != m.layers.size()) throw Error(Errc::DimensionMismatch, "layer count mismatch");
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      auto& L = m.layers[l];
      const auto w = layers[l].at("weights").get<std::vector<double>>();
      const auto b = layers[l].at("bias").get<std::vector<double>>();
      if (layers[l].at("rows") != L.weights.rows() || layers[l].at("cols") != L.weights.cols() ||
          w.size() != static_cast<std::size_t>(L.weights.size()) || b.size() != static_cast<std::size_t>(L.bias.size()))
        throw Error(Errc::DimensionMismatch, "layer " + std::to_string(l) + " has the wrong shape");
      for (Eigen::Index r = 0, k = 0; r < L.weights.rows(); ++r)
        for (Eigen::Index c = 0; c < L.weights.cols(); ++c) L.weights(r, c) = w[static_cast<std::size_t>(k++)];
      L.bias = from_vec(b);
    }
    set_input_normalization(m, from_vec(j.at("in_min").get<std::vector<double>>()),
                            from_vec(j.at("in_max").get<std::vector<double>>()));
    set_output_affine(m, from_vec(j.at("out_scale").get<std::vector<double>>()),
                      from_vec(j.at("out_shift").get<std::vector<double>>()));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("network file: ") + e.what());
  }
}

}  // namespace hetflow

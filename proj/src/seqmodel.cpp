#include "offroad/seqmodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "json.hpp"
#include "offroad/vehicle.hpp"

namespace offroad {

namespace {

using json = nlohmann::json;

constexpr const char* kEventNames[kNumEvents] = {
    "tree", "other-obstacles", "human", "waterhole", "mud",
    "jump", "traversable-grass", "smooth-road", "wet-leaves"};

std::size_t index_of(const ModelWeights& w, const std::string& name) {
  for (std::size_t i = 0; i < w.tensors.size(); ++i) {
    if (w.tensors[i].name == name) return i;
  }
  throw DomainError("model has no tensor named " + name);
}

// Sinusoidal position code for token positions 0..len-1.
Matrix position_code(int len, int width) {
  Matrix pe(len, width);
  for (int p = 0; p < len; ++p) {
    for (int i = 0; i < width; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / width);
      pe(p, i) = std::sin(p * freq);
      if (i + 1 < width) pe(p, i + 1) = std::cos(p * freq);
    }
  }
  return pe;
}

// Fixed rescaling of (delta, throttle, dt) to roughly [-1, 1].
Matrix normalize_actions(const Matrix& a) {
  Matrix out(a.rows(), 3);
  out.col(0) = a.col(0) / kDeltaMax;
  out.col(1) = a.col(1) * 2.0 - Eigen::VectorXd::Ones(a.rows());
  out.col(2) = (a.col(2).array() - 0.4) / 0.2;
  return out;
}

void check_finite(const Tape& t, Var v, const std::string& layer) {
  if (!t.value(v).allFinite()) throw InferenceError(layer, "non-finite activation");
}

void write_le_doubles(std::ofstream& out, const Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(m(r, c));
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
}

Matrix read_le_doubles(std::ifstream& in, int rows, int cols) {
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      std::uint64_t bits = 0;
      in.read(reinterpret_cast<char*>(&bits), sizeof bits);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      m(r, c) = std::bit_cast<double>(bits);
    }
  }
  if (!in) throw DomainError("truncated tensor file");
  return m;
}

json config_to_json(const ModelConfig& c) {
  return {{"architecture", architecture_name(c.architecture)},
          {"obs_dim", c.obs_dim},
          {"width", c.width},
          {"layers", c.layers},
          {"heads", c.heads},
          {"ffn_mult", c.ffn_mult},
          {"var_min", c.var_min}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  c.obs_dim = j.at("obs_dim").get<int>();
  c.width = j.at("width").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.var_min = j.at("var_min").get<double>();
  return c;
}

}  // namespace

const char* event_name(int event) {
  if (event < 0 || event >= kNumEvents) throw DomainError("event index out of range");
  return kEventNames[event];
}

const char* architecture_name(Architecture a) {
  return a == Architecture::kTransformer ? "transformer" : "lstm";
}

Architecture parse_architecture(const std::string& s) {
  if (s == "transformer") return Architecture::kTransformer;
  if (s == "lstm") return Architecture::kLstm;
  throw DomainError("unknown architecture '" + s + "' (expected transformer|lstm)");
}

const Matrix& ModelWeights::at(const std::string& name) const {
  return tensors[index_of(*this, name)].value;
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.value.size());
  return n;
}

bool ModelWeights::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(),
                     [](const NamedTensor& t) { return t.value.allFinite(); });
}

// Each output head reads its own encoder and sequence trunk.
constexpr const char* kTowers[] = {"event.", "bearing."};

std::vector<std::pair<std::string, std::pair<int, int>>> weight_manifest(const ModelConfig& c) {
  if (c.obs_dim < 1 || c.width < 2 || c.layers < 1 || c.heads < 1 || c.width % c.heads != 0 ||
      c.ffn_mult < 1 || !(c.var_min > 0.0)) {
    throw DomainError("invalid model configuration");
  }
  const int d = c.width;
  std::vector<std::pair<std::string, std::pair<int, int>>> m;
  for (const char* tower : kTowers) {
    const std::string t = tower;
    m.push_back({t + "obs.w1", {c.obs_dim, d}});
    m.push_back({t + "obs.b1", {1, d}});
    m.push_back({t + "obs.w2", {d, d}});
    m.push_back({t + "obs.b2", {1, d}});
    m.push_back({t + "act.w", {3, d}});
    m.push_back({t + "act.b", {1, d}});
    for (int l = 0; l < c.layers; ++l) {
      const std::string p = t + "layer" + std::to_string(l) + ".";
      if (c.architecture == Architecture::kTransformer) {
        const int f = d * c.ffn_mult;
        m.push_back({p + "ln1.g", {1, d}});
        m.push_back({p + "ln1.b", {1, d}});
        for (const char* n : {"q", "k", "v", "o"}) {
          m.push_back({p + "attn.w" + n, {d, d}});
          m.push_back({p + "attn.b" + n, {1, d}});
        }
        m.push_back({p + "ln2.g", {1, d}});
        m.push_back({p + "ln2.b", {1, d}});
        m.push_back({p + "ffn.w1", {d, f}});
        m.push_back({p + "ffn.b1", {1, f}});
        m.push_back({p + "ffn.w2", {f, d}});
        m.push_back({p + "ffn.b2", {1, d}});
      } else {
        m.push_back({p + "lstm.w", {d, 4 * d}});
        m.push_back({p + "lstm.u", {d, 4 * d}});
        m.push_back({p + "lstm.b", {1, 4 * d}});
      }
    }
    if (c.architecture == Architecture::kTransformer) {
      m.push_back({t + "lnf.g", {1, d}});
      m.push_back({t + "lnf.b", {1, d}});
    }
  }
  m.push_back({"event.head.w", {d, kNumEvents}});
  m.push_back({"event.head.b", {1, kNumEvents}});
  m.push_back({"bearing.head.w", {d, 2}});
  m.push_back({"bearing.head.b", {1, 2}});
  return m;
}

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  ModelWeights w;
  w.config = config;
  w.seed = seed;
  Rng rng(seed);
  const int d = config.width;
  for (const auto& [name, shape] : weight_manifest(config)) {
    const auto [rows, cols] = shape;
    Matrix m = Matrix::Zero(rows, cols);
    const bool is_gain = name.ends_with(".g");
    const bool is_bias = !is_gain && rows == 1;
    if (is_gain) {
      m.setOnes();
    } else if (is_bias) {
      if (name.ends_with("lstm.b")) m.middleCols(d, d).setOnes();  // forget gate
    } else {
      const double limit = std::sqrt(6.0 / (rows + cols));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-limit, limit);
    }
    w.tensors.push_back({name, std::move(m)});
  }
  return w;
}

void save_weights(const ModelWeights& w, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["architecture"] = architecture_name(w.config.architecture);
  manifest["seed"] = w.seed;
  manifest["model"] = config_to_json(w.config);
  manifest["training"] = json::parse(w.training_config_json);
  manifest["tensors"] = json::array();
  for (std::size_t i = 0; i < w.tensors.size(); ++i) {
    const auto& t = w.tensors[i];
    const std::string file = t.name + ".f64";
    manifest["tensors"].push_back(
        {{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}, {"file", file}});
    std::ofstream out(dir / file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / file).string());
    write_le_doubles(out, t.value);
  }
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  mf << manifest.dump(2) << "\n";
}

ModelWeights load_weights(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("cannot read " + (dir / "manifest.json").string());
  const json manifest = json::parse(mf);
  ModelWeights w;
  w.config = config_from_json(manifest.at("model"));
  if (manifest.at("architecture").get<std::string>() != architecture_name(w.config.architecture)) {
    throw DomainError("manifest architecture tag disagrees with model config");
  }
  w.seed = manifest.at("seed").get<std::uint64_t>();
  w.training_config_json = manifest.value("training", json::object()).dump();
  const auto expected = weight_manifest(w.config);
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != expected.size()) throw DomainError("manifest tensor count mismatch");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& t = tensors[i];
    const std::string name = t.at("name").get<std::string>();
    const int rows = t.at("rows").get<int>();
    const int cols = t.at("cols").get<int>();
    if (name != expected[i].first || rows != expected[i].second.first ||
        cols != expected[i].second.second) {
      throw DomainError("manifest shape mismatch at tensor " + name);
    }
    std::ifstream in(dir / t.at("file").get<std::string>(), std::ios::binary);
    if (!in) throw std::runtime_error("cannot read tensor file for " + name);
    w.tensors.push_back({name, read_le_doubles(in, rows, cols)});
  }
  if (!w.all_finite()) throw DomainError("loaded weights contain non-finite values");
  return w;
}

ModelBatch ModelBatch::from_samples(std::span<const TrajectorySample> samples) {
  if (samples.empty()) throw DomainError("empty batch");
  const int h = samples[0].horizon();
  const auto f = samples[0].obs.size();
  ModelBatch b;
  b.horizon = h;
  b.obs.resize(static_cast<Eigen::Index>(samples.size()), f);
  b.actions.resize(static_cast<Eigen::Index>(samples.size()) * h, 3);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].horizon() != h || samples[i].obs.size() != f || samples[i].actions.cols() != 3) {
      throw DomainError("batch samples disagree in shape");
    }
    b.obs.row(static_cast<Eigen::Index>(i)) = samples[i].obs.transpose();
    b.actions.middleRows(static_cast<Eigen::Index>(i) * h, h) = samples[i].actions;
  }
  return b;
}

ModelBatch ModelBatch::single(const Eigen::VectorXd& obs, const Matrix& actions) {
  if (actions.cols() != 3) throw DomainError("action rows must be (delta, throttle, dt)");
  ModelBatch b;
  b.horizon = static_cast<int>(actions.rows());
  b.obs = obs.transpose();
  b.actions = actions;
  return b;
}

ModelGraph build_graph(Tape& t, const ModelWeights& w, const ModelBatch& batch) {
  const ModelConfig& c = w.config;
  const int B = batch.batch();
  const int H = batch.horizon;
  const int L = H + 1;
  const int d = c.width;
  if (H < 1 || B < 1) throw DomainError("forward needs at least one sample and one step");
  if (batch.obs.cols() != c.obs_dim) {
    throw DomainError("observation length " + std::to_string(batch.obs.cols()) + " != " +
                      std::to_string(c.obs_dim));
  }
  if (batch.actions.rows() != static_cast<Eigen::Index>(B) * H || batch.actions.cols() != 3) {
    throw DomainError("action block has wrong shape");
  }

  ModelGraph g;
  g.params.reserve(w.tensors.size());
  for (const auto& tensor : w.tensors) g.params.push_back(t.parameter(tensor.value));
  std::unordered_map<std::string, Var> p;
  for (std::size_t i = 0; i < w.tensors.size(); ++i) p.emplace(w.tensors[i].name, g.params[i]);
  auto P = [&](const std::string& name) {
    auto it = p.find(name);
    if (it == p.end()) throw DomainError("model has no tensor named " + name);
    return it->second;
  };

  Var obs = t.constant(batch.obs);
  const Matrix pe = position_code(L, d);
  auto trunk = [&](const std::string& tw) {
    Var hidden = ops::tanh(t, ops::affine(t, obs, P(tw + "obs.w1"), P(tw + "obs.b1")));
    Var prefix = ops::affine(t, hidden, P(tw + "obs.w2"), P(tw + "obs.b2"));
    check_finite(t, prefix, tw + "obs_encoder");

    Var act = ops::affine(t, t.constant(normalize_actions(batch.actions)), P(tw + "act.w"),
                          P(tw + "act.b"));
    Matrix act_pe(static_cast<Eigen::Index>(B) * H, d);
    for (int b = 0; b < B; ++b) act_pe.middleRows(static_cast<Eigen::Index>(b) * H, H) = pe.bottomRows(H);
    act = ops::add(t, act, t.constant(std::move(act_pe)));
    prefix = ops::add(t, prefix, t.constant(pe.row(0).replicate(B, 1)));
    check_finite(t, act, tw + "action_embedding");

    Var features;
    if (c.architecture == Architecture::kTransformer) {
      // Token layout: segment b is [prefix_b, act_b0 .. act_b(H-1)].
      const Var parts[] = {prefix, act};
      Var stacked = ops::concat_rows(t, parts);
      std::vector<Eigen::Index> order;
      order.reserve(static_cast<std::size_t>(B) * L);
      for (int b = 0; b < B; ++b) {
        order.push_back(b);
        for (int s = 0; s < H; ++s) order.push_back(B + static_cast<Eigen::Index>(b) * H + s);
      }
      Var x = ops::gather_rows(t, stacked, std::move(order));
      for (int l = 0; l < c.layers; ++l) {
        const std::string n = tw + "layer" + std::to_string(l) + ".";
        Var h = ops::layer_norm(t, x, P(n + "ln1.g"), P(n + "ln1.b"));
        Var q = ops::affine(t, h, P(n + "attn.wq"), P(n + "attn.bq"));
        Var k = ops::affine(t, h, P(n + "attn.wk"), P(n + "attn.bk"));
        Var v = ops::affine(t, h, P(n + "attn.wv"), P(n + "attn.bv"));
        Var a = ops::causal_attention(t, q, k, v, L, c.heads);
        x = ops::add(t, x, ops::affine(t, a, P(n + "attn.wo"), P(n + "attn.bo")));
        h = ops::layer_norm(t, x, P(n + "ln2.g"), P(n + "ln2.b"));
        h = ops::relu(t, ops::affine(t, h, P(n + "ffn.w1"), P(n + "ffn.b1")));
        x = ops::add(t, x, ops::affine(t, h, P(n + "ffn.w2"), P(n + "ffn.b2")));
        check_finite(t, x, tw + "layer" + std::to_string(l));
      }
      x = ops::layer_norm(t, x, P(tw + "lnf.g"), P(tw + "lnf.b"));
      std::vector<Eigen::Index> rows;
      rows.reserve(static_cast<std::size_t>(B) * H);
      for (int b = 0; b < B; ++b) {
        for (int s = 0; s < H; ++s) rows.push_back(static_cast<Eigen::Index>(b) * L + 1 + s);
      }
      features = ops::gather_rows(t, x, std::move(rows));
    } else {
      // Time-major inputs: step 0 is the prefix, step s+1 is action s.
      std::vector<Var> inputs;
      inputs.reserve(static_cast<std::size_t>(L));
      inputs.push_back(prefix);
      for (int s = 0; s < H; ++s) {
        std::vector<Eigen::Index> rows;
        rows.reserve(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) rows.push_back(static_cast<Eigen::Index>(b) * H + s);
        inputs.push_back(ops::gather_rows(t, act, std::move(rows)));
      }
      for (int l = 0; l < c.layers; ++l) {
        const std::string n = tw + "layer" + std::to_string(l) + ".";
        Var h = t.constant(Matrix::Zero(B, d));
        Var cell = t.constant(Matrix::Zero(B, d));
        std::vector<Var> outputs;
        outputs.reserve(inputs.size());
        for (Var in : inputs) {
          Var proj = ops::affine(t, in, P(n + "lstm.w"), P(n + "lstm.b"));
          std::tie(h, cell) = ops::lstm_cell(t, proj, h, cell, P(n + "lstm.u"));
          outputs.push_back(h);
        }
        check_finite(t, outputs.back(), tw + "layer" + std::to_string(l));
        inputs = std::move(outputs);
      }
      Var time_major = ops::concat_rows(t, std::span<const Var>(inputs).subspan(1));
      std::vector<Eigen::Index> rows;
      rows.reserve(static_cast<std::size_t>(B) * H);
      for (int b = 0; b < B; ++b) {
        for (int s = 0; s < H; ++s) rows.push_back(static_cast<Eigen::Index>(s) * B + b);
      }
      features = ops::gather_rows(t, time_major, std::move(rows));
    }
    return features;
  };
  const Var event_features = trunk("event.");
  const Var bearing_features = trunk("bearing.");

  g.logits = ops::affine(t, event_features, P("event.head.w"), P("event.head.b"));
  g.mean_logvar = ops::affine(t, bearing_features, P("bearing.head.w"), P("bearing.head.b"));
  check_finite(t, g.logits, "event_head");
  check_finite(t, g.mean_logvar, "bearing_head");
  return g;
}

std::vector<std::vector<StepPrediction>> forward_batch(const ModelWeights& w,
                                                        const ModelBatch& batch) {
  Tape t(false);
  const ModelGraph g = build_graph(t, w, batch);
  const Matrix& logits = t.value(g.logits);
  const Matrix& ml = t.value(g.mean_logvar);
  const int B = batch.batch();
  const int H = batch.horizon;
  std::vector<std::vector<StepPrediction>> out(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    auto& seq = out[static_cast<std::size_t>(b)];
    seq.resize(static_cast<std::size_t>(H));
    for (int s = 0; s < H; ++s) {
      const Eigen::Index r = static_cast<Eigen::Index>(b) * H + s;
      StepPrediction& sp = seq[static_cast<std::size_t>(s)];
      const double m = logits.row(r).maxCoeff();
      double z = 0.0;
      for (int k = 0; k < kNumEvents; ++k) {
        sp.event_probs[static_cast<std::size_t>(k)] = std::exp(logits(r, k) - m);
        z += sp.event_probs[static_cast<std::size_t>(k)];
      }
      for (double& pk : sp.event_probs) pk /= z;
      sp.bearing_mu = ml(r, 0);
      sp.bearing_var = w.config.var_min + std::exp(ml(r, 1));
      if (!std::isfinite(sp.bearing_var)) throw InferenceError("bearing_head", "variance overflow");
    }
  }
  return out;
}

std::vector<StepPrediction> forward(const ModelWeights& w, const Eigen::VectorXd& obs,
                                    const Matrix& actions) {
  return forward_batch(w, ModelBatch::single(obs, actions)).front();
}

double loss(std::span<const StepPrediction> predictions, std::span<const int> event_labels,
            std::span<const double> bearing_labels) {
  if (predictions.size() != event_labels.size() || predictions.size() != bearing_labels.size() ||
      predictions.empty()) {
    throw DomainError("loss: predictions and labels differ in length");
  }
  const double half_log_2pi = 0.5 * std::log(2.0 * kPi);
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int y = event_labels[i];
    if (y < 0 || y >= kNumEvents) throw DomainError("loss: label out of range");
    const double p = std::max(predictions[i].event_probs[static_cast<std::size_t>(y)],
                              std::numeric_limits<double>::min());
    const double var = predictions[i].bearing_var;
    const double diff = bearing_labels[i] - predictions[i].bearing_mu;
    total += -std::log(p) + half_log_2pi + 0.5 * std::log(var) + diff * diff / (2.0 * var);
  }
  return total / static_cast<double>(predictions.size());
}

namespace {

struct FlatLabels {
  std::vector<int> events;
  std::vector<double> bearings;
};

FlatLabels flatten_labels(std::span<const TrajectorySample> batch) {
  FlatLabels f;
  for (const auto& s : batch) {
    if (s.event_labels.size() != static_cast<std::size_t>(s.horizon()) ||
        s.bearing_labels.size() != static_cast<std::size_t>(s.horizon())) {
      throw DomainError("sample labels do not match its horizon");
    }
    f.events.insert(f.events.end(), s.event_labels.begin(), s.event_labels.end());
    f.bearings.insert(f.bearings.end(), s.bearing_labels.begin(), s.bearing_labels.end());
  }
  return f;
}

}  // namespace

LossAndGrad loss_and_grad(const ModelWeights& w, std::span<const TrajectorySample> batch) {
  const FlatLabels labels = flatten_labels(batch);
  Tape t(true);
  const ModelGraph g = build_graph(t, w, ModelBatch::from_samples(batch));
  Var l = ops::add(t, ops::cross_entropy(t, g.logits, labels.events),
                   ops::gaussian_nll(t, g.mean_logvar, labels.bearings, w.config.var_min));
  LossAndGrad out;
  out.loss = t.value(l)(0, 0);
  if (!std::isfinite(out.loss)) return out;
  t.backward(l);
  out.grads.reserve(g.params.size());
  for (Var p : g.params) out.grads.push_back(t.grad(p));
  return out;
}

double batch_loss(const ModelWeights& w, std::span<const TrajectorySample> batch) {
  const FlatLabels labels = flatten_labels(batch);
  Tape t(false);
  const ModelGraph g = build_graph(t, w, ModelBatch::from_samples(batch));
  Var l = ops::add(t, ops::cross_entropy(t, g.logits, labels.events),
                   ops::gaussian_nll(t, g.mean_logvar, labels.bearings, w.config.var_min));
  return t.value(l)(0, 0);
}

TrainResult train(std::span<const TrajectorySample> dataset, const ModelConfig& model,
                  const TrainConfig& config) {
  return train_from(init_weights(model, config.seed), dataset, config);
}

TrainResult train_from(ModelWeights w, std::span<const TrajectorySample> dataset,
                       const TrainConfig& config) {
  if (dataset.empty()) throw DomainError("training set is empty");
  if (config.batch < 1 || config.epochs < 0 || !(config.lr >= 0.0)) {
    throw DomainError("invalid training configuration");
  }
  json meta = {{"epochs", config.epochs}, {"batch", config.batch}, {"lr", config.lr},
               {"beta1", config.beta1},   {"beta2", config.beta2}, {"seed", config.seed},
               {"samples", dataset.size()}};
  w.training_config_json = meta.dump();

  std::vector<Matrix> m1, m2;
  for (const auto& t : w.tensors) {
    m1.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
    m2.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
  }

  TrainResult result;
  result.weights = w;
  double best = std::numeric_limits<double>::infinity();
  Rng rng(mix_seed(config.seed, 0x7261696eULL));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t batch_index = 0;
  int steps = 0;
  bool done = false;

  for (int epoch = 0; epoch < config.epochs && !done; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_total = 0.0;
    std::size_t epoch_count = 0;
    std::vector<TrajectorySample> mb;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch));
      mb.clear();
      for (std::size_t i = start; i < end; ++i) mb.push_back(dataset[order[i]]);
      LossAndGrad lg = loss_and_grad(w, mb);
      if (!std::isfinite(lg.loss)) throw TrainingError(batch_index, "non-finite training loss");
      ++steps;
      const double bc1 = 1.0 - std::pow(config.beta1, steps);
      const double bc2 = 1.0 - std::pow(config.beta2, steps);
      for (std::size_t k = 0; k < w.tensors.size(); ++k) {
        m1[k] = config.beta1 * m1[k] + (1.0 - config.beta1) * lg.grads[k];
        m2[k] = config.beta2 * m2[k] + (1.0 - config.beta2) * lg.grads[k].cwiseAbs2();
        w.tensors[k].value.array() -=
            config.lr * (m1[k].array() / bc1) / ((m2[k].array() / bc2).sqrt() + config.eps);
      }
      epoch_total += lg.loss * static_cast<double>(mb.size());
      epoch_count += mb.size();
      ++batch_index;
      if (config.max_steps > 0 && steps >= config.max_steps) {
        done = true;
        break;
      }
    }
    const double mean = epoch_total / static_cast<double>(epoch_count);
    result.epoch_loss.push_back(mean);
    if (mean < best) {
      best = mean;
      result.weights = w;
    }
  }
  result.steps = steps;
  return result;
}

std::vector<StepMetrics> per_step_metrics(const Predictor& predictor,
                                          std::span<const TrajectorySample> test_set) {
  if (test_set.empty()) throw DomainError("test set is empty");
  const int H = test_set[0].horizon();
  std::vector<std::array<std::array<long, kNumEvents>, kNumEvents>> confusion(
      static_cast<std::size_t>(H));
  for (auto& c : confusion) {
    for (auto& row : c) row.fill(0);
  }
  std::vector<double> abs_err(static_cast<std::size_t>(H), 0.0);
  for (const auto& s : test_set) {
    if (s.horizon() != H) throw DomainError("test samples disagree in horizon");
    const auto preds = predictor(s);
    if (preds.size() != static_cast<std::size_t>(H)) throw DomainError("predictor returned wrong length");
    for (int t = 0; t < H; ++t) {
      const auto& p = preds[static_cast<std::size_t>(t)].event_probs;
      const int guess = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      ++confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(s.event_labels[static_cast<std::size_t>(t)])]
                 [static_cast<std::size_t>(guess)];
      abs_err[static_cast<std::size_t>(t)] +=
          std::abs(preds[static_cast<std::size_t>(t)].bearing_mu - s.bearing_labels[static_cast<std::size_t>(t)]);
    }
  }
  std::vector<StepMetrics> out;
  const double n = static_cast<double>(test_set.size());
  for (int t = 0; t < H; ++t) {
    const auto& c = confusion[static_cast<std::size_t>(t)];
    StepMetrics m;
    m.step = t;
    long correct = 0;
    double f1_sum = 0.0;
    int classes = 0;
    for (std::size_t k = 0; k < kNumEvents; ++k) {
      long tp = c[k][k];
      long fn = 0, fp = 0;
      for (std::size_t j = 0; j < kNumEvents; ++j) {
        if (j == k) continue;
        fn += c[k][j];
        fp += c[j][k];
      }
      correct += tp;
      if (tp + fn == 0) {
        ++m.skipped_classes;  // class absent at this step
        continue;
      }
      f1_sum += 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
      ++classes;
    }
    m.macro_f1 = classes > 0 ? f1_sum / classes : 0.0;
    m.accuracy = static_cast<double>(correct) / n;
    m.bearing_mae = abs_err[static_cast<std::size_t>(t)] / n;
    out.push_back(m);
  }
  return out;
}

std::vector<StepMetrics> per_step_metrics(const ModelWeights& weights,
                                          std::span<const TrajectorySample> test_set) {
  if (test_set.empty()) throw DomainError("test set is empty");
  // Batched inference, then replay through the generic path.
  std::vector<std::vector<StepPrediction>> cache;
  cache.reserve(test_set.size());
  constexpr std::size_t kChunk = 256;
  for (std::size_t s = 0; s < test_set.size(); s += kChunk) {
    const auto part = test_set.subspan(s, std::min(kChunk, test_set.size() - s));
    auto preds = forward_batch(weights, ModelBatch::from_samples(part));
    for (auto& p : preds) cache.push_back(std::move(p));
  }
  std::size_t next = 0;
  return per_step_metrics([&](const TrajectorySample&) { return cache[next++]; }, test_set);
}

GradCheckResult gradient_check(const ModelWeights& weights,
                               std::span<const TrajectorySample> batch, int coordinates,
                               double step, std::uint64_t seed) {
  const LossAndGrad lg = loss_and_grad(weights, batch);
  ModelWeights probe = weights;
  Rng rng(seed);
  GradCheckResult r;
  const std::size_t total = weights.parameter_count();
  for (int c = 0; c < coordinates; ++c) {
    std::size_t flat = rng.below(total);
    std::size_t k = 0;
    while (flat >= static_cast<std::size_t>(probe.tensors[k].value.size())) {
      flat -= static_cast<std::size_t>(probe.tensors[k].value.size());
      ++k;
    }
    double& x = probe.tensors[k].value.data()[flat];
    const double orig = x;
    x = orig + step;
    const double fp = batch_loss(probe, batch);
    x = orig - step;
    const double fm = batch_loss(probe, batch);
    x = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double analytic = lg.grads[k].data()[flat];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-5});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(numeric - analytic) / denom);
    ++r.coordinates;
  }
  return r;
}

}  // namespace offroad

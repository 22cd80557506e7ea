#include "offroad/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace offroad {

using nlohmann::json;

RunConfig::RunConfig() {
  const PlannerConfig pc;
  steering = pc.steering;
  throttle = pc.throttle;
  model.obs_dim = observation.feature_count();
}

void RunConfig::validate() const {
  vehicle.validate();
  if (model.obs_dim != observation.feature_count()) {
    throw ConfigError("model.obs_dim", "must equal the observation feature count (" +
                                           std::to_string(observation.feature_count()) + ")");
  }
  if (ensemble.members < 2) throw ConfigError("ensemble.members", "must be >= 2");
  if (planner.episodes < 1) throw ConfigError("planner.episodes", "must be >= 1");
  if (!(planner.goal_distance > 0.0)) throw ConfigError("planner.goal_distance", "must be > 0");
  if (planner.terrain != "empty" && planner.terrain != "generated") {
    throw ConfigError("planner.terrain", "must be \"empty\" or \"generated\"");
  }
  if (dataset.samples < 1) throw ConfigError("world.dataset.samples", "must be >= 1");
  if (dataset.test_samples < 1) throw ConfigError("world.dataset.test_samples", "must be >= 1");
  if (world.size < 8) throw ConfigError("world.size", "must be >= 8");
  try {
    planner_config().validate();
  } catch (const DomainError& e) {
    throw ConfigError("planner", e.what());
  }
}

PlannerConfig RunConfig::planner_config() const {
  PlannerConfig p;
  p.horizon = planner.horizon;
  p.steering = steering;
  p.throttle = throttle;
  p.event = event;
  p.mpc = mpc;
  p.goal_radius = planner.goal_radius;
  p.max_ticks = planner.max_ticks;
  p.alternations = planner.alternations;
  p.initial_throttle = planner.initial_throttle;
  p.noise = noise;
  p.mhe = mhe;
  p.observation = observation;
  p.execution_substep = planner.execution_substep;
  return p;
}

DatasetConfig RunConfig::dataset_config() const {
  DatasetConfig d;
  d.horizon = dataset.horizon;
  d.observation = observation;
  d.params = vehicle;
  d.max_start_speed = dataset.max_start_speed;
  d.steer_walk_std = dataset.steer_walk_std;
  d.throttle_jitter = dataset.throttle_jitter;
  d.margin = dataset.margin;
  return d;
}

namespace {

json::json_pointer pointer(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) p += "/" + part;
  return json::json_pointer(p);
}

struct Writer {
  json out = json::object();

  template <class T>
  void field(const std::string& path, const T& v) {
    out[pointer(path)] = v;
  }
  void field(const std::string& path, const Architecture& a) {
    out[pointer(path)] = architecture_name(a);
  }
  void field(const std::string& path, const Distance& d) { out[pointer(path)] = distance_name(d); }
  void field(const std::string& path, const OptimizerKind& k) {
    out[pointer(path)] = k == OptimizerKind::kCem ? "cem" : "cma";
  }
  void field(const std::string& path, const Eigen::VectorXd&) {
    out[pointer(path)] = json::array();
  }
};

struct Reader {
  const json& in;
  std::set<std::string> known;

  const json* find(const std::string& path) {
    known.insert(path);
    const auto p = pointer(path);
    return in.contains(p) ? &in.at(p) : nullptr;
  }

  template <class T>
  void field(const std::string& path, T& v) {
    const json* j = find(path);
    if (!j) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!j->is_boolean()) throw ConfigError(path, "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!j->is_number_integer()) throw ConfigError(path, "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (!j->is_number_unsigned() && j->template get<long long>() < 0) {
            throw ConfigError(path, "expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!j->is_number()) throw ConfigError(path, "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!j->is_string()) throw ConfigError(path, "expected a string");
      }
      v = j->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path, e.what());
    }
  }
  void field(const std::string& path, Architecture& a) {
    std::string s = architecture_name(a);
    field(path, s);
    try {
      a = parse_architecture(s);
    } catch (const std::exception& e) {
      throw ConfigError(path, e.what());
    }
  }
  void field(const std::string& path, Distance& d) {
    std::string s = distance_name(d);
    field(path, s);
    try {
      d = parse_distance(s);
    } catch (const std::exception& e) {
      throw ConfigError(path, e.what());
    }
  }
  void field(const std::string& path, OptimizerKind& k) {
    std::string s = k == OptimizerKind::kCem ? "cem" : "cma";
    field(path, s);
    if (s == "cem") {
      k = OptimizerKind::kCem;
    } else if (s == "cma") {
      k = OptimizerKind::kCma;
    } else {
      throw ConfigError(path, "expected \"cem\" or \"cma\"");
    }
  }
  void field(const std::string& path, Eigen::VectorXd&) {
    const json* j = find(path);
    if (j && !(j->is_array() && j->empty())) {
      throw ConfigError(path, "warm-start vectors are set by the planner; leave empty");
    }
  }
};

void visit_optimizer(auto& v, const std::string& base, auto& o) {
  v.field(base + ".kind", o.kind);
  v.field(base + ".budget", o.budget);
  v.field(base + ".cem.population", o.cem.population);
  v.field(base + ".cem.elite_frac", o.cem.elite_frac);
  v.field(base + ".cem.iters", o.cem.iters);
  v.field(base + ".cem.min_std", o.cem.min_std);
  v.field(base + ".cma.lambda", o.cma.lambda);
  v.field(base + ".cma.init_sigma", o.cma.init_sigma);
  v.field(base + ".cma.iters", o.cma.iters);
}

template <class V, class C>
void visit(V& v, C& c) {
  v.field("seed", c.seed);
  v.field("output_dir", c.output_dir);

  v.field("vehicle.c1", c.vehicle.c1);
  v.field("vehicle.c2", c.vehicle.c2);
  v.field("vehicle.cm1", c.vehicle.cm1);
  v.field("vehicle.cm2", c.vehicle.cm2);
  v.field("vehicle.cr2", c.vehicle.cr2);
  v.field("vehicle.cr0", c.vehicle.cr0);
  v.field("vehicle.g", c.vehicle.g);
  v.field("vehicle.mass_scale", c.vehicle.mass_scale);

  v.field("mhe.window", c.mhe.window);
  v.field("mhe.estimate.phi", c.mhe.estimate.phi);
  v.field("mhe.estimate.cr0", c.mhe.estimate.cr0);
  v.field("mhe.estimate.cr2", c.mhe.estimate.cr2);
  v.field("mhe.prior_std", c.mhe.prior_std);
  v.field("mhe.param_prior_std", c.mhe.param_prior_std);
  v.field("mhe.max_iters", c.mhe.lm.max_iters);
  v.field("mhe.tol", c.mhe.lm.tol);
  v.field("mhe.damping", c.mhe.lm.damping);
  v.field("mhe.noise.gps_xy_std", c.noise.gps_xy_std);
  v.field("mhe.noise.gps_psi_std", c.noise.gps_psi_std);
  v.field("mhe.noise.accel_std", c.noise.accel_std);
  v.field("mhe.noise.speed_std", c.noise.speed_std);

  visit_optimizer(v, "optimizer.steering", c.steering);
  visit_optimizer(v, "optimizer.throttle", c.throttle);

  v.field("model.architecture", c.model.architecture);
  v.field("model.obs_dim", c.model.obs_dim);
  v.field("model.width", c.model.width);
  v.field("model.layers", c.model.layers);
  v.field("model.heads", c.model.heads);
  v.field("model.ffn_mult", c.model.ffn_mult);
  v.field("model.var_min", c.model.var_min);
  v.field("model.train.epochs", c.train.epochs);
  v.field("model.train.batch", c.train.batch);
  v.field("model.train.lr", c.train.lr);
  v.field("model.train.beta1", c.train.beta1);
  v.field("model.train.beta2", c.train.beta2);
  v.field("model.train.eps", c.train.eps);
  v.field("model.train.max_steps", c.train.max_steps);

  v.field("ensemble.members", c.ensemble.members);
  v.field("ensemble.distance", c.ensemble.distance);
  v.field("ensemble.w_class", c.ensemble.weights.w_class);
  v.field("ensemble.w_bearing", c.ensemble.weights.w_bearing);
  v.field("ensemble.weights_dir", c.ensemble.weights_dir);

  v.field("reward.event.alpha_pos", c.event.alpha_pos);
  v.field("reward.event.alpha_bum", c.event.alpha_bum);
  v.field("reward.event.gamma", c.event.gamma);
  v.field("reward.event.collision_classes", c.event.collision_classes);
  v.field("reward.event.bumpy_classes", c.event.bumpy_classes);
  v.field("reward.mpc.beta_sigma", c.mpc.beta_sigma);
  v.field("reward.mpc.beta_v", c.mpc.beta_v);
  v.field("reward.mpc.sigma_min", c.mpc.sigma_min);

  v.field("planner.horizon", c.planner.horizon);
  v.field("planner.goal_radius", c.planner.goal_radius);
  v.field("planner.max_ticks", c.planner.max_ticks);
  v.field("planner.alternations", c.planner.alternations);
  v.field("planner.initial_throttle", c.planner.initial_throttle);
  v.field("planner.execution_substep", c.planner.execution_substep);
  v.field("planner.episodes", c.planner.episodes);
  v.field("planner.goal_distance", c.planner.goal_distance);
  v.field("planner.start_speed", c.planner.start_speed);
  v.field("planner.terrain", c.planner.terrain);

  v.field("world.size", c.world.size);
  v.field("world.cell_size", c.world.cell_size);
  v.field("world.frequencies", c.world.frequencies);
  v.field("world.blob_scale", c.world.blob_scale);
  v.field("world.max_slope", c.world.max_slope);
  v.field("world.observation.probe_distances", c.observation.probe_distances);
  v.field("world.observation.ray_angles", c.observation.ray_angles);
  v.field("world.observation.ray_range", c.observation.ray_range);
  v.field("world.observation.noise_std", c.observation.noise_std);
  v.field("world.observation.obstacle_classes", c.observation.obstacle_classes);
  v.field("world.dataset.samples", c.dataset.samples);
  v.field("world.dataset.test_samples", c.dataset.test_samples);
  v.field("world.dataset.horizon", c.dataset.horizon);
  v.field("world.dataset.max_start_speed", c.dataset.max_start_speed);
  v.field("world.dataset.steer_walk_std", c.dataset.steer_walk_std);
  v.field("world.dataset.throttle_jitter", c.dataset.throttle_jitter);
  v.field("world.dataset.margin", c.dataset.margin);
}

void reject_unknown(const json& j, const std::string& prefix, const std::set<std::string>& known) {
  if (!j.is_object()) {
    if (!known.contains(prefix)) throw ConfigError(prefix, "unknown key");
    return;
  }
  if (!prefix.empty() && known.contains(prefix)) {
    throw ConfigError(prefix, "expected a value, got an object");
  }
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!value.is_object() && !known.contains(path)) throw ConfigError(path, "unknown key");
    bool is_section = false;
    for (const auto& k : known) {
      if (k.size() > path.size() && k.compare(0, path.size(), path) == 0 && k[path.size()] == '.') {
        is_section = true;
        break;
      }
    }
    if (value.is_object() && !is_section && !known.contains(path)) {
      throw ConfigError(path, "unknown key");
    }
    if (value.is_object()) reject_unknown(value, path, known);
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  Writer w;
  visit(w, c);
  return w.out;
}

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  RunConfig c;
  Reader r{j, {}};
  visit(r, c);
  reject_unknown(j, "", r.known);
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::ios_base::failure("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
  }
  return config_from_json(j);
}

void save_config(const RunConfig& c, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << to_json(c).dump(2) << '\n';
}

}  // namespace offroad

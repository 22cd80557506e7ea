#include "offroad/planner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace offroad {

EnsembleModel::EnsembleModel(std::vector<ModelWeights> members, UncertaintyWeights weights,
                             Distance distance)
    : members_(std::move(members)), weights_(weights), distance_(distance) {
  if (members_.size() < 2) throw DomainError("an ensemble needs at least two members");
}

std::vector<EnsembleOutput> EnsembleModel::evaluate(const Eigen::VectorXd& obs,
                                                    const std::vector<Matrix>& candidates) const {
  if (candidates.empty()) return {};
  const int h = static_cast<int>(candidates.front().rows());
  ModelBatch batch;
  batch.horizon = h;
  batch.obs.resize(static_cast<Eigen::Index>(candidates.size()), obs.size());
  batch.actions.resize(static_cast<Eigen::Index>(candidates.size()) * h, 3);
  for (std::size_t b = 0; b < candidates.size(); ++b) {
    if (candidates[b].rows() != h || candidates[b].cols() != 3) {
      throw DomainError("candidate action blocks must all be H x 3");
    }
    batch.obs.row(static_cast<Eigen::Index>(b)) = obs.transpose();
    batch.actions.middleRows(static_cast<Eigen::Index>(b) * h, h) = candidates[b];
  }
  return ensemble_predict_batch(members_, batch);
}

std::vector<std::vector<StepPrediction>> EnsembleModel::mean_predictions(
    const VehicleState&, const Eigen::VectorXd& obs, const std::vector<Matrix>& candidates) const {
  std::vector<std::vector<StepPrediction>> out;
  for (const auto& e : evaluate(obs, candidates)) out.push_back(e.mean());
  return out;
}

std::vector<UncertaintyTrace> EnsembleModel::uncertainty(
    const VehicleState&, const Eigen::VectorXd& obs, const std::vector<Matrix>& candidates) const {
  std::vector<UncertaintyTrace> out;
  for (const auto& e : evaluate(obs, candidates)) {
    out.push_back(uncertainty_trace(e, weights_, distance_));
  }
  return out;
}

PlannerConfig::PlannerConfig() {
  steering.cem.population = 32;
  steering.cem.iters = 6;
  steering.cem.min_std = 0.01;
  throttle.cem.population = 32;
  throttle.cem.iters = 6;
  throttle.cem.min_std = 0.02;
  steering.cem.elite_frac = 0.25;
  throttle.cem.elite_frac = 0.25;
  steering.cma.iters = 20;
  throttle.cma.iters = 20;
}

void PlannerConfig::validate() const {
  if (horizon < 1) throw DomainError("planner horizon must be >= 1");
  if (!(goal_radius > 0.0)) throw DomainError("goal_radius must be > 0");
  if (max_ticks < 0) throw DomainError("max_ticks must be >= 0");
  if (replan_every != 1) throw DomainError("replan_every must be 1");
  if (alternations < 1) throw DomainError("alternations must be >= 1");
  if (!(initial_throttle >= 0.0 && initial_throttle <= 1.0)) {
    throw DomainError("initial_throttle must lie in [0, 1]");
  }
  if (!(execution_substep > 0.0 && execution_substep <= 0.2)) {
    throw DomainError("execution_substep must lie in (0, 0.2]");
  }
  if (mhe.window < 1) throw DomainError("mhe window must be >= 1");
  event.validate();
  mpc.validate();
}

Matrix action_rows(std::span<const double> steering, std::span<const double> throttle) {
  if (steering.size() != throttle.size()) {
    throw DomainError("steering and throttle sequences differ in length");
  }
  Matrix a(static_cast<Eigen::Index>(steering.size()), 3);
  for (std::size_t t = 0; t < steering.size(); ++t) {
    const auto i = static_cast<Eigen::Index>(t);
    a(i, 0) = steering[t];
    a(i, 1) = throttle[t];
    a(i, 2) = throttle_to_dt(throttle[t]);
  }
  return a;
}

namespace {

std::vector<VehicleState> rollout_sequences(const VehicleState& state,
                                            std::span<const double> steering,
                                            std::span<const double> throttle,
                                            const ModelParams& params) {
  std::vector<ControlInput> inputs;
  std::vector<double> dts;
  inputs.reserve(steering.size());
  dts.reserve(steering.size());
  for (std::size_t t = 0; t < steering.size(); ++t) {
    inputs.emplace_back(steering[t], throttle[t]);
    dts.push_back(throttle_to_dt(throttle[t]));
  }
  return rollout(state, inputs, params, dts, kDefaultSubstep);
}

std::vector<double> to_vector(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::VectorXd warm_mean(std::span<const double> warm, int h, double fallback, double lo,
                          double hi) {
  Eigen::VectorXd m = Eigen::VectorXd::Constant(h, fallback);
  if (static_cast<int>(warm.size()) == h) {
    for (int t = 0; t < h; ++t) m[t] = std::clamp(warm[static_cast<std::size_t>(t)], lo, hi);
  }
  return m;
}

// Besides the search itself, the warm start, the constant sequences at both
// bounds, the final search mean and that mean snapped onto nearby bounds are
// scored as candidates. CEM starts at half the box width unless configured.
OptimResult run_optimizer(const BoxProblem& problem, const OptimizerSettings& settings,
                          const Eigen::VectorXd& init_mean) {
  OptimResult r;
  if (settings.kind == OptimizerKind::kCem) {
    CemConfig cfg = settings.cem;
    cfg.init_mean = init_mean;
    if (cfg.init_std.size() == 0) cfg.init_std = 0.5 * (problem.upper - problem.lower);
    r = cem_minimize(problem, cfg);
  } else {
    CmaConfig cfg = settings.cma;
    cfg.init_mean = init_mean;
    r = cma_minimize(problem, cfg);
  }
  std::vector<Eigen::VectorXd> extra{init_mean.cwiseMax(problem.lower).cwiseMin(problem.upper),
                                     problem.lower, problem.upper};
  if (r.final_mean.size() == problem.dim) {
    Eigen::VectorXd m = r.final_mean.cwiseMax(problem.lower).cwiseMin(problem.upper);
    extra.push_back(m);
    const Eigen::VectorXd near = 0.1 * (problem.upper - problem.lower);
    for (int i = 0; i < problem.dim; ++i) {
      if (m[i] - problem.lower[i] < near[i]) m[i] = problem.lower[i];
      if (problem.upper[i] - m[i] < near[i]) m[i] = problem.upper[i];
    }
    extra.push_back(m);
  }
  const std::vector<double> f = problem.batch_objective(extra);
  r.evaluations += static_cast<long>(extra.size());
  for (std::size_t i = 0; i < extra.size(); ++i) {
    if (std::isfinite(f[i]) && f[i] < r.best_f) {
      r.best_f = f[i];
      r.best_x = extra[i];
    }
  }
  return r;
}

// Previous plan shifted by one step, last element repeated.
std::vector<double> shifted(const std::vector<double>& prev, int h, double fill) {
  if (prev.empty()) return std::vector<double>(static_cast<std::size_t>(h), fill);
  std::vector<double> out(static_cast<std::size_t>(h));
  for (int t = 0; t < h; ++t) {
    const std::size_t src = std::min(static_cast<std::size_t>(t) + 1, prev.size() - 1);
    out[static_cast<std::size_t>(t)] = prev[src];
  }
  return out;
}

}  // namespace

double steering_objective(const VehicleState& state, std::span<const double> steering,
                          std::span<const double> throttle, std::span<const StepPrediction> mean,
                          const ModelParams& params, const PlannerConfig& config) {
  const auto states = rollout_sequences(state, steering, throttle, params);
  std::vector<double> costs(steering.size());
  for (std::size_t t = 0; t < steering.size(); ++t) {
    const VehicleState& s = states[t + 1];
    costs[t] = step_cost(mean[t], state.psi + mean[t].bearing_mu, {s.x, s.y}, config.goal,
                         config.event);
  }
  return -trajectory_return(costs, config.event.gamma);
}

SteeringPlan plan_steering(const VehicleState& state, const Eigen::VectorXd& obs,
                           std::span<const double> throttle_seq, const WorldModel& model,
                           const ModelParams& params, const PlannerConfig& config,
                           std::uint64_t seed, std::span<const double> warm_start) {
  const int h = config.horizon;
  if (static_cast<int>(throttle_seq.size()) != h) {
    throw DomainError("throttle sequence length differs from the horizon");
  }
  BoxProblem problem;
  problem.dim = h;
  problem.lower = Eigen::VectorXd::Constant(h, -kDeltaMax);
  problem.upper = Eigen::VectorXd::Constant(h, kDeltaMax);
  problem.budget = config.steering.budget;
  problem.seed = seed;
  const std::vector<double> thr(throttle_seq.begin(), throttle_seq.end());
  problem.batch_objective = [&](const std::vector<Eigen::VectorXd>& xs) {
    std::vector<Matrix> cands;
    cands.reserve(xs.size());
    for (const auto& x : xs) cands.push_back(action_rows(to_vector(x), thr));
    const auto means = model.mean_predictions(state, obs, cands);
    std::vector<double> f(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      f[i] = steering_objective(state, to_vector(xs[i]), thr, means[i], params, config);
    }
    return f;
  };
  problem.objective = [&](const Eigen::VectorXd& x) {
    return problem.batch_objective({x}).front();
  };
  const OptimResult r =
      run_optimizer(problem, config.steering, warm_mean(warm_start, h, 0.0, -kDeltaMax, kDeltaMax));
  SteeringPlan plan;
  plan.steering = to_vector(r.best_x);
  for (double& d : plan.steering) d = std::clamp(d, -kDeltaMax, kDeltaMax);
  plan.expected_return = -r.best_f;
  return plan;
}

ThrottlePlan plan_throttle(const VehicleState& state, const Eigen::VectorXd& obs,
                           std::span<const double> steering_seq, const WorldModel& model,
                           const ModelParams& params, const PlannerConfig& config,
                           std::uint64_t seed, std::span<const double> warm_start) {
  const int h = config.horizon;
  if (static_cast<int>(steering_seq.size()) != h) {
    throw DomainError("steering sequence length differs from the horizon");
  }
  BoxProblem problem;
  problem.dim = h;
  problem.lower = Eigen::VectorXd::Zero(h);
  problem.upper = Eigen::VectorXd::Ones(h);
  problem.budget = config.throttle.budget;
  problem.seed = seed;
  const std::vector<double> steer(steering_seq.begin(), steering_seq.end());
  const double gamma = config.event.gamma;
  auto value = [&](const std::vector<double>& thr, const UncertaintyTrace& trace) {
    const auto states = rollout_sequences(state, steer, thr, params);
    double total = 0.0;
    double discount = 1.0;
    for (std::size_t t = 0; t < thr.size(); ++t) {
      total += discount * mpc_reward(trace[t].sigma, states[t + 1].v, config.mpc);
      discount *= gamma;
    }
    return total;
  };
  problem.batch_objective = [&](const std::vector<Eigen::VectorXd>& xs) {
    std::vector<Matrix> cands;
    cands.reserve(xs.size());
    for (const auto& x : xs) cands.push_back(action_rows(steer, to_vector(x)));
    const auto traces = model.uncertainty(state, obs, cands);
    std::vector<double> f(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) f[i] = -value(to_vector(xs[i]), traces[i]);
    return f;
  };
  problem.objective = [&](const Eigen::VectorXd& x) {
    return problem.batch_objective({x}).front();
  };
  const OptimResult r = run_optimizer(problem, config.throttle,
                                      warm_mean(warm_start, h, config.initial_throttle, 0.0, 1.0));
  ThrottlePlan plan;
  plan.throttle = to_vector(r.best_x);
  for (double& d : plan.throttle) d = std::clamp(d, 0.0, 1.0);
  const auto trace = model.uncertainty(state, obs, {action_rows(steer, plan.throttle)}).front();
  plan.sigma.reserve(trace.size());
  for (const auto& s : trace) plan.sigma.push_back(s.sigma);
  plan.mpc_value = value(plan.throttle, trace);
  return plan;
}

ControllerState start_episode(const EpisodeSetup& setup, const PlannerConfig& config) {
  config.validate();
  setup.true_params.validate();
  ControllerState c;
  c.truth = setup.start;
  c.true_params = setup.true_params;
  c.estimate = setup.start;
  c.estimated_params = ModelParams{};
  c.window_start_estimate = setup.start;
  c.seed = setup.seed;
  return c;
}

namespace {

// Refreshes ctrl.estimate from the newest measurement. Returns the MHE cost
// (NaN when the estimator was skipped or failed).
double refresh_estimate(ControllerState& ctrl, const Measurement& m, const PlannerConfig& config,
                        double last_dt) {
  const VehicleState previous = ctrl.estimate;
  ctrl.window.push_back({m, ctrl.last_control});
  bool slid = false;
  if (static_cast<int>(ctrl.window.size()) > config.mhe.window) {
    ctrl.window.erase(ctrl.window.begin());
    slid = true;
  }
  if (ctrl.window.size() < 2) return std::nan("");

  MheProblem p;
  p.window = ctrl.window;
  p.prior_state = ctrl.window_start_estimate;
  p.prior_std = config.mhe.prior_std;
  p.params = ctrl.estimated_params;
  p.estimate = config.mhe.estimate;
  p.param_prior_std = config.mhe.param_prior_std;
  try {
    const MheEstimate est = solve_mhe(p, mhe_pack(p.prior_state, p.params, p), config.mhe.lm);
    est.params.validate();
    ctrl.estimate = est.state;
    ctrl.estimated_params = est.params;
    // Next window starts one entry later once it is full.
    ctrl.window_start_estimate =
        (slid || static_cast<int>(ctrl.window.size()) == config.mhe.window) &&
                est.trajectory.size() > 1
            ? est.trajectory[1]
            : est.initial_state;
    return est.final_cost;
  } catch (const std::exception&) {
    ctrl.estimate = advance(previous, ctrl.last_control, ctrl.estimated_params,
                            std::clamp(last_dt, 1e-3, 1.0), config.execution_substep);
    return std::nan("");
  }
}

}  // namespace

TickLog tick(const TerrainWorld& world, ControllerState& ctrl, const WorldModel& model,
             const PlannerConfig& config) {
  if (ctrl.done) throw DomainError("episode already finished");
  TickLog log;
  log.tick = ctrl.tick;
  log.truth_before = ctrl.truth;
  const std::uint64_t tick_seed = mix_seed(ctrl.seed, static_cast<std::uint64_t>(ctrl.tick));

  const double gx = config.goal.x - ctrl.truth.x;
  const double gy = config.goal.y - ctrl.truth.y;
  if (std::hypot(gx, gy) <= config.goal_radius) {
    ctrl.done = true;
    ctrl.success = true;
    log.estimate = ctrl.estimate;
    log.mhe_cost = std::nan("");
    return log;
  }

  // (1) measurements, (2) estimator
  const double last_dt = ctrl.tick == 0 ? kBaseDt : throttle_to_dt(ctrl.last_control.throttle());
  const Measurement m = measure(ctrl.truth, ctrl.last_control, ctrl.true_params, ctrl.time,
                                mix_seed(tick_seed, 1), config.noise);
  log.mhe_cost = refresh_estimate(ctrl, m, config, last_dt);
  log.estimate = ctrl.estimate;

  // (3) steering with the shifted throttle plan, (4) throttle with the new steering
  const int h = config.horizon;
  const Eigen::VectorXd obs = observe(world, ctrl.truth, mix_seed(tick_seed, 2), config.observation);
  std::vector<double> throttle = shifted(ctrl.prev_throttle, h, config.initial_throttle);
  std::vector<double> steering = shifted(ctrl.prev_steering, h, 0.0);
  VehicleState plan_state = ctrl.estimate;
  plan_state.v = std::max(0.0, plan_state.v);
  plan_state.sigma = std::max(kSigmaMin, plan_state.sigma);
  try {
    for (int round = 0; round < config.alternations; ++round) {
      const auto r = static_cast<std::uint64_t>(round);
      SteeringPlan sp = plan_steering(plan_state, obs, throttle, model, ctrl.estimated_params,
                                      config, mix_seed(tick_seed, 10 + 2 * r), steering);
      steering = std::move(sp.steering);
      log.plan.expected_return = sp.expected_return;
      ThrottlePlan tp = plan_throttle(plan_state, obs, steering, model, ctrl.estimated_params,
                                      config, mix_seed(tick_seed, 11 + 2 * r), throttle);
      throttle = std::move(tp.throttle);
    }
    const Matrix actions = action_rows(steering, throttle);
    log.plan.uncertainty = model.uncertainty(plan_state, obs, {actions}).front();
    const auto mean = model.mean_predictions(plan_state, obs, {actions}).front();
    log.plan.expected_return =
        -steering_objective(plan_state, steering, throttle, mean, ctrl.estimated_params, config);
    log.plan.rollout = rollout_sequences(plan_state, steering, throttle, ctrl.estimated_params);
  } catch (const std::exception&) {
    log.planning_failed = true;
    steering.assign(static_cast<std::size_t>(h), 0.0);
    throttle.assign(static_cast<std::size_t>(h), 0.0);
    log.plan = {};
  }
  log.plan.steering_seq = steering;
  log.plan.throttle_seq = throttle;

  // (5) execute only the first action
  const ControlInput u(steering.front(), throttle.front());
  const double dt = throttle_to_dt(u.throttle());
  const int substeps = std::max(1, static_cast<int>(std::ceil(dt / config.execution_substep - 1e-9)));
  const double h_sub = dt / substeps;
  for (int k = 0; k < substeps; ++k) {
    ctrl.truth.phi = world.slope_at(ctrl.truth.x, ctrl.truth.y);
    ctrl.truth = step_rk4(ctrl.truth, u, ctrl.true_params, h_sub);
    const auto label = world.label_at(ctrl.truth.x, ctrl.truth.y);
    if (!label || config.event.is_collision(*label)) {
      ctrl.collided = true;
      ctrl.done = true;
      break;
    }
  }
  ctrl.truth.phi = world.slope_at(ctrl.truth.x, ctrl.truth.y);
  ctrl.window.back().control = u;
  ctrl.last_control = u;
  ctrl.prev_steering = steering;
  ctrl.prev_throttle = throttle;
  ctrl.time += dt;
  ctrl.tick += 1;

  // (6) log
  log.executed = u;
  log.executed_index = 0;
  log.dt = dt;
  log.sigma = log.plan.uncertainty.empty() ? kSigmaMin : log.plan.uncertainty.front().sigma;
  log.expected_return = log.plan.expected_return;
  return log;
}

EpisodeResult run_episode(const TerrainWorld& world, const EpisodeSetup& setup,
                          const WorldModel& model, const PlannerConfig& config) {
  PlannerConfig cfg = config;
  cfg.goal = setup.goal;
  ControllerState ctrl = start_episode(setup, cfg);
  EpisodeResult result;
  while (!ctrl.done && ctrl.tick < cfg.max_ticks) {
    result.ticks.push_back(tick(world, ctrl, model, cfg));
  }
  if (!ctrl.done &&
      std::hypot(cfg.goal.x - ctrl.truth.x, cfg.goal.y - ctrl.truth.y) <= cfg.goal_radius) {
    ctrl.success = true;
  }

  EpisodeMetrics& mtr = result.metrics;
  mtr.success = ctrl.success && !ctrl.collided;
  mtr.collision_events = ctrl.collided ? 1 : 0;
  std::vector<double> speeds;
  double sigma_sum = 0.0;
  double ret_sum = 0.0;
  for (std::size_t i = 0; i < result.ticks.size(); ++i) {
    const TickLog& t = result.ticks[i];
    if (!t.executed) continue;
    const VehicleState& after =
        i + 1 < result.ticks.size() ? result.ticks[i + 1].truth_before : ctrl.truth;
    speeds.push_back(0.5 * (t.truth_before.v + after.v));
    sigma_sum += t.sigma;
    ret_sum += t.expected_return;
  }
  mtr.ticks = static_cast<int>(speeds.size());
  if (!speeds.empty()) {
    const double n = static_cast<double>(speeds.size());
    mtr.mean_speed = std::accumulate(speeds.begin(), speeds.end(), 0.0) / n;
    double var = 0.0;
    for (double s : speeds) var += (s - mtr.mean_speed) * (s - mtr.mean_speed);
    mtr.speed_variance = var / n;
    mtr.mean_sigma = sigma_sum / n;
    mtr.expected_return_avg = ret_sum / n;
  }
  return result;
}

const std::vector<std::string>& tick_header() {
  static const std::vector<std::string> h = {"tick",     "x",     "y",      "psi",
                                             "v",        "delta", "throttle", "dt",
                                             "sigma",    "return", "mhe_cost"};
  return h;
}

std::vector<std::vector<double>> tick_rows(const EpisodeResult& result) {
  std::vector<std::vector<double>> rows;
  for (const TickLog& t : result.ticks) {
    if (!t.executed) continue;
    rows.push_back({static_cast<double>(t.tick), t.truth_before.x, t.truth_before.y,
                    t.truth_before.psi, t.truth_before.v, t.executed->delta(),
                    t.executed->throttle(), t.dt, t.sigma, t.expected_return, t.mhe_cost});
  }
  return rows;
}

}  // namespace offroad

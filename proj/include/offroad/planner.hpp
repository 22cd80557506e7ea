#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "offroad/estimator.hpp"
#include "offroad/optim.hpp"
#include "offroad/reward.hpp"
#include "offroad/uncertainty.hpp"
#include "offroad/worldsim.hpp"

namespace offroad {

// What the planner needs from the predictive model. Candidates are H x 3
// action blocks (delta, throttle, dt) scored from one observation. The
// planning state is passed along for oracle models; learned models ignore it.
class WorldModel {
 public:
  virtual ~WorldModel() = default;
  virtual std::vector<std::vector<StepPrediction>> mean_predictions(
      const VehicleState& state, const Eigen::VectorXd& obs,
      const std::vector<Matrix>& candidates) const = 0;
  virtual std::vector<UncertaintyTrace> uncertainty(const VehicleState& state,
                                                    const Eigen::VectorXd& obs,
                                                    const std::vector<Matrix>& candidates) const = 0;
};

class EnsembleModel : public WorldModel {
 public:
  EnsembleModel(std::vector<ModelWeights> members, UncertaintyWeights weights = {},
                Distance distance = Distance::kKl);

  std::vector<EnsembleOutput> evaluate(const Eigen::VectorXd& obs,
                                       const std::vector<Matrix>& candidates) const;
  std::vector<std::vector<StepPrediction>> mean_predictions(
      const VehicleState& state, const Eigen::VectorXd& obs,
      const std::vector<Matrix>& candidates) const override;
  std::vector<UncertaintyTrace> uncertainty(const VehicleState& state, const Eigen::VectorXd& obs,
                                            const std::vector<Matrix>& candidates) const override;

  const std::vector<ModelWeights>& members() const { return members_; }

 private:
  std::vector<ModelWeights> members_;
  UncertaintyWeights weights_;
  Distance distance_;
};

enum class OptimizerKind { kCem, kCma };

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::kCem;
  CemConfig cem;
  CmaConfig cma;
  long budget = 100000;
};

struct MheSettings {
  int window = 20;
  ParamFlags estimate;
  LmConfig lm;
  std::array<double, 6> prior_std{1.0, 1.0, 0.2, 0.5, 0.05, 1.0};
  double param_prior_std = 0.1;
};

struct PlannerConfig {
  int horizon = 10;
  OptimizerSettings steering;
  OptimizerSettings throttle;
  EventRewardConfig event;
  MpcRewardConfig mpc;
  int replan_every = 1;
  Point2 goal;
  double goal_radius = 1.0;
  int max_ticks = 60;
  // Steering/throttle alternation rounds per tick; 1 is the plain
  // steering-then-throttle order.
  int alternations = 1;
  double initial_throttle = 0.5;
  SensorNoise noise;
  MheSettings mhe;
  ObservationConfig observation;
  double execution_substep = 0.05;  // s, collision checking resolution

  PlannerConfig();
  void validate() const;
};

struct SteeringPlan {
  std::vector<double> steering;
  double expected_return = 0.0;
};

struct ThrottlePlan {
  std::vector<double> throttle;
  std::vector<double> sigma;
  double mpc_value = 0.0;  // cumulative discounted MPC reward
};

struct PlanResult {
  std::vector<double> steering_seq;
  std::vector<double> throttle_seq;
  double expected_return = 0.0;
  UncertaintyTrace uncertainty;
  std::vector<VehicleState> rollout;
};

// Action block for given steering/throttle sequences.
Matrix action_rows(std::span<const double> steering, std::span<const double> throttle);

// Event cost objective (to minimize) of one candidate.
double steering_objective(const VehicleState& state, std::span<const double> steering,
                          std::span<const double> throttle, std::span<const StepPrediction> mean,
                          const ModelParams& params, const PlannerConfig& config);

SteeringPlan plan_steering(const VehicleState& state, const Eigen::VectorXd& obs,
                           std::span<const double> throttle_seq, const WorldModel& model,
                           const ModelParams& params, const PlannerConfig& config,
                           std::uint64_t seed, std::span<const double> warm_start = {});

ThrottlePlan plan_throttle(const VehicleState& state, const Eigen::VectorXd& obs,
                           std::span<const double> steering_seq, const WorldModel& model,
                           const ModelParams& params, const PlannerConfig& config,
                           std::uint64_t seed, std::span<const double> warm_start = {});

struct EpisodeSetup {
  VehicleState start;
  Point2 goal;
  ModelParams true_params;
  std::uint64_t seed = 0;
};

// Everything the controller carries between ticks, plus the simulated truth.
struct ControllerState {
  VehicleState truth;
  ModelParams true_params;
  VehicleState estimate;
  ModelParams estimated_params;
  VehicleState window_start_estimate;
  std::vector<WindowEntry> window;
  std::vector<double> prev_steering;
  std::vector<double> prev_throttle;
  ControlInput last_control;
  double time = 0.0;
  int tick = 0;
  bool done = false;
  bool success = false;
  bool collided = false;
  std::uint64_t seed = 0;
};

ControllerState start_episode(const EpisodeSetup& setup, const PlannerConfig& config);

struct TickLog {
  int tick = 0;
  VehicleState truth_before;
  VehicleState estimate;
  std::optional<ControlInput> executed;  // empty when the tick ended the episode
  int executed_index = 0;                // always 0
  double dt = 0.0;
  double sigma = 0.0;
  double expected_return = 0.0;
  double mhe_cost = 0.0;
  bool planning_failed = false;
  PlanResult plan;
};

TickLog tick(const TerrainWorld& world, ControllerState& ctrl, const WorldModel& model,
             const PlannerConfig& config);

struct EpisodeMetrics {
  bool success = false;
  int ticks = 0;
  double mean_speed = 0.0;
  double speed_variance = 0.0;
  int collision_events = 0;
  double mean_sigma = 0.0;
  double expected_return_avg = 0.0;
};

struct EpisodeResult {
  EpisodeMetrics metrics;
  std::vector<TickLog> ticks;
};

EpisodeResult run_episode(const TerrainWorld& world, const EpisodeSetup& setup,
                          const WorldModel& model, const PlannerConfig& config);

// Per-tick CSV rows (header: tick,x,y,psi,v,delta,throttle,dt,sigma,return,mhe_cost).
std::vector<std::vector<double>> tick_rows(const EpisodeResult& result);
const std::vector<std::string>& tick_header();

}  // namespace offroad

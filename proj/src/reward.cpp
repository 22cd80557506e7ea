#include "offroad/reward.hpp"

#include <algorithm>
#include <cmath>

namespace offroad {

void EventRewardConfig::validate() const {
  if (!(alpha_pos >= 0.0) || !(alpha_bum >= 0.0)) throw DomainError("reward alphas must be >= 0");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw DomainError("discount must be in (0, 1]");
  for (const auto* set : {&collision_classes, &bumpy_classes}) {
    for (int c : *set) {
      if (c < 0 || c >= kNumEvents) throw DomainError("reward class index out of range");
    }
  }
}

bool EventRewardConfig::is_collision(int event) const {
  return std::find(collision_classes.begin(), collision_classes.end(), event) !=
         collision_classes.end();
}

void MpcRewardConfig::validate() const {
  if (!(beta_sigma >= 0.0) || !(beta_v >= 0.0)) throw DomainError("MPC betas must be >= 0");
  if (!(sigma_min > 0.0)) throw DomainError("sigma_min must be > 0");
}

double bearing_error(double predicted_heading, Point2 position, Point2 goal) {
  const double dx = goal.x - position.x;
  const double dy = goal.y - position.y;
  if (dx == 0.0 && dy == 0.0) throw DegenerateGeometry("position coincides with the goal");
  return std::abs(wrap_angle(predicted_heading - std::atan2(dy, dx)));
}

double step_cost(const StepPrediction& pred, double predicted_heading, Point2 position, Point2 goal,
                 const EventRewardConfig& config) {
  double e_coll = 0.0;
  for (int c : config.collision_classes) e_coll += pred.event_probs[static_cast<std::size_t>(c)];
  double e_bum = 0.0;
  for (int c : config.bumpy_classes) e_bum += pred.event_probs[static_cast<std::size_t>(c)];
  e_coll = std::clamp(e_coll, 0.0, 1.0);
  e_bum = std::clamp(e_bum, 0.0, 1.0);
  double heading_term = 0.0;
  try {
    heading_term = bearing_error(predicted_heading, position, goal) / kPi;
  } catch (const DegenerateGeometry&) {
    heading_term = 0.0;  // at the goal
  }
  const double r_pos = (1.0 - e_coll) * heading_term + e_coll;
  const double r_bum = (1.0 - e_coll) * e_bum + e_coll;
  return e_coll + config.alpha_pos * r_pos + config.alpha_bum * r_bum;
}

double step_cost(const StepPrediction& pred, Point2 position, Point2 goal,
                 const EventRewardConfig& config) {
  return step_cost(pred, pred.bearing_mu, position, goal, config);
}

double trajectory_return(std::span<const double> costs, double gamma) {
  if (costs.empty()) throw DomainError("trajectory_return needs at least one step");
  double total = 0.0;
  double discount = 1.0;
  for (double c : costs) {
    total += discount * c;
    discount *= gamma;
  }
  return -total;
}

double mpc_reward(double sigma, double v, const MpcRewardConfig& config) {
  if (!(v >= 0.0)) throw DomainError("speed must be >= 0");
  const double s = std::max(sigma, config.sigma_min);
  return config.beta_sigma / (s * s) + config.beta_v * v * v;
}

}  // namespace offroad

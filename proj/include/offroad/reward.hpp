#pragma once

#include <array>
#include <span>
#include <vector>

#include "offroad/seqmodel.hpp"
#include "offroad/vehicle.hpp"

namespace offroad {

struct EventRewardConfig {
  double alpha_pos = 1.0;
  double alpha_bum = 0.5;
  double gamma = 0.99;
  std::vector<int> collision_classes = {static_cast<int>(Event::kTree),
                                        static_cast<int>(Event::kOtherObstacles),
                                        static_cast<int>(Event::kHuman)};
  std::vector<int> bumpy_classes = {static_cast<int>(Event::kMud), static_cast<int>(Event::kJump),
                                    static_cast<int>(Event::kWetLeaves),
                                    static_cast<int>(Event::kWaterhole)};

  void validate() const;
  bool is_collision(int event) const;
};

struct MpcRewardConfig {
  double beta_sigma = 10.0;
  double beta_v = 1.0;
  double sigma_min = kSigmaMin;

  void validate() const;
};

class DegenerateGeometry : public DomainError {
 public:
  using DomainError::DomainError;
};

// |wrap(heading - atan2(goal - position))| in [0, pi].
double bearing_error(double predicted_heading, Point2 position, Point2 goal);

// Per-step penalty: e_coll + alpha_pos * R_pos + alpha_bum * R_bum.
double step_cost(const StepPrediction& pred, double predicted_heading, Point2 position, Point2 goal,
                 const EventRewardConfig& config);

// Uses pred.bearing_mu as the absolute predicted heading.
double step_cost(const StepPrediction& pred, Point2 position, Point2 goal,
                 const EventRewardConfig& config);

// -sum_t gamma^t cost_t.
double trajectory_return(std::span<const double> costs, double gamma);

// beta_sigma / max(sigma, sigma_min)^2 + beta_v * v^2.
double mpc_reward(double sigma, double v, const MpcRewardConfig& config);

}  // namespace offroad

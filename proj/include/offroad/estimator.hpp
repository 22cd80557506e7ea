#pragma once

#include <Eigen/Core>
#include <array>
#include <optional>
#include <vector>

#include "offroad/vehicle.hpp"

namespace offroad {

struct ScalarReading {
  double value = 0.0;
  double std = 1.0;
};

struct GpsFix {
  double x = 0.0;
  double y = 0.0;
  double std = 1.0;
};

// Any field may be absent.
struct Measurement {
  double t = 0.0;
  std::optional<GpsFix> gps_xy;
  std::optional<ScalarReading> gps_psi;
  // Longitudinal, m/s^2, under the control of the interval ending at t.
  std::optional<ScalarReading> accel;
  std::optional<ScalarReading> speed;  // odometry, m/s
};

// `control` is applied from this measurement's time to the next one's.
struct WindowEntry {
  Measurement measurement;
  ControlInput control;
};

struct ParamFlags {
  bool phi = true;
  bool cr0 = true;
  bool cr2 = true;
  int count() const { return int{phi} + int{cr0} + int{cr2}; }
};

struct MheProblem {
  std::vector<WindowEntry> window;
  VehicleState prior_state;
  std::array<double, 6> prior_std{1.0, 1.0, 0.2, 0.5, 0.05, 1.0};
  // Nominal parameters; enabled ones act as weak priors and as the values
  // held fixed when disabled.
  ModelParams params;
  ParamFlags estimate;
  double param_prior_std = 1.0;

  void validate() const;
  int decision_size() const { return 6 + estimate.count(); }
};

struct LmConfig {
  int max_iters = 50;
  double tol = 1e-12;
  double damping = 1e-3;
};

struct MheEstimate {
  VehicleState state;          // window end
  VehicleState initial_state;  // window start
  ModelParams params;
  std::vector<VehicleState> trajectory;  // one per window entry
  double final_cost = 0.0;                // 0.5 * |residual|^2
  int iterations = 0;
  std::vector<double> cost_trace;  // cost after each accepted step, starting with the initial cost
};

// Decision vector: [x, y, psi, v, phi, sigma] of the window-initial state,
// then the enabled parameters in the order phi, cr0, cr2. The rollout slope
// is the phi parameter when enabled, else the prior slope.
Eigen::VectorXd mhe_residual(const Eigen::VectorXd& candidate, const MheProblem& problem);

Eigen::VectorXd mhe_pack(const VehicleState& initial, const ModelParams& params,
                         const MheProblem& problem);

// Levenberg-Marquardt with central-difference Jacobians.
MheEstimate solve_mhe(const MheProblem& problem, const Eigen::VectorXd& init,
                      const LmConfig& config = {});

}  // namespace offroad

#pragma once

#include <array>
#include <span>
#include <vector>

#include "offroad/common.hpp"

namespace offroad {

inline constexpr double kSigmaMin = 1e-3;
inline constexpr double kDeltaMax = 0.35;

// [X, Y, psi, V, phi, sigma]
struct VehicleState {
  double x = 0.0;      // m, east
  double y = 0.0;      // m, north
  double psi = 0.0;    // rad, (-pi, pi]
  double v = 0.0;      // m/s, >= 0
  double phi = 0.0;    // rad, road slope
  double sigma = kSigmaMin;

  std::array<double, 6> as_array() const { return {x, y, psi, v, phi, sigma}; }
  static VehicleState from_array(const std::array<double, 6>& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5]};
  }
  bool operator==(const VehicleState&) const = default;
};

using StateDerivative = std::array<double, 6>;

// Steering angle and throttle; bounds are checked on construction.
class ControlInput {
 public:
  ControlInput() = default;
  ControlInput(double delta, double throttle, double delta_max = kDeltaMax);

  double delta() const { return delta_; }
  double throttle() const { return throttle_; }
  bool operator==(const ControlInput&) const = default;

 private:
  double delta_ = 0.0;
  double throttle_ = 0.0;
};

struct ModelParams {
  double c1 = 0.5;
  double c2 = 1.69;
  double cm1 = 12.0;
  double cm2 = 2.5;
  double cr2 = 0.15;
  double cr0 = 0.7;
  double g = 9.81;
  double mass_scale = 1.0;

  // Throws DomainError unless every field is finite and strictly positive.
  void validate() const;
  bool operator==(const ModelParams&) const = default;
};

StateDerivative derivative(const VehicleState& state, const ControlInput& input,
                           const ModelParams& params);

// Classical RK4 step followed by the v >= 0 clamp and heading wrap.
VehicleState step_rk4(const VehicleState& state, const ControlInput& input,
                      const ModelParams& params, double dt);

inline constexpr double kDefaultSubstep = 0.05;

// Covers dt with ceil(dt / max_step) equal RK4 steps.
VehicleState advance(const VehicleState& state, const ControlInput& input,
                     const ModelParams& params, double dt, double max_step = kDefaultSubstep);

// Returns H+1 states, the first being `state`. max_step = 0 takes one RK4
// step per entry; otherwise each entry is covered by advance().
std::vector<VehicleState> rollout(const VehicleState& state,
                                  std::span<const ControlInput> inputs,
                                  const ModelParams& params,
                                  std::span<const double> dts, double max_step = 0.0);

// Time dilation: D=0 -> 0.2 s (1X), D=0.5 -> 0.4 s (2X), D=1 -> 0.6 s (3X).
double throttle_to_dt(double throttle);

inline constexpr double kBaseDt = 0.2;
inline constexpr double kMaxDt = 0.6;

}  // namespace offroad

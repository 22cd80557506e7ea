#include "offroad/vehicle.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace offroad {

namespace {

void require_finite_state(const VehicleState& s) {
  for (double c : s.as_array()) {
    if (!std::isfinite(c)) throw DomainError("vehicle state has a non-finite component");
  }
}

VehicleState add_scaled(const VehicleState& s, const StateDerivative& d, double h) {
  return {s.x + h * d[0], s.y + h * d[1], s.psi + h * d[2],
          s.v + h * d[3], s.phi + h * d[4], s.sigma + h * d[5]};
}

}  // namespace

ControlInput::ControlInput(double delta, double throttle, double delta_max)
    : delta_(delta), throttle_(throttle) {
  if (!(std::abs(delta) <= delta_max)) {
    throw DomainError("steering " + std::to_string(delta) + " outside [-" +
                      std::to_string(delta_max) + ", " + std::to_string(delta_max) + "]");
  }
  if (!(throttle >= 0.0 && throttle <= 1.0)) {
    throw DomainError("throttle " + std::to_string(throttle) + " outside [0, 1]");
  }
}

void ModelParams::validate() const {
  for (double p : {c1, c2, cm1, cm2, cr2, cr0, g, mass_scale}) {
    if (!std::isfinite(p) || p <= 0.0) {
      throw DomainError("model parameters must be finite and strictly positive");
    }
  }
}

StateDerivative derivative(const VehicleState& s, const ControlInput& u,
                           const ModelParams& p) {
  require_finite_state(s);
  for (double c : {p.c1, p.c2, p.cm1, p.cm2, p.cr2, p.cr0, p.g, p.mass_scale}) {
    if (!std::isfinite(c)) throw DomainError("non-finite model parameter");
  }
  const double delta = u.delta();
  const double beta = s.psi + p.c1 * delta;
  const double v = s.v;
  const double vd = v * delta;
  double v_dot = (p.cm1 - p.cm2 * v) * u.throttle() -
                 (p.cr2 * v * v + p.cr0 + vd * vd * p.c1 * p.c2 * p.c2 +
                  p.mass_scale * p.g * std::sin(s.phi));
  // Static friction: a car at rest does not start rolling backwards.
  if (v <= 0.0 && v_dot < 0.0) v_dot = 0.0;
  return {v * std::cos(beta), v * std::sin(beta), vd * p.c2, v_dot, 0.0, 0.0};
}

VehicleState step_rk4(const VehicleState& s, const ControlInput& u,
                      const ModelParams& p, double dt) {
  if (!(dt > 0.0 && dt <= 1.0)) throw DomainError("dt must be in (0, 1] s");
  auto stage = [&](const VehicleState& at, int idx) {
    StateDerivative d;
    try {
      d = derivative(at, u, p);
    } catch (const DomainError& e) {
      throw IntegrationError(std::string("RK4 stage ") + std::to_string(idx) + ": " + e.what(), idx);
    }
    for (double c : d) {
      if (!std::isfinite(c)) {
        throw IntegrationError("non-finite derivative at RK4 stage " + std::to_string(idx), idx);
      }
    }
    return d;
  };
  const StateDerivative k1 = stage(s, 1);
  const StateDerivative k2 = stage(add_scaled(s, k1, 0.5 * dt), 2);
  const StateDerivative k3 = stage(add_scaled(s, k2, 0.5 * dt), 3);
  const StateDerivative k4 = stage(add_scaled(s, k3, dt), 4);
  auto a = s.as_array();
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
  VehicleState out = VehicleState::from_array(a);
  out.v = std::max(out.v, 0.0);
  out.psi = wrap_angle(out.psi);
  out.sigma = std::max(out.sigma, kSigmaMin);
  return out;
}

std::vector<VehicleState> rollout(const VehicleState& state,
                                  std::span<const ControlInput> inputs,
                                  const ModelParams& params,
                                  std::span<const double> dts, double max_step) {
  if (inputs.size() != dts.size()) throw DomainError("rollout: inputs and dts differ in length");
  std::vector<VehicleState> out;
  out.reserve(inputs.size() + 1);
  out.push_back(state);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    out.push_back(max_step > 0.0 ? advance(out.back(), inputs[i], params, dts[i], max_step)
                                 : step_rk4(out.back(), inputs[i], params, dts[i]));
  }
  return out;
}

VehicleState advance(const VehicleState& state, const ControlInput& input,
                     const ModelParams& params, double dt, double max_step) {
  if (!(max_step > 0.0)) throw DomainError("max_step must be > 0");
  if (!(dt > 0.0 && dt <= 1.0)) throw DomainError("dt must be in (0, 1] s");
  const int n = std::max(1, static_cast<int>(std::ceil(dt / max_step - 1e-9)));
  VehicleState x = state;
  for (int i = 0; i < n; ++i) x = step_rk4(x, input, params, dt / n);
  return x;
}

double throttle_to_dt(double throttle) {
  if (!(throttle >= 0.0 && throttle <= 1.0)) throw DomainError("throttle outside [0, 1]");
  return kBaseDt + (kMaxDt - kBaseDt) * throttle;
}

}  // namespace offroad

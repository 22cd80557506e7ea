#include "offroad/estimator.hpp"

#include <Eigen/Cholesky>
#include <cmath>

namespace offroad {

namespace {

constexpr double kMinFriction = 1e-6;

struct Unpacked {
  VehicleState initial;
  ModelParams params;
};

Unpacked unpack(const Eigen::VectorXd& d, const MheProblem& p) {
  Unpacked u;
  u.initial = {d(0), d(1), d(2), d(3), d(4), d(5)};
  u.params = p.params;
  int k = 6;
  double slope = p.prior_state.phi;
  if (p.estimate.phi) slope = d(k++);
  if (p.estimate.cr0) u.params.cr0 = d(k++);
  if (p.estimate.cr2) u.params.cr2 = d(k++);
  u.params.cr0 = std::max(u.params.cr0, kMinFriction);
  u.params.cr2 = std::max(u.params.cr2, kMinFriction);
  u.initial.phi = slope;
  u.initial.sigma = std::max(u.initial.sigma, kSigmaMin);
  u.initial.v = std::max(u.initial.v, 0.0);
  return u;
}

std::vector<VehicleState> window_rollout(const Unpacked& u, const MheProblem& p) {
  std::vector<VehicleState> states;
  states.reserve(p.window.size());
  states.push_back(u.initial);
  for (std::size_t i = 0; i + 1 < p.window.size(); ++i) {
    const double dt = p.window[i + 1].measurement.t - p.window[i].measurement.t;
    states.push_back(advance(states.back(), p.window[i].control, u.params, dt));
  }
  return states;
}

double cost_of(const Eigen::VectorXd& r) { return 0.5 * r.squaredNorm(); }

}  // namespace

void MheProblem::validate() const {
  if (window.size() < 2) throw DomainError("MHE window needs at least two entries");
  for (std::size_t i = 0; i < window.size(); ++i) {
    const Measurement& m = window[i].measurement;
    if (!m.gps_xy && !m.gps_psi && !m.accel && !m.speed) {
      throw DomainError("MHE window entry " + std::to_string(i) + " has no measurement");
    }
    if (i > 0 && !(m.t > window[i - 1].measurement.t)) {
      throw DomainError("MHE timestamps must be strictly increasing");
    }
    if ((m.gps_xy && !(m.gps_xy->std > 0.0)) || (m.gps_psi && !(m.gps_psi->std > 0.0)) ||
        (m.accel && !(m.accel->std > 0.0)) || (m.speed && !(m.speed->std > 0.0))) {
      throw DomainError("measurement standard deviations must be > 0");
    }
  }
  for (double s : prior_std) {
    if (!(s > 0.0)) throw DomainError("prior standard deviations must be > 0");
  }
  if (!(param_prior_std > 0.0)) throw DomainError("parameter prior std must be > 0");
}

Eigen::VectorXd mhe_pack(const VehicleState& initial, const ModelParams& params,
                         const MheProblem& p) {
  Eigen::VectorXd d(p.decision_size());
  d << initial.x, initial.y, initial.psi, initial.v, initial.phi, initial.sigma,
      Eigen::VectorXd::Zero(p.estimate.count());
  int k = 6;
  if (p.estimate.phi) d(k++) = initial.phi;
  if (p.estimate.cr0) d(k++) = params.cr0;
  if (p.estimate.cr2) d(k++) = params.cr2;
  return d;
}

Eigen::VectorXd mhe_residual(const Eigen::VectorXd& candidate, const MheProblem& p) {
  if (candidate.size() != p.decision_size()) {
    throw DomainError("MHE decision vector has length " + std::to_string(candidate.size()) +
                      ", expected " + std::to_string(p.decision_size()));
  }
  const Unpacked u = unpack(candidate, p);
  const std::vector<VehicleState> states = window_rollout(u, p);

  std::vector<double> r;
  r.reserve(p.window.size() * 5 + 9);
  for (std::size_t i = 0; i < p.window.size(); ++i) {
    const Measurement& m = p.window[i].measurement;
    const VehicleState& s = states[i];
    if (m.gps_xy) {
      r.push_back((s.x - m.gps_xy->x) / m.gps_xy->std);
      r.push_back((s.y - m.gps_xy->y) / m.gps_xy->std);
    }
    if (m.gps_psi) r.push_back(wrap_angle(s.psi - m.gps_psi->value) / m.gps_psi->std);
    // Acceleration is read just before the control switch at t_i, so it is
    // explained by the control of the previous interval.
    if (m.accel && i > 0) {
      const double a = derivative(s, p.window[i - 1].control, u.params)[3];
      r.push_back((a - m.accel->value) / m.accel->std);
    }
    if (m.speed) r.push_back((s.v - m.speed->value) / m.speed->std);
  }
  const auto prior = p.prior_state.as_array();
  for (int k = 0; k < 6; ++k) {
    double diff = candidate(k) - prior[static_cast<std::size_t>(k)];
    if (k == 2) diff = wrap_angle(diff);
    r.push_back(diff / p.prior_std[static_cast<std::size_t>(k)]);
  }
  int k = 6;
  if (p.estimate.phi) r.push_back((candidate(k++) - p.prior_state.phi) / p.param_prior_std);
  if (p.estimate.cr0) r.push_back((candidate(k++) - p.params.cr0) / p.param_prior_std);
  if (p.estimate.cr2) r.push_back((candidate(k++) - p.params.cr2) / p.param_prior_std);
  return Eigen::Map<Eigen::VectorXd>(r.data(), static_cast<Eigen::Index>(r.size()));
}

MheEstimate solve_mhe(const MheProblem& p, const Eigen::VectorXd& init, const LmConfig& cfg) {
  p.validate();
  if (init.size() != p.decision_size()) throw DomainError("MHE init has wrong length");
  if (!init.allFinite()) throw DomainError("MHE init is not finite");
  if (cfg.max_iters < 0 || !(cfg.damping > 0.0) || !(cfg.tol >= 0.0)) {
    throw DomainError("invalid LM configuration");
  }

  constexpr double kMaxDamping = 1e16;
  const int n = p.decision_size();
  Eigen::VectorXd x = init;
  Eigen::VectorXd r = mhe_residual(x, p);
  double cost = cost_of(r);
  double lambda = cfg.damping;
  MheEstimate est;
  est.cost_trace.push_back(cost);

  for (int it = 0; it < cfg.max_iters; ++it) {
    if (cost == 0.0) break;
    Eigen::MatrixXd J(r.size(), n);
    for (int j = 0; j < n; ++j) {
      const double h = 1e-6 * std::max(1.0, std::abs(x(j)));
      Eigen::VectorXd xp = x, xm = x;
      xp(j) += h;
      xm(j) -= h;
      J.col(j) = (mhe_residual(xp, p) - mhe_residual(xm, p)) / (2.0 * h);
    }
    ++est.iterations;
    const Eigen::MatrixXd A = J.transpose() * J;
    const Eigen::VectorXd g = J.transpose() * r;
    const double diag_floor = 1e-12 * std::max(1.0, A.diagonal().maxCoeff());

    bool accepted = false;
    double decrease = 0.0;
    while (lambda <= kMaxDamping) {
      Eigen::MatrixXd Ad = A;
      for (int j = 0; j < n; ++j) Ad(j, j) += lambda * std::max(A(j, j), diag_floor);
      Eigen::LDLT<Eigen::MatrixXd> ldlt(Ad);
      Eigen::VectorXd dx;
      if (ldlt.info() == Eigen::Success) dx = -ldlt.solve(g);
      if (ldlt.info() != Eigen::Success || !dx.allFinite() || !ldlt.isPositive()) {
        lambda *= 10.0;
        continue;
      }
      const Eigen::VectorXd xn = x + dx;
      Eigen::VectorXd rn;
      try {
        rn = mhe_residual(xn, p);
      } catch (const IntegrationError&) {
        lambda *= 10.0;
        continue;
      }
      const double cn = cost_of(rn);
      if (std::isfinite(cn) && cn < cost) {
        decrease = cost - cn;
        x = xn;
        r = std::move(rn);
        cost = cn;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) {
      if (!g.allFinite() || !A.allFinite()) {
        throw EstimationFailed("normal equations are singular after maximum damping");
      }
      break;  // no descent direction left: converged
    }
    est.cost_trace.push_back(cost);
    if (decrease < cfg.tol * std::max(1.0, cost)) break;
  }

  const Unpacked u = unpack(x, p);
  est.trajectory = window_rollout(u, p);
  est.initial_state = u.initial;
  est.state = est.trajectory.back();
  est.params = u.params;
  est.final_cost = cost;
  return est;
}

}  // namespace offroad

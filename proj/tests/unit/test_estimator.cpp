#include <cmath>

#include "doctest.h"
#include "offroad/estimator.hpp"
#include "offroad/worldsim.hpp"

using namespace offroad;

namespace {

struct Scenario {
  std::vector<VehicleState> truth;
  MheProblem problem;
};

// Window of n entries at 0.2 s with a throttle pattern that excites the
// drag terms. `noise` scales the added measurement noise (0: exact data).
Scenario make_scenario(int n, const ModelParams& truth_params, double noise, std::uint64_t seed,
                       const VehicleState& start = {2.0, 3.0, 0.4, 0.8, 0.05, kSigmaMin}) {
  Scenario sc;
  Rng rng(seed);
  const SensorNoise stds;
  VehicleState x = start;
  ControlInput prev(0.0, 0.0);
  for (int i = 0; i < n; ++i) {
    Measurement m;
    m.t = 0.2 * i;
    m.gps_xy = GpsFix{x.x + noise * stds.gps_xy_std * rng.normal(),
                      x.y + noise * stds.gps_xy_std * rng.normal(), stds.gps_xy_std};
    m.gps_psi = ScalarReading{wrap_angle(x.psi + noise * stds.gps_psi_std * rng.normal()),
                              stds.gps_psi_std};
    m.accel = ScalarReading{derivative(x, prev, truth_params)[3] + noise * stds.accel_std * rng.normal(),
                            stds.accel_std};
    m.speed = ScalarReading{x.v + noise * stds.speed_std * rng.normal(), stds.speed_std};
    const double thr = (i / 4) % 2 == 0 ? 0.9 : 0.15;
    const ControlInput u(0.1 * std::sin(0.5 * i), thr);
    sc.problem.window.push_back({m, u});
    sc.truth.push_back(x);
    x = advance(x, u, truth_params, 0.2);
    prev = u;
  }
  sc.problem.prior_state = start;
  sc.problem.params = truth_params;
  return sc;
}

}  // namespace

TEST_CASE("noiseless window at the truth gives a zero residual") {
  const auto sc = make_scenario(10, ModelParams{}, 0.0, 1);
  const auto d = mhe_pack(sc.truth.front(), ModelParams{}, sc.problem);
  const Eigen::VectorXd r = mhe_residual(d, sc.problem);
  CHECK(r.size() > 0);
  CHECK(r.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("position offset shows up as predicted minus measured over std") {
  const auto sc = make_scenario(5, ModelParams{}, 0.0, 1);
  Eigen::VectorXd d = mhe_pack(sc.truth.front(), ModelParams{}, sc.problem);
  d(0) += 1.0;
  const Eigen::VectorXd r = mhe_residual(d, sc.problem);
  CHECK(r(0) == doctest::Approx(10.0).epsilon(1e-9));
}

TEST_CASE("speed-only window ignores position errors") {
  auto sc = make_scenario(8, ModelParams{}, 0.0, 2);
  for (auto& e : sc.problem.window) {
    e.measurement.gps_xy.reset();
    e.measurement.gps_psi.reset();
    e.measurement.accel.reset();
    e.measurement.speed->std = 0.5;
  }
  Eigen::VectorXd d = mhe_pack(sc.truth.front(), ModelParams{}, sc.problem);
  d(0) += 5.0;
  d(1) -= 3.0;
  const Eigen::VectorXd r = mhe_residual(d, sc.problem);
  for (int i = 0; i < 8; ++i) CHECK(std::abs(r(i)) < 1e-12);
}

TEST_CASE("residual rejects a wrongly sized decision vector") {
  const auto sc = make_scenario(4, ModelParams{}, 0.0, 1);
  CHECK_THROWS_AS(mhe_residual(Eigen::VectorXd::Zero(6), sc.problem), DomainError);
}

TEST_CASE("problem validation") {
  auto sc = make_scenario(4, ModelParams{}, 0.0, 1);
  const Eigen::VectorXd d = mhe_pack(sc.truth.front(), ModelParams{}, sc.problem);
  auto p = sc.problem;
  p.window.resize(1);
  CHECK_THROWS_AS(solve_mhe(p, d), DomainError);
  p = sc.problem;
  p.window[2].measurement.t = p.window[1].measurement.t;
  CHECK_THROWS_AS(solve_mhe(p, d), DomainError);
  p = sc.problem;
  p.window[1].measurement = Measurement{0.2};
  CHECK_THROWS_AS(solve_mhe(p, d), DomainError);
  p = sc.problem;
  p.window[1].measurement.speed->std = 0.0;
  CHECK_THROWS_AS(solve_mhe(p, d), DomainError);
  Eigen::VectorXd bad = d;
  bad(0) = std::nan("");
  CHECK_THROWS_AS(solve_mhe(sc.problem, bad), DomainError);
}

TEST_CASE("init at the truth is a fixed point") {
  const auto sc = make_scenario(20, ModelParams{}, 0.0, 3);
  const auto est =
      solve_mhe(sc.problem, mhe_pack(sc.truth.front(), ModelParams{}, sc.problem));
  CHECK(est.iterations <= 2);
  CHECK(est.final_cost <= 1e-12);
  CHECK(est.state.x == doctest::Approx(sc.truth.back().x));
  CHECK(est.trajectory.size() == 20);
}

TEST_CASE("recovers a perturbed rolling-resistance coefficient") {
  const ModelParams truth;
  auto sc = make_scenario(20, truth, 0.0, 4);
  ModelParams nominal = truth;
  nominal.cr0 = 0.5;
  sc.problem.params = nominal;
  sc.problem.estimate = {false, true, false};
  const auto est = solve_mhe(sc.problem, mhe_pack(sc.truth.front(), nominal, sc.problem));
  CHECK(std::abs(est.params.cr0 - 0.7) < 1e-3);
}

TEST_CASE("slope and rolling resistance are identified through their sum") {
  ModelParams truth;
  truth.cr0 = 0.9;
  truth.cr2 = 0.2;
  VehicleState start{0.0, 0.0, 0.1, 1.0, 0.08, kSigmaMin};
  auto sc = make_scenario(20, truth, 0.0, 5, start);
  ModelParams nominal;
  sc.problem.params = nominal;
  sc.problem.param_prior_std = 100.0;
  VehicleState guess = start;
  guess.phi = 0.0;
  sc.problem.prior_state = guess;
  const auto est = solve_mhe(sc.problem, mhe_pack(guess, nominal, sc.problem));
  // cr0 and g sin(phi) enter the dynamics only as a sum.
  const double lumped = est.params.cr0 + est.params.g * std::sin(est.state.phi);
  CHECK(lumped == doctest::Approx(0.9 + truth.g * std::sin(0.08)).epsilon(1e-3));
  CHECK(est.params.cr2 == doctest::Approx(0.2).epsilon(0.01));
}

TEST_CASE("accepted steps never increase the cost") {
  auto sc = make_scenario(20, ModelParams{}, 1.0, 6);
  VehicleState guess = sc.truth.front();
  guess.x += 0.7;
  guess.v += 0.3;
  guess.psi -= 0.1;
  ModelParams nominal;
  nominal.cr0 = 0.4;
  const auto est = solve_mhe(sc.problem, mhe_pack(guess, nominal, sc.problem));
  REQUIRE(est.cost_trace.size() >= 2);
  for (std::size_t i = 1; i < est.cost_trace.size(); ++i) {
    CHECK(est.cost_trace[i] <= est.cost_trace[i - 1]);
  }
  CHECK(est.final_cost == est.cost_trace.back());
}

TEST_CASE("noisy GPS: window-end position error is below the measurement noise") {
  double sq = 0.0;
  const int trials = 100;
  for (int seed = 0; seed < trials; ++seed) {
    auto sc = make_scenario(20, ModelParams{}, 1.0, 1000 + static_cast<std::uint64_t>(seed));
    const auto est =
        solve_mhe(sc.problem, mhe_pack(sc.problem.prior_state, ModelParams{}, sc.problem));
    const VehicleState& t = sc.truth.back();
    sq += (est.state.x - t.x) * (est.state.x - t.x) + (est.state.y - t.y) * (est.state.y - t.y);
  }
  const double rmse = std::sqrt(sq / trials);
  MESSAGE("window-end position RMSE: " << rmse);
  CHECK(rmse < 0.1);
}

TEST_CASE("estimate is shift invariant") {
  auto sc = make_scenario(15, ModelParams{}, 1.0, 7);
  const auto base = solve_mhe(sc.problem, mhe_pack(sc.problem.prior_state, ModelParams{}, sc.problem));
  auto moved = sc.problem;
  const double dx = 12.5, dy = -7.25;
  for (auto& e : moved.window) {
    e.measurement.gps_xy->x += dx;
    e.measurement.gps_xy->y += dy;
  }
  moved.prior_state.x += dx;
  moved.prior_state.y += dy;
  const auto shifted = solve_mhe(moved, mhe_pack(moved.prior_state, ModelParams{}, moved));
  CHECK(shifted.state.x - base.state.x == doctest::Approx(dx).epsilon(1e-9));
  CHECK(shifted.state.y - base.state.y == doctest::Approx(dy).epsilon(1e-9));
  CHECK(shifted.state.v == doctest::Approx(base.state.v).epsilon(1e-9));
  CHECK(shifted.params.cr0 == doctest::Approx(base.params.cr0).epsilon(1e-6));
}

TEST_CASE("disabled parameters stay at their nominal values") {
  auto sc = make_scenario(10, ModelParams{}, 1.0, 8);
  sc.problem.estimate = {false, false, false};
  const auto est = solve_mhe(sc.problem, mhe_pack(sc.problem.prior_state, ModelParams{}, sc.problem));
  CHECK(est.params == ModelParams{});
  CHECK(sc.problem.decision_size() == 6);
}

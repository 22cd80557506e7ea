#include <cmath>

#include "doctest.h"
#include "offroad/vehicle.hpp"
#include "oracles.hpp"

using namespace offroad;

TEST_CASE("derivative at v=1, D=0.5 on flat ground") {
  const VehicleState s{0, 0, 0, 1.0, 0, kSigmaMin};
  const auto d = derivative(s, ControlInput(0.0, 0.5), ModelParams{});
  CHECK(d[3] == 3.9);
  CHECK(d[0] == 1.0);
  CHECK(d[1] == 0.0);
  CHECK(d[2] == 0.0);
  CHECK(d[4] == 0.0);
  CHECK(d[5] == 0.0);
}

TEST_CASE("rest state with zero throttle stays at rest") {
  const VehicleState s{};
  const auto d = derivative(s, ControlInput(0.0, 0.0), ModelParams{});
  for (double x : d) CHECK(x == 0.0);
  for (double dt : {0.01, 0.2, 0.6, 1.0}) {
    CHECK(step_rk4(s, ControlInput(0.0, 0.0), ModelParams{}, dt) == s);
  }
}

TEST_CASE("yaw rate is v * delta * c2") {
  const VehicleState s{0, 0, 0, 2.0, 0, kSigmaMin};
  const auto d = derivative(s, ControlInput(0.1, 0.3), ModelParams{});
  CHECK(d[2] == doctest::Approx(0.338).epsilon(1e-15));
}

TEST_CASE("slope adds -M g sin(phi)") {
  VehicleState s{0, 0, 0, 1.0, 0.1, kSigmaMin};
  const auto flat = derivative({0, 0, 0, 1.0, 0, kSigmaMin}, ControlInput(0, 0.5), ModelParams{});
  const auto hill = derivative(s, ControlInput(0, 0.5), ModelParams{});
  CHECK(flat[3] - hill[3] == doctest::Approx(9.81 * std::sin(0.1)));
}

TEST_CASE("control input bounds") {
  CHECK_THROWS_AS(ControlInput(0.36, 0.5), DomainError);
  CHECK_THROWS_AS(ControlInput(-0.36, 0.5), DomainError);
  CHECK_THROWS_AS(ControlInput(0.0, -0.01), DomainError);
  CHECK_THROWS_AS(ControlInput(0.0, 1.01), DomainError);
  CHECK_THROWS_AS(ControlInput(std::nan(""), 0.5), DomainError);
  CHECK_NOTHROW(ControlInput(0.35, 1.0));
  CHECK_NOTHROW(ControlInput(-0.35, 0.0));
}

TEST_CASE("parameters must be finite and positive") {
  ModelParams p;
  CHECK_NOTHROW(p.validate());
  p.cr0 = 0.0;
  CHECK_THROWS_AS(p.validate(), DomainError);
  p = ModelParams{};
  p.g = INFINITY;
  CHECK_THROWS_AS(derivative({}, ControlInput(0, 0), p), DomainError);
  CHECK_THROWS_AS(derivative({0, 0, 0, std::nan(""), 0, kSigmaMin}, ControlInput(0, 0), ModelParams{}),
                  DomainError);
}

TEST_CASE("rk4 step against a fine Euler oracle") {
  const VehicleState s{0, 0, 0, 1.0, 0, kSigmaMin};
  const ControlInput u(0.0, 0.5);
  const auto rk = step_rk4(s, u, ModelParams{}, 0.2);
  const auto ref = testing::euler_oracle(s, u, ModelParams{}, 0.2);
  CHECK(std::abs(rk.x - ref.x) < 1e-4);
  CHECK(std::abs(rk.y - ref.y) < 1e-12);
  CHECK(std::abs(rk.psi - ref.psi) < 1e-12);
  // Single-step truncation in v is about 1.2e-4 at dt = 0.2.
  CHECK(std::abs(rk.v - ref.v) < 1.5e-4);
  const auto half = step_rk4(step_rk4(s, u, ModelParams{}, 0.1), u, ModelParams{}, 0.1);
  CHECK(testing::max_abs_diff(half, ref) < 1e-4);

  const VehicleState turning{1, 2, 0.3, 1.5, 0.02, kSigmaMin};
  const ControlInput v(0.2, 0.8);
  CHECK(testing::max_abs_diff(step_rk4(turning, v, ModelParams{}, 0.05),
                              testing::euler_oracle(turning, v, ModelParams{}, 0.05)) < 1e-5);
}

TEST_CASE("rk4 per-step error shrinks about 16x when dt halves") {
  const VehicleState s{0, 0, 0.0, 1.0, 0.0, kSigmaMin};
  const ControlInput u(0.0, 0.5);
  const ModelParams p;
  // Reference from RK4 itself at a much finer step.
  auto fine = [&](double dt) {
    VehicleState x = s;
    for (int i = 0; i < 1000; ++i) x = step_rk4(x, u, p, dt / 1000);
    return x;
  };
  const double e1 = testing::max_abs_diff(step_rk4(s, u, p, 0.2), fine(0.2));
  const double e2 = testing::max_abs_diff(step_rk4(step_rk4(s, u, p, 0.1), u, p, 0.1), fine(0.2));
  const double ratio = e1 / e2;
  CHECK(ratio >= 12.0);
  CHECK(ratio <= 20.0);
}

TEST_CASE("global error drops at least 8x when dt halves") {
  const VehicleState s{0, 0, 0.0, 1.0, 0.0, kSigmaMin};
  const ControlInput u(0.15, 0.7);
  const ModelParams p;
  auto run = [&](double dt, int n) {
    VehicleState x = s;
    for (int i = 0; i < n; ++i) x = step_rk4(x, u, p, dt);
    return x;
  };
  const auto ref = run(0.2 / 256, 10 * 256);
  const double e1 = testing::max_abs_diff(run(0.2, 10), ref);
  const double e2 = testing::max_abs_diff(run(0.1, 20), ref);
  CHECK(e1 / e2 >= 8.0);
}

TEST_CASE("step_rk4 rejects bad dt") {
  const VehicleState s{};
  CHECK_THROWS_AS(step_rk4(s, ControlInput(0, 0), ModelParams{}, 0.0), DomainError);
  CHECK_THROWS_AS(step_rk4(s, ControlInput(0, 0), ModelParams{}, 1.01), DomainError);
  CHECK_NOTHROW(step_rk4(s, ControlInput(0, 0), ModelParams{}, 1.0));
}

TEST_CASE("non-finite stage raises an integration error") {
  ModelParams p;
  p.cm1 = 1e308;
  const VehicleState s{0, 0, 0, 1.0, 0, kSigmaMin};
  try {
    step_rk4(s, ControlInput(0, 1.0), p, 1.0);
    FAIL("expected IntegrationError");
  } catch (const IntegrationError& e) {
    CHECK(e.stage() >= 1);
    CHECK(e.stage() <= 4);
  }
}

TEST_CASE("rollout with no inputs returns the initial state") {
  const VehicleState s{1, 2, 0.5, 1.0, 0, kSigmaMin};
  const auto r = rollout(s, {}, ModelParams{}, {});
  REQUIRE(r.size() == 1);
  CHECK(r[0] == s);
}

TEST_CASE("rollout length mismatch") {
  const std::vector<ControlInput> u(3, ControlInput(0, 0.5));
  const std::vector<double> dts(2, 0.2);
  CHECK_THROWS_AS(rollout({}, u, ModelParams{}, dts), DomainError);
}

TEST_CASE("straight driving keeps y and heading exactly") {
  const VehicleState s{0, 0, 0, 0.5, 0, kSigmaMin};
  const std::vector<ControlInput> u(30, ControlInput(0.0, 0.9));
  const std::vector<double> dts(30, 0.2);
  const auto r = rollout(s, u, ModelParams{}, dts);
  REQUIRE(r.size() == 31);
  CHECK(r.front() == s);
  for (const auto& x : r) {
    CHECK(x.y == 0.0);
    CHECK(x.psi == 0.0);
  }
  CHECK(r.back().x > r.front().x);
}

TEST_CASE("zero steering preserves an arbitrary initial heading") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const double psi = rng.uniform(-3.0, 3.0);
    const VehicleState s{0, 0, psi, rng.uniform(0, 3), 0, kSigmaMin};
    const std::vector<ControlInput> u(10, ControlInput(0.0, rng.uniform()));
    const std::vector<double> dts(10, 0.3);
    for (const auto& x : rollout(s, u, ModelParams{}, dts)) CHECK(x.psi == psi);
  }
}

TEST_CASE("constant steering turns monotonically and wraps through pi") {
  // D holding v at 1 m/s, including the steering drag term.
  const ModelParams p;
  const double drag = 0.3 * 0.3 * p.c1 * p.c2 * p.c2;
  const double d_hold = (p.cr2 + p.cr0 + drag) / (p.cm1 - p.cm2);
  const VehicleState s{0, 0, 0, 1.0, 0, kSigmaMin};
  VehicleState x = s;
  double unwrapped = 0.0;
  bool wrapped = false;
  for (int i = 0; i < 200; ++i) {
    const VehicleState n = step_rk4(x, ControlInput(0.3, d_hold), p, 0.1);
    const double dpsi = wrap_angle(n.psi - x.psi);
    CHECK(dpsi > 0.0);
    if (n.psi < x.psi) wrapped = true;
    unwrapped += dpsi;
    CHECK(n.v == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(n.psi > -kPi);
    CHECK(n.psi <= kPi);
    x = n;
  }
  CHECK(wrapped);
  CHECK(unwrapped > 2 * kPi);
}

TEST_CASE("speed never goes negative under random inputs") {
  Rng rng(11);
  const ModelParams p;
  for (int trial = 0; trial < 10000; ++trial) {
    const VehicleState s{0, 0, rng.uniform(-kPi, kPi), rng.uniform(0, 4), rng.uniform(-0.3, 0.3),
                         kSigmaMin};
    const ControlInput u(rng.uniform(-kDeltaMax, kDeltaMax), rng.uniform());
    const VehicleState n = step_rk4(s, u, p, rng.uniform(0.01, 1.0));
    REQUIRE(n.v >= 0.0);
    REQUIRE(n.sigma >= kSigmaMin);
    REQUIRE(n.psi > -kPi);
    REQUIRE(n.psi <= kPi);
  }
}

TEST_CASE("mirror symmetry of the derivative") {
  Rng rng(5);
  const ModelParams p;
  for (int trial = 0; trial < 1000; ++trial) {
    const VehicleState s{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-kPi, kPi),
                         rng.uniform(0.01, 4), rng.uniform(-0.2, 0.2), kSigmaMin};
    const double delta = rng.uniform(-kDeltaMax, kDeltaMax);
    const double thr = rng.uniform();
    VehicleState m = s;
    m.y = -s.y;
    m.psi = -s.psi;
    const auto a = derivative(s, ControlInput(delta, thr), p);
    const auto b = derivative(m, ControlInput(-delta, thr), p);
    CHECK(b[0] == doctest::Approx(a[0]));
    CHECK(b[1] == doctest::Approx(-a[1]));
    CHECK(b[2] == doctest::Approx(-a[2]));
    CHECK(b[3] == a[3]);
  }
}

TEST_CASE("throttle to dt") {
  CHECK(throttle_to_dt(0.0) == 0.2);
  CHECK(throttle_to_dt(0.5) == 0.4);
  CHECK(throttle_to_dt(1.0) == 0.6);
  CHECK(throttle_to_dt(0.25) == doctest::Approx(0.3));
  CHECK_THROWS_AS(throttle_to_dt(-0.1), DomainError);
  CHECK_THROWS_AS(throttle_to_dt(1.1), DomainError);
  CHECK_THROWS_AS(throttle_to_dt(std::nan("")), DomainError);
}

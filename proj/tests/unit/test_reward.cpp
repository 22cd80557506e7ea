#include <cmath>

#include "doctest.h"
#include "offroad/reward.hpp"

using namespace offroad;

namespace {

StepPrediction with_probs(std::initializer_list<std::pair<Event, double>> mass) {
  StepPrediction p;
  p.event_probs.fill(0.0);
  double used = 0.0;
  for (auto [e, q] : mass) {
    p.event_probs[static_cast<std::size_t>(e)] += q;
    used += q;
  }
  p.event_probs[static_cast<std::size_t>(Event::kSmoothRoad)] += 1.0 - used;
  return p;
}

}  // namespace

TEST_CASE("bearing error") {
  CHECK(bearing_error(0.0, {0, 0}, {5, 0}) == 0.0);
  CHECK(bearing_error(0.0, {0, 0}, {-5, 0}) == doctest::Approx(kPi));
  CHECK(bearing_error(kPi / 2, {1, 1}, {4, 1}) == doctest::Approx(kPi / 2));
  CHECK(bearing_error(-3.0, {0, 0}, {-1, 0.1}) < 0.3);
  CHECK_THROWS_AS(bearing_error(0.0, {2, 3}, {2, 3}), DegenerateGeometry);
}

TEST_CASE("step cost hand cases") {
  const EventRewardConfig cfg;
  const Point2 pos{0, 0}, goal{10, 0};
  CHECK(step_cost(with_probs({}), 0.0, pos, goal, cfg) == 0.0);
  CHECK(step_cost(with_probs({{Event::kTree, 0.5}, {Event::kHuman, 0.5}}), 0.0, pos, goal, cfg) ==
        doctest::Approx(2.5));
  CHECK(step_cost(with_probs({{Event::kMud, 0.6}, {Event::kJump, 0.4}}), kPi, pos, goal, cfg) ==
        doctest::Approx(1.5));
  // Overload using the prediction's own bearing.
  StepPrediction p = with_probs({});
  p.bearing_mu = kPi;
  CHECK(step_cost(p, pos, goal, cfg) == doctest::Approx(1.0));
}

TEST_CASE("step cost at the goal drops the heading term") {
  const EventRewardConfig cfg;
  CHECK(step_cost(with_probs({}), 2.0, {1, 1}, {1, 1}, cfg) == 0.0);
}

TEST_CASE("step cost stays within its range") {
  Rng rng(1);
  const EventRewardConfig cfg;
  for (int trial = 0; trial < 10000; ++trial) {
    StepPrediction p;
    double s = 0;
    for (auto& q : p.event_probs) s += (q = rng.uniform());
    for (auto& q : p.event_probs) q /= s;
    const double c = step_cost(p, rng.uniform(-kPi, kPi), {rng.uniform(-5, 5), rng.uniform(-5, 5)},
                               {rng.uniform(-5, 5), rng.uniform(-5, 5)}, cfg);
    REQUIRE(c >= 0.0);
    REQUIRE(c <= 1.0 + cfg.alpha_pos + cfg.alpha_bum + 1e-12);
  }
}

TEST_CASE("step cost is non-decreasing in collision mass") {
  const EventRewardConfig cfg;
  for (double bear : {0.0, 1.0, kPi}) {
    for (double bum : {0.0, 0.3}) {
      double prev = -1.0;
      for (int i = 0; i <= 70; ++i) {
        const double coll = 0.01 * i;
        const double c = step_cost(with_probs({{Event::kTree, coll}, {Event::kMud, bum}}), bear,
                                   {0, 0}, {1, 0}, cfg);
        CHECK(c >= prev - 1e-15);
        prev = c;
      }
    }
  }
}

TEST_CASE("a class may be both collision and bumpy") {
  EventRewardConfig cfg;
  cfg.bumpy_classes.push_back(static_cast<int>(Event::kTree));
  CHECK_NOTHROW(cfg.validate());
  CHECK(step_cost(with_probs({{Event::kTree, 1.0}}), 0.0, {0, 0}, {1, 0}, cfg) ==
        doctest::Approx(2.5));
}

TEST_CASE("config validation") {
  EventRewardConfig e;
  e.gamma = 0.0;
  CHECK_THROWS_AS(e.validate(), DomainError);
  e = EventRewardConfig{};
  e.alpha_pos = -1;
  CHECK_THROWS_AS(e.validate(), DomainError);
  e = EventRewardConfig{};
  e.collision_classes = {9};
  CHECK_THROWS_AS(e.validate(), DomainError);
  MpcRewardConfig m;
  m.beta_v = -0.1;
  CHECK_THROWS_AS(m.validate(), DomainError);
}

TEST_CASE("trajectory return") {
  const std::vector<double> zeros(5, 0.0);
  CHECK(trajectory_return(zeros, 0.99) == 0.0);
  const std::vector<double> ones{1.0, 1.0};
  CHECK(trajectory_return(ones, 0.99) == doctest::Approx(-1.99));
  const std::vector<double> c(7, 0.3);
  CHECK(trajectory_return(c, 1.0) == doctest::Approx(-2.1));
  std::vector<double> padded{0.4, 0.2, 0.9};
  const double base = trajectory_return(padded, 1.0);
  padded.insert(padded.end(), 4, 0.0);
  CHECK(trajectory_return(padded, 1.0) == base);
  CHECK_THROWS_AS(trajectory_return({}, 0.99), DomainError);
}

TEST_CASE("mpc reward") {
  const MpcRewardConfig cfg;
  CHECK(mpc_reward(1.0, 2.0, cfg) == 14.0);
  CHECK(mpc_reward(1e-4, 0.0, cfg) == doctest::Approx(1e7));
  CHECK(mpc_reward(0.0, 0.0, cfg) == doctest::Approx(1e7));
  MpcRewardConfig speed_only;
  speed_only.beta_sigma = 0.0;
  CHECK(mpc_reward(0.3, 3.0, speed_only) == 9.0);
  double prev = INFINITY;
  for (double s = 0.002; s < 2.0; s *= 1.3) {
    const double r = mpc_reward(s, 1.0, cfg);
    CHECK(r < prev);
    prev = r;
  }
  CHECK(mpc_reward(0.5, 2.0, cfg) > mpc_reward(0.5, 1.9, cfg));
}

#include <cmath>

#include "doctest.h"
#include "offroad/optim.hpp"

using namespace offroad;

namespace {

BoxProblem box(int dim, double lo, double hi, BoxProblem::Objective f, std::uint64_t seed = 1) {
  BoxProblem p;
  p.dim = dim;
  p.lower = Eigen::VectorXd::Constant(dim, lo);
  p.upper = Eigen::VectorXd::Constant(dim, hi);
  p.objective = std::move(f);
  p.seed = seed;
  return p;
}

double sphere(const Eigen::VectorXd& x) { return x.squaredNorm(); }

double rosenbrock(const Eigen::VectorXd& x) {
  return 100.0 * std::pow(x(1) - x(0) * x(0), 2) + std::pow(1.0 - x(0), 2);
}

void check_trace_monotone(const OptimResult& r) {
  for (std::size_t i = 1; i < r.trace.size(); ++i) CHECK(r.trace[i] <= r.trace[i - 1]);
}

void check_inside(const OptimResult& r, const BoxProblem& p) {
  CHECK((r.best_x.array() >= p.lower.array()).all());
  CHECK((r.best_x.array() <= p.upper.array()).all());
}

}  // namespace

TEST_CASE("CEM sphere dim 4") {
  const auto p = box(4, -5, 5, sphere);
  CemConfig c;
  c.population = 64;
  c.iters = 50;
  const auto r = cem_minimize(p, c);
  CHECK(r.best_x.norm() < 1e-3);
  CHECK(r.iterations <= 50);
  check_trace_monotone(r);
  check_inside(r, p);
}

TEST_CASE("CEM refit with all samples as elites is the sample mean") {
  std::vector<Eigen::VectorXd> seen;
  BoxProblem p = box(3, -5, 5, nullptr);
  p.batch_objective = [&](const std::vector<Eigen::VectorXd>& xs) {
    seen = xs;
    std::vector<double> f;
    for (const auto& x : xs) f.push_back(sphere(x));
    return f;
  };
  CemConfig c;
  c.population = 16;
  c.elite_frac = 1.0;
  c.iters = 1;
  const auto r = cem_minimize(p, c);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(3);
  for (const auto& x : seen) mean += x;
  mean /= 16.0;
  CHECK((r.final_mean - mean).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("CEM boundary optimum") {
  const auto p = box(1, 0, 3, [](const Eigen::VectorXd& x) { return std::pow(x(0) - 4.0, 2); });
  const auto r = cem_minimize(p, CemConfig{});
  CHECK(std::abs(r.best_x(0) - 3.0) <= 1e-6);
}

TEST_CASE("CEM non-finite objective values are skipped") {
  const auto p = box(2, -1, 1, [](const Eigen::VectorXd& x) {
    return x(0) > 0.0 ? std::nan("") : sphere(x);
  });
  const auto r = cem_minimize(p, CemConfig{});
  CHECK(std::isfinite(r.best_f));
  CHECK(r.best_x(0) <= 0.0);
}

TEST_CASE("CEM configuration checks") {
  const auto p = box(2, -1, 1, sphere);
  CemConfig c;
  c.elite_frac = 0.0;
  CHECK_THROWS_AS(cem_minimize(p, c), DomainError);
  c = CemConfig{};
  c.population = 4;
  c.elite_frac = 0.1;
  CHECK_THROWS_AS(cem_minimize(p, c), DomainError);
  auto q = p;
  q.budget = 10;
  CHECK_THROWS_AS(cem_minimize(q, CemConfig{}), DomainError);
  q = p;
  q.lower(0) = 1.0;
  CHECK_THROWS_AS(cem_minimize(q, CemConfig{}), DomainError);
}

TEST_CASE("CEM respects the evaluation budget") {
  auto p = box(2, -1, 1, sphere);
  p.budget = 200;
  const auto r = cem_minimize(p, CemConfig{});
  CHECK(r.evaluations <= 200);
  CHECK(r.iterations == 3);
}

TEST_CASE("CMA-ES sphere dim 4") {
  auto p = box(4, -5, 5, sphere);
  p.budget = 3000;
  CmaConfig c;
  c.init_sigma = 2.0;
  const auto r = cma_minimize(p, c);
  CHECK(r.best_f < 1e-10);
  CHECK(r.evaluations <= 3000);
  check_trace_monotone(r);
  check_inside(r, p);
}

TEST_CASE("CMA-ES Rosenbrock 2-D") {
  auto p = box(2, -5, 5, rosenbrock);
  p.budget = 5000;
  CmaConfig c;
  c.init_mean = Eigen::Vector2d(-1.0, 2.0);
  c.init_sigma = 0.5;
  const auto r = cma_minimize(p, c);
  CHECK(r.best_f < 1e-6);
  CHECK(r.evaluations <= 5000);
  CHECK(r.best_x(0) == doctest::Approx(1.0).epsilon(1e-2));
  check_trace_monotone(r);
}

TEST_CASE("CMA-ES rejects degenerate settings") {
  const auto p = box(2, -1, 1, sphere);
  CmaConfig c;
  c.init_sigma = 0.0;
  CHECK_THROWS_AS(cma_minimize(p, c), DomainError);
  c = CmaConfig{};
  c.lambda = 3;
  CHECK_THROWS_AS(cma_minimize(p, c), DomainError);
  CHECK(default_cma_lambda(4) == 8);
  CHECK(default_cma_lambda(10) == 10);
}

TEST_CASE("CMA-ES stays inside a box that excludes the unconstrained optimum") {
  auto p = box(3, 1, 2, sphere);
  p.budget = 2000;
  const auto r = cma_minimize(p, CmaConfig{});
  check_inside(r, p);
  CHECK(r.best_f == doctest::Approx(3.0).epsilon(1e-3));
}

TEST_CASE("same seed gives bit-identical results") {
  auto p = box(2, -3, 3, rosenbrock, 42);
  p.budget = 2000;
  const auto a = cma_minimize(p, CmaConfig{});
  const auto b = cma_minimize(p, CmaConfig{});
  CHECK(a.best_x == b.best_x);
  CHECK(a.trace == b.trace);
  const auto c = cem_minimize(p, CemConfig{});
  const auto d = cem_minimize(p, CemConfig{});
  CHECK(c.best_x == d.best_x);
  CHECK(c.trace == d.trace);
  p.seed = 43;
  CHECK(!(cem_minimize(p, CemConfig{}).best_x == c.best_x));
}

TEST_CASE("batched and per-point objectives agree") {
  auto p = box(3, -2, 2, sphere, 9);
  const auto a = cem_minimize(p, CemConfig{});
  p.batch_objective = [](const std::vector<Eigen::VectorXd>& xs) {
    std::vector<double> f;
    for (const auto& x : xs) f.push_back(sphere(x));
    return f;
  };
  const auto b = cem_minimize(p, CemConfig{});
  CHECK(a.best_x == b.best_x);
}

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "offroad/common.hpp"

namespace offroad {

// Box-bounded minimization problem over R^dim.
struct BoxProblem {
  using Objective = std::function<double(const Eigen::VectorXd&)>;
  // Optional: scores a whole generation at once (e.g. one batched network
  // pass). Must return one value per candidate.
  using BatchObjective = std::function<std::vector<double>(const std::vector<Eigen::VectorXd>&)>;

  int dim = 0;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  Objective objective;
  BatchObjective batch_objective;
  long budget = 100000;
  std::uint64_t seed = 0;

  void validate(int population) const;
};

struct OptimResult {
  Eigen::VectorXd best_x;
  double best_f = 0.0;
  std::vector<double> trace;  // best-so-far after each iteration
  long evaluations = 0;
  int iterations = 0;
  // Search distribution at exit.
  Eigen::VectorXd final_mean;
  Eigen::VectorXd final_std;
  std::vector<std::string> warnings;
};

struct CemConfig {
  int population = 64;
  double elite_frac = 0.125;
  int iters = 50;
  Eigen::VectorXd init_mean;  // empty: box centre
  Eigen::VectorXd init_std;   // empty: quarter of the box width
  double min_std = 1e-6;
};

struct CmaConfig {
  int lambda = 0;  // 0: 4 + floor(3 ln dim)
  Eigen::VectorXd init_mean;  // empty: box centre
  double init_sigma = 0.3;
  int iters = 10000;
};

// Elite spread is measured around the pre-update mean.
OptimResult cem_minimize(const BoxProblem& problem, const CemConfig& config);
OptimResult cma_minimize(const BoxProblem& problem, const CmaConfig& config);

int default_cma_lambda(int dim);

}  // namespace offroad

#include "offroad/optim.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "offroad/common.hpp"
#include "offroad/parallel.hpp"

namespace offroad {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> evaluate(const BoxProblem& p, const std::vector<Eigen::VectorXd>& xs) {
  std::vector<double> f;
  if (p.batch_objective) {
    f = p.batch_objective(xs);
    if (f.size() != xs.size()) throw DomainError("batch objective returned the wrong count");
  } else {
    f.assign(xs.size(), kInf);
    parallel_for(xs.size(), [&](std::size_t i) { f[i] = p.objective(xs[i]); });
  }
  for (double& v : f) {
    if (!std::isfinite(v)) v = kInf;
  }
  return f;
}

std::vector<std::size_t> argsort(const std::vector<double>& f) {
  std::vector<std::size_t> idx(f.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return f[a] < f[b]; });
  return idx;
}

Eigen::VectorXd clip(const Eigen::VectorXd& x, const BoxProblem& p) {
  return x.cwiseMax(p.lower).cwiseMin(p.upper);
}

bool inside(const Eigen::VectorXd& x, const BoxProblem& p) {
  return (x.array() >= p.lower.array()).all() && (x.array() <= p.upper.array()).all();
}

}  // namespace

void BoxProblem::validate(int population) const {
  if (dim < 1) throw DomainError("problem dimension must be >= 1");
  if (lower.size() != dim || upper.size() != dim) throw DomainError("bounds do not match dimension");
  for (int i = 0; i < dim; ++i) {
    if (!(lower(i) < upper(i))) throw DomainError("lower bound must be below upper bound");
  }
  if (!objective && !batch_objective) throw DomainError("problem has no objective");
  if (budget < population) throw DomainError("budget is smaller than one population");
}

int default_cma_lambda(int dim) {
  return 4 + static_cast<int>(std::floor(3.0 * std::log(static_cast<double>(dim))));
}

OptimResult cem_minimize(const BoxProblem& p, const CemConfig& c) {
  if (c.population < 1 || !(c.elite_frac > 0.0 && c.elite_frac <= 1.0) || c.iters < 0 ||
      !(c.min_std >= 0.0)) {
    throw DomainError("invalid CEM configuration");
  }
  const int n_elite = static_cast<int>(std::floor(c.population * c.elite_frac));
  if (n_elite < 1) throw DomainError("population * elite_frac must be >= 1");
  p.validate(c.population);

  Eigen::VectorXd mean = c.init_mean.size() ? c.init_mean : Eigen::VectorXd(0.5 * (p.lower + p.upper));
  Eigen::VectorXd std = c.init_std.size() ? c.init_std : Eigen::VectorXd(0.25 * (p.upper - p.lower));
  if (mean.size() != p.dim || std.size() != p.dim) throw DomainError("CEM init has wrong dimension");
  mean = clip(mean, p);

  Rng rng(p.seed);
  OptimResult r;
  r.best_f = kInf;
  r.best_x = mean;
  for (int it = 0; it < c.iters; ++it) {
    if (r.evaluations + c.population > p.budget) break;
    std::vector<Eigen::VectorXd> xs(static_cast<std::size_t>(c.population));
    for (auto& x : xs) {
      x.resize(p.dim);
      for (int d = 0; d < p.dim; ++d) x(d) = mean(d) + std(d) * rng.normal();
      x = clip(x, p);
    }
    const std::vector<double> f = evaluate(p, xs);
    r.evaluations += c.population;
    const auto order = argsort(f);
    if (f[order[0]] < r.best_f) {
      r.best_f = f[order[0]];
      r.best_x = xs[order[0]];
    }
    Eigen::VectorXd new_mean = Eigen::VectorXd::Zero(p.dim);
    for (int e = 0; e < n_elite; ++e) new_mean += xs[order[static_cast<std::size_t>(e)]];
    new_mean /= n_elite;
    Eigen::VectorXd var = Eigen::VectorXd::Zero(p.dim);
    for (int e = 0; e < n_elite; ++e) {
      var += (xs[order[static_cast<std::size_t>(e)]] - mean).cwiseAbs2();
    }
    var /= n_elite;
    mean = new_mean;
    std = var.cwiseSqrt().cwiseMax(c.min_std);
    r.trace.push_back(r.best_f);
    ++r.iterations;
  }
  r.final_mean = mean;
  r.final_std = std;
  return r;
}

OptimResult cma_minimize(const BoxProblem& p, const CmaConfig& c) {
  const int n = p.dim;
  const int lambda = c.lambda > 0 ? c.lambda : default_cma_lambda(std::max(n, 1));
  if (lambda < 4) throw DomainError("CMA-ES lambda must be >= 4");
  if (!(c.init_sigma > 0.0) || !std::isfinite(c.init_sigma)) {
    throw DomainError("CMA-ES initial sigma must be > 0");
  }
  p.validate(lambda);

  const int mu = lambda / 2;
  Eigen::VectorXd w(mu);
  for (int i = 0; i < mu; ++i) w(i) = std::log(mu + 0.5) - std::log(i + 1.0);
  w /= w.sum();
  const double mueff = 1.0 / w.squaredNorm();
  const double nd = static_cast<double>(n);
  const double cc = (4.0 + mueff / nd) / (nd + 4.0 + 2.0 * mueff / nd);
  const double cs = (mueff + 2.0) / (nd + mueff + 5.0);
  const double c1 = 2.0 / ((nd + 1.3) * (nd + 1.3) + mueff);
  const double cmu = std::min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((nd + 2.0) * (nd + 2.0) + mueff));
  const double damps = 1.0 + 2.0 * std::max(0.0, std::sqrt((mueff - 1.0) / (nd + 1.0)) - 1.0) + cs;
  const double chi_n = std::sqrt(nd) * (1.0 - 1.0 / (4.0 * nd) + 1.0 / (21.0 * nd * nd));

  Eigen::VectorXd mean = c.init_mean.size() ? c.init_mean : Eigen::VectorXd(0.5 * (p.lower + p.upper));
  if (mean.size() != n) throw DomainError("CMA-ES init mean has wrong dimension");
  mean = clip(mean, p);
  double sigma = c.init_sigma;
  Eigen::MatrixXd C = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd D = Eigen::VectorXd::Ones(n);
  Eigen::VectorXd pc = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd ps = Eigen::VectorXd::Zero(n);

  Rng rng(p.seed);
  OptimResult r;
  r.best_f = kInf;
  r.best_x = mean;
  for (int gen = 0; gen < c.iters; ++gen) {
    if (r.evaluations + lambda > p.budget) break;
    std::vector<Eigen::VectorXd> xs(static_cast<std::size_t>(lambda));
    for (auto& x : xs) {
      Eigen::VectorXd z(n);
      for (int tries = 0; tries < 100; ++tries) {
        for (int d = 0; d < n; ++d) z(d) = rng.normal();
        x = mean + sigma * (B * D.asDiagonal() * z);
        if (inside(x, p)) break;
      }
      x = clip(x, p);
    }
    const std::vector<double> f = evaluate(p, xs);
    r.evaluations += lambda;
    const auto order = argsort(f);
    if (f[order[0]] < r.best_f) {
      r.best_f = f[order[0]];
      r.best_x = xs[order[0]];
    }
    r.trace.push_back(r.best_f);
    ++r.iterations;

    const Eigen::VectorXd old_mean = mean;
    mean.setZero();
    for (int i = 0; i < mu; ++i) mean += w(i) * xs[order[static_cast<std::size_t>(i)]];
    const Eigen::VectorXd y_w = (mean - old_mean) / sigma;
    const Eigen::MatrixXd c_inv_sqrt = B * D.cwiseInverse().asDiagonal() * B.transpose();
    ps = (1.0 - cs) * ps + std::sqrt(cs * (2.0 - cs) * mueff) * (c_inv_sqrt * y_w);
    const double ps_norm = ps.norm();
    const bool hsig = ps_norm / std::sqrt(1.0 - std::pow(1.0 - cs, 2.0 * (gen + 1))) / chi_n <
                      1.4 + 2.0 / (nd + 1.0);
    pc = (1.0 - cc) * pc + (hsig ? std::sqrt(cc * (2.0 - cc) * mueff) : 0.0) * y_w;
    Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < mu; ++i) {
      const Eigen::VectorXd yi = (xs[order[static_cast<std::size_t>(i)]] - old_mean) / sigma;
      rank_mu += w(i) * yi * yi.transpose();
    }
    C = (1.0 - c1 - cmu) * C +
        c1 * (pc * pc.transpose() + (hsig ? 0.0 : cc * (2.0 - cc)) * C) + cmu * rank_mu;
    sigma *= std::exp((cs / damps) * (ps_norm / chi_n - 1.0));

    C = 0.5 * (C + C.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(C);
    const bool ok = eig.info() == Eigen::Success && eig.eigenvalues().allFinite() &&
                    eig.eigenvalues().minCoeff() > 0.0 && std::isfinite(sigma) && sigma > 0.0;
    if (!ok) {
      r.warnings.push_back("generation " + std::to_string(gen) +
                           ": covariance lost positive-definiteness, reset to identity");
      C.setIdentity();
      B.setIdentity();
      D.setOnes();
      pc.setZero();
      ps.setZero();
      if (!std::isfinite(sigma) || sigma <= 0.0) sigma = c.init_sigma;
    } else {
      B = eig.eigenvectors();
      D = eig.eigenvalues().cwiseSqrt();
    }
    // Search distribution collapsed below double resolution.
    if (sigma * D.maxCoeff() < 1e-15 * std::max(1.0, mean.cwiseAbs().maxCoeff())) break;
  }
  r.final_mean = mean;
  r.final_std = sigma * C.diagonal().cwiseSqrt();
  return r;
}

}  // namespace offroad

#include "offroad/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace offroad {

namespace {

template <typename Row>
double entropy(const Row& p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

template <typename Row>
void check_distribution(const Row& p) {
  double s = 0.0;
  for (double x : p) {
    if (!(x >= 0.0)) throw DomainError("probability entry is negative or NaN");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-6) throw DomainError("probability row does not sum to 1");
}

template <typename Rows>
double categorical_mi_impl(const Rows& rows) {
  if (rows.empty()) throw DomainError("categorical_mi needs at least one member");
  const std::size_t k = std::size(rows[0]);
  std::vector<double> mix(k, 0.0);
  double mean_member_entropy = 0.0;
  for (const auto& r : rows) {
    if (std::size(r) != k) throw DomainError("member rows differ in length");
    check_distribution(r);
    for (std::size_t i = 0; i < k; ++i) mix[i] += r[i];
    mean_member_entropy += entropy(r);
  }
  const bool identical = std::all_of(std::begin(rows), std::end(rows), [&](const auto& r) {
    return std::equal(std::begin(r), std::end(r), std::begin(rows[0]));
  });
  if (identical) return 0.0;
  const double m = static_cast<double>(rows.size());
  for (double& x : mix) x /= m;
  mean_member_entropy /= m;
  // Clamp rounding noise; the exact quantity is >= 0 by Jensen.
  return std::max(0.0, entropy(mix) - mean_member_entropy);
}

void check_var(const Gaussian1d& g) {
  if (!(g.var > 0.0) || !std::isfinite(g.var) || !std::isfinite(g.mean)) {
    throw DomainError("Gaussian variance must be positive and finite");
  }
}

}  // namespace

const char* distance_name(Distance d) { return d == Distance::kKl ? "kl" : "bhattacharyya"; }

Distance parse_distance(const std::string& s) {
  if (s == "kl") return Distance::kKl;
  if (s == "bhattacharyya" || s == "bhatt") return Distance::kBhattacharyya;
  throw DomainError("unknown distance '" + s + "' (expected kl|bhattacharyya)");
}

EnsembleOutput::EnsembleOutput(std::vector<std::vector<StepPrediction>> members)
    : members_(std::move(members)) {
  if (members_.size() < 2) throw DomainError("an ensemble needs at least two members");
  const std::size_t h = members_.front().size();
  if (h == 0) throw DomainError("ensemble members have an empty horizon");
  for (const auto& m : members_) {
    if (m.size() != h) throw DomainError("ensemble members differ in horizon");
  }
}

std::vector<StepPrediction> EnsembleOutput::mean() const {
  const std::size_t h = members_.front().size();
  const double m = static_cast<double>(members_.size());
  std::vector<StepPrediction> out(h);
  for (std::size_t t = 0; t < h; ++t) {
    StepPrediction& o = out[t];
    o.event_probs.fill(0.0);
    double mu = 0.0, second = 0.0;
    for (const auto& mem : members_) {
      for (std::size_t k = 0; k < kNumEvents; ++k) o.event_probs[k] += mem[t].event_probs[k] / m;
      mu += mem[t].bearing_mu / m;
      second += (mem[t].bearing_var + mem[t].bearing_mu * mem[t].bearing_mu) / m;
    }
    o.bearing_mu = mu;
    o.bearing_var = std::max(second - mu * mu, kVarMin);
  }
  return out;
}

double categorical_mi(std::span<const std::array<double, kNumEvents>> member_probs) {
  return categorical_mi_impl(member_probs);
}

double categorical_mi(std::span<const std::vector<double>> member_probs) {
  return categorical_mi_impl(member_probs);
}

double kl_divergence(const Gaussian1d& p, const Gaussian1d& q) {
  check_var(p);
  check_var(q);
  const double d = p.mean - q.mean;
  return 0.5 * std::log(q.var / p.var) + (p.var + d * d) / (2.0 * q.var) - 0.5;
}

double bhattacharyya_distance(const Gaussian1d& p, const Gaussian1d& q) {
  check_var(p);
  check_var(q);
  const double d = p.mean - q.mean;
  const double s = p.var + q.var;
  return d * d / (4.0 * s) + 0.5 * std::log(s / (2.0 * std::sqrt(p.var * q.var)));
}

double gaussian_mi_paide(std::span<const Gaussian1d> members, Distance distance) {
  if (members.empty()) throw DomainError("gaussian_mi_paide needs at least one member");
  for (const auto& g : members) check_var(g);
  const std::size_t m = members.size();
  const double inv_m = 1.0 / static_cast<double>(m);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double inner = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double dist = i == j ? 0.0
                          : distance == Distance::kKl
                              ? kl_divergence(members[i], members[j])
                              : bhattacharyya_distance(members[i], members[j]);
      inner += std::exp(-dist);
    }
    total += std::log(inner / static_cast<double>(m));
  }
  return std::max(0.0, -inv_m * total);
}

std::vector<EnsembleOutput> ensemble_predict_batch(std::span<const ModelWeights> models,
                                                   const ModelBatch& batch) {
  if (models.size() < 2) throw DomainError("an ensemble needs at least two members");
  for (const auto& m : models) {
    if (!(m.config == models.front().config)) {
      throw DomainError("ensemble members have different architectures");
    }
  }
  const std::size_t B = static_cast<std::size_t>(batch.batch());
  std::vector<std::vector<std::vector<StepPrediction>>> per_sample(B);
  for (auto& s : per_sample) s.reserve(models.size());
  for (std::size_t k = 0; k < models.size(); ++k) {
    std::vector<std::vector<StepPrediction>> preds;
    try {
      preds = forward_batch(models[k], batch);
    } catch (const InferenceError& e) {
      throw InferenceError(e.layer(), "ensemble member " + std::to_string(k) + ": " + e.what());
    }
    for (std::size_t b = 0; b < B; ++b) per_sample[b].push_back(std::move(preds[b]));
  }
  std::vector<EnsembleOutput> out;
  out.reserve(B);
  for (auto& s : per_sample) out.emplace_back(std::move(s));
  return out;
}

EnsembleOutput ensemble_predict(std::span<const ModelWeights> models, const Eigen::VectorXd& obs,
                                const Matrix& actions) {
  return std::move(ensemble_predict_batch(models, ModelBatch::single(obs, actions)).front());
}

UncertaintyTrace uncertainty_trace(const EnsembleOutput& ens, const UncertaintyWeights& weights,
                                   Distance distance) {
  const std::size_t m = ens.size();
  const std::size_t h = static_cast<std::size_t>(ens.horizon());
  const double ln_m = std::log(static_cast<double>(m));
  UncertaintyTrace trace(h);
  std::vector<std::array<double, kNumEvents>> probs(m);
  std::vector<Gaussian1d> bearings(m);
  for (std::size_t t = 0; t < h; ++t) {
    for (std::size_t k = 0; k < m; ++k) {
      const StepPrediction& p = ens.member(k)[t];
      probs[k] = p.event_probs;
      bearings[k] = {p.bearing_mu, p.bearing_var};
    }
    UncertaintyStep& s = trace[t];
    s.mi_class = categorical_mi(probs);
    s.mi_kl = gaussian_mi_paide(bearings, Distance::kKl);
    s.mi_bhatt = gaussian_mi_paide(bearings, Distance::kBhattacharyya);
    const double mi_bearing = distance == Distance::kKl ? s.mi_kl : s.mi_bhatt;
    s.sigma = std::max(kSigmaMin, weights.w_class * s.mi_class / ln_m + weights.w_bearing * mi_bearing);
  }
  return trace;
}

}  // namespace offroad

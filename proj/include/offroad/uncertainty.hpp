#pragma once

#include <span>
#include <vector>

#include "offroad/seqmodel.hpp"
#include "offroad/vehicle.hpp"

namespace offroad {

enum class Distance { kKl, kBhattacharyya };

const char* distance_name(Distance d);
Distance parse_distance(const std::string& s);

// M member predictions over a shared horizon, uniformly weighted.
class EnsembleOutput {
 public:
  explicit EnsembleOutput(std::vector<std::vector<StepPrediction>> members);

  std::size_t size() const { return members_.size(); }
  int horizon() const { return static_cast<int>(members_.front().size()); }
  const std::vector<StepPrediction>& member(std::size_t m) const { return members_[m]; }
  const std::vector<std::vector<StepPrediction>>& members() const { return members_; }

  // Per-step average over members (mixture probabilities and moment-matched
  // bearing Gaussian).
  std::vector<StepPrediction> mean() const;

 private:
  std::vector<std::vector<StepPrediction>> members_;
};

struct UncertaintyStep {
  double mi_class = 0.0;
  double mi_kl = 0.0;
  double mi_bhatt = 0.0;
  double sigma = kSigmaMin;
};

using UncertaintyTrace = std::vector<UncertaintyStep>;

struct UncertaintyWeights {
  double w_class = 1.0;
  double w_bearing = 1.0;
};

struct Gaussian1d {
  double mean = 0.0;
  double var = 1.0;
};

// H(mean distribution) - mean member entropy, in nats.
double categorical_mi(std::span<const std::array<double, kNumEvents>> member_probs);
// Same, for arbitrary category counts (rows of equal length).
double categorical_mi(std::span<const std::vector<double>> member_probs);

double kl_divergence(const Gaussian1d& p, const Gaussian1d& q);
double bhattacharyya_distance(const Gaussian1d& p, const Gaussian1d& q);

// Pairwise-distance estimate of I(Z; W) for a uniform Gaussian mixture.
double gaussian_mi_paide(std::span<const Gaussian1d> members, Distance distance);

EnsembleOutput ensemble_predict(std::span<const ModelWeights> models, const Eigen::VectorXd& obs,
                                const Matrix& actions);
// One EnsembleOutput per sample of the batch.
std::vector<EnsembleOutput> ensemble_predict_batch(std::span<const ModelWeights> models,
                                                   const ModelBatch& batch);

// sigma_t = max(sigma_min, w_class * mi_class / ln M + w_bearing * mi_bearing).
UncertaintyTrace uncertainty_trace(const EnsembleOutput& ens, const UncertaintyWeights& weights,
                                   Distance distance);

}  // namespace offroad

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "offroad/tape.hpp"

namespace offroad {

inline constexpr int kNumEvents = 9;
inline constexpr double kVarMin = 1e-6;

// Terrain event classes, in model output order.
enum class Event : int {
  kTree = 0,
  kOtherObstacles,
  kHuman,
  kWaterhole,
  kMud,
  kJump,
  kTraversableGrass,
  kSmoothRoad,
  kWetLeaves,
};

const char* event_name(int event);

struct StepPrediction {
  std::array<double, kNumEvents> event_probs{};
  double bearing_mu = 0.0;
  double bearing_var = 1.0;
};

// One training/evaluation example. Action rows are (delta, throttle, dt).
struct TrajectorySample {
  Eigen::VectorXd obs;
  Matrix actions;  // H x 3
  std::vector<int> event_labels;
  std::vector<double> bearing_labels;

  int horizon() const { return static_cast<int>(actions.rows()); }
};

enum class Architecture { kTransformer, kLstm };

const char* architecture_name(Architecture a);
Architecture parse_architecture(const std::string& s);

struct ModelConfig {
  Architecture architecture = Architecture::kTransformer;
  int obs_dim = 64;
  int width = 32;
  int layers = 2;
  int heads = 2;
  int ffn_mult = 2;
  double var_min = kVarMin;

  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Matrix value;
};

struct ModelWeights {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<NamedTensor> tensors;
  // Free-form training metadata written to the manifest.
  std::string training_config_json = "{}";

  const Matrix& at(const std::string& name) const;
  std::size_t parameter_count() const;
  bool all_finite() const;
};

// Shapes implied by a config, in manifest order.
std::vector<std::pair<std::string, std::pair<int, int>>> weight_manifest(const ModelConfig& config);

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed);

// Directory with manifest.json plus one little-endian float64 file per tensor.
void save_weights(const ModelWeights& w, const std::filesystem::path& dir);
ModelWeights load_weights(const std::filesystem::path& dir);

// Batched model input. All samples share the horizon.
struct ModelBatch {
  Matrix obs;      // B x F
  Matrix actions;  // (B*H) x 3, sample-major
  int horizon = 0;

  int batch() const { return static_cast<int>(obs.rows()); }
  static ModelBatch from_samples(std::span<const TrajectorySample> samples);
  static ModelBatch single(const Eigen::VectorXd& obs, const Matrix& actions);
};

// Output nodes of one recorded forward pass.
struct ModelGraph {
  Var logits;        // (B*H) x 9
  Var mean_logvar;   // (B*H) x 2
  std::vector<Var> params;  // aligned with ModelWeights::tensors
};

ModelGraph build_graph(Tape& tape, const ModelWeights& weights, const ModelBatch& batch);

// Inference. Result[b][t] is step t of sample b.
std::vector<std::vector<StepPrediction>> forward_batch(const ModelWeights& weights,
                                                        const ModelBatch& batch);
std::vector<StepPrediction> forward(const ModelWeights& weights, const Eigen::VectorXd& obs,
                                    const Matrix& actions);

// Mean over steps of cross-entropy plus Gaussian NLL, in nats.
double loss(std::span<const StepPrediction> predictions, std::span<const int> event_labels,
            std::span<const double> bearing_labels);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<Matrix> grads;  // aligned with ModelWeights::tensors
};

LossAndGrad loss_and_grad(const ModelWeights& weights, std::span<const TrajectorySample> batch);
double batch_loss(const ModelWeights& weights, std::span<const TrajectorySample> batch);

struct TrainConfig {
  int epochs = 20;
  int batch = 64;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  // Stop after this many optimizer steps (0 = no limit).
  int max_steps = 0;
};

struct TrainResult {
  ModelWeights weights;       // best per-epoch mean loss
  std::vector<double> epoch_loss;
  int steps = 0;
};

TrainResult train(std::span<const TrajectorySample> dataset, const ModelConfig& model,
                  const TrainConfig& config);
// Continues from given weights.
TrainResult train_from(ModelWeights init, std::span<const TrajectorySample> dataset,
                       const TrainConfig& config);

struct StepMetrics {
  int step = 0;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  double bearing_mae = 0.0;
  int skipped_classes = 0;
};

using Predictor = std::function<std::vector<StepPrediction>(const TrajectorySample&)>;

std::vector<StepMetrics> per_step_metrics(const Predictor& predictor,
                                          std::span<const TrajectorySample> test_set);
std::vector<StepMetrics> per_step_metrics(const ModelWeights& weights,
                                          std::span<const TrajectorySample> test_set);

struct GradCheckResult {
  double max_rel_error = 0.0;
  int coordinates = 0;
};

// Compares loss_and_grad with central differences on random weight coordinates.
// Relative error uses max(|numeric|, |analytic|, 1e-5) as denominator.
GradCheckResult gradient_check(const ModelWeights& weights,
                               std::span<const TrajectorySample> batch, int coordinates,
                               double step, std::uint64_t seed);

}  // namespace offroad

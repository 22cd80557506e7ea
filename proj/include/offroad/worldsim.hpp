#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "offroad/estimator.hpp"
#include "offroad/seqmodel.hpp"
#include "offroad/vehicle.hpp"

namespace offroad {

using ClassFrequencies = std::array<double, kNumEvents>;

// Label counts of the reference driving dataset, normalized.
ClassFrequencies default_class_frequencies();

// Square labeled grid. Cell (row, col) covers x in [col, col+1) * cell_size
// and y in [row, row+1) * cell_size.
class TerrainWorld {
 public:
  TerrainWorld(int size, double cell_size, std::uint64_t seed, ClassFrequencies frequencies);

  int size() const { return size_; }
  double cell_size() const { return cell_size_; }
  std::uint64_t seed() const { return seed_; }
  const ClassFrequencies& class_frequencies() const { return frequencies_; }
  double extent() const { return size_ * cell_size_; }

  int label(int row, int col) const { return labels_[index(row, col)]; }
  double slope(int row, int col) const { return slopes_[index(row, col)]; }
  void set_label(int row, int col, int event);
  void set_slope(int row, int col, double phi);

  bool contains(double x, double y) const;
  // Label at a world point; nullopt outside the grid.
  std::optional<int> label_at(double x, double y) const;
  double slope_at(double x, double y) const;

  const std::vector<std::uint8_t>& labels() const { return labels_; }
  const std::vector<double>& slopes() const { return slopes_; }

  bool operator==(const TerrainWorld&) const = default;

 private:
  std::size_t index(int row, int col) const;

  int size_;
  double cell_size_;
  std::uint64_t seed_;
  ClassFrequencies frequencies_;
  std::vector<std::uint8_t> labels_;
  std::vector<double> slopes_;
};

struct WorldGenConfig {
  int size = 128;
  double cell_size = 0.5;
  ClassFrequencies frequencies = default_class_frequencies();
  double blob_scale = 8.0;  // value-noise lattice spacing, in cells
  double max_slope = 0.15;
};

TerrainWorld generate_world(std::uint64_t seed, const WorldGenConfig& config);

// Single-class flat world.
TerrainWorld uniform_world(int size, double cell_size, int event);

// One file: a JSON header line, the row-major label bytes, then the slopes as
// little-endian float64.
void save_world(const TerrainWorld& world, const std::filesystem::path& path);
TerrainWorld load_world(const std::filesystem::path& path);

struct ObservationConfig {
  // Forward probe distances (m); each probe is a 3x3-cell class histogram.
  std::vector<double> probe_distances = {1.0, 2.0, 3.0, 4.5, 6.0, 8.0};
  // Obstacle range rays relative to the heading (rad).
  std::vector<double> ray_angles = {-1.0, -0.5, -0.2, 0.2, 0.5, 1.0};
  double ray_range = 10.0;
  double noise_std = 0.05;
  std::vector<int> obstacle_classes = {static_cast<int>(Event::kTree),
                                       static_cast<int>(Event::kOtherObstacles),
                                       static_cast<int>(Event::kHuman)};

  // 9 per probe + slope, cos/sin heading, speed + one per ray.
  int feature_count() const;
};

// Layout: [probe histograms | slope | cos psi | sin psi | v / 3 | rays].
Eigen::VectorXd observe(const TerrainWorld& world, const VehicleState& state,
                        std::uint64_t noise_seed, const ObservationConfig& config = {});

struct StepTruth {
  int event = 0;
  bool collision = false;
  double bearing = 0.0;
};

struct GroundTruth {
  std::vector<StepTruth> steps;
  bool truncated = false;  // rollout left the grid
};

// Labels each given state (callers pass the future states of a rollout).
GroundTruth ground_truth(const TerrainWorld& world, std::span<const VehicleState> states,
                         std::span<const int> collision_classes);
GroundTruth ground_truth(const TerrainWorld& world, std::span<const VehicleState> states);

struct DatasetConfig {
  int horizon = 20;
  ObservationConfig observation;
  ModelParams params;
  double max_start_speed = 3.5;
  double steer_walk_std = 0.08;
  // Throttle levels giving the 1X/2X/3X dilations, with uniform jitter.
  double throttle_jitter = 0.1;
  double margin = 2.0;  // m kept clear of the border at the start
  bool allow_any_horizon = false;  // tests only
};

// Bearing labels are heading changes relative to the sample's start heading
// (unwrapped), so the model never regresses across the +-pi seam.
std::vector<TrajectorySample> make_dataset(const TerrainWorld& world, int n_samples,
                                           std::uint64_t seed, const DatasetConfig& config = {});

// Measurement noise used for the estimator; stds double as the estimator's
// residual weights.
struct SensorNoise {
  double gps_xy_std = 0.1;
  double gps_psi_std = 0.05;
  double accel_std = 0.2;
  double speed_std = 0.05;
};

Measurement measure(const VehicleState& truth, const ControlInput& last_control,
                    const ModelParams& true_params, double t, std::uint64_t noise_seed,
                    const SensorNoise& noise);

std::uint64_t dataset_hash(std::span<const TrajectorySample> samples);

// JSON header line, then per sample: obs, actions, event labels (as float64),
// bearing labels; all little-endian float64.
void save_dataset(std::span<const TrajectorySample> samples, const std::filesystem::path& path);
std::vector<TrajectorySample> load_dataset(const std::filesystem::path& path);

}  // namespace offroad

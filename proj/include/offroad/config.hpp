#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "offroad/planner.hpp"
#include "offroad/seqmodel.hpp"
#include "offroad/uncertainty.hpp"
#include "offroad/worldsim.hpp"

namespace offroad {

// Bad configuration; `path` is the offending key, e.g. "planner.horizon".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct EnsembleSettings {
  int members = 5;
  Distance distance = Distance::kKl;
  UncertaintyWeights weights;
  std::string weights_dir;  // empty: train on the fly
};

struct DatasetSettings {
  int samples = 2000;
  int test_samples = 500;
  int horizon = 20;
  double max_start_speed = 3.5;
  double steer_walk_std = 0.08;
  double throttle_jitter = 0.1;
  double margin = 2.0;
};

struct EpisodeSettings {
  int horizon = 10;
  double goal_radius = 1.0;
  int max_ticks = 60;
  int alternations = 1;
  double initial_throttle = 0.5;
  double execution_substep = 0.05;
  int episodes = 50;
  double goal_distance = 20.0;
  double start_speed = 0.0;
  std::string terrain = "generated";  // or "empty"
};

struct RunConfig {
  ModelParams vehicle;
  MheSettings mhe;
  SensorNoise noise;
  OptimizerSettings steering;
  OptimizerSettings throttle;
  ModelConfig model;
  TrainConfig train;
  EnsembleSettings ensemble;
  EventRewardConfig event;
  MpcRewardConfig mpc;
  EpisodeSettings planner;
  WorldGenConfig world;
  ObservationConfig observation;
  DatasetSettings dataset;
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  RunConfig();
  void validate() const;

  PlannerConfig planner_config() const;
  DatasetConfig dataset_config() const;
};

nlohmann::json to_json(const RunConfig& c);
// Missing keys keep their defaults; unknown keys and wrong types throw
// ConfigError naming the key path.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const RunConfig& c, const std::filesystem::path& path);

}  // namespace offroad

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "offroad/config.hpp"
#include "offroad/planner.hpp"

namespace offroad::cli {

// Runs one subcommand. Exit codes: 0 success, 1 usage or config error,
// 2 runtime or validation failure.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(const std::vector<std::string>& args);

struct Datasets {
  TerrainWorld world;
  std::vector<TrajectorySample> train;
  std::vector<TrajectorySample> test;
};

// World from the run seed; train and test sets from derived seeds.
Datasets build_datasets(const RunConfig& rc, int horizon);
std::vector<TrajectorySample> build_test_set(const RunConfig& rc, int horizon, int samples);

std::uint64_t member_seed(std::uint64_t run_seed, int member);

TrainResult train_member(const RunConfig& rc, std::span<const TrajectorySample> train_set,
                         int member);

std::vector<ModelWeights> train_ensemble(const RunConfig& rc,
                                         std::span<const TrajectorySample> train_set);
void save_ensemble(const std::vector<ModelWeights>& members, const std::filesystem::path& dir);
std::vector<ModelWeights> load_ensemble(const std::filesystem::path& dir);

// Loads from `dir` (or ensemble.weights_dir), else trains on the configured
// dataset.
std::vector<ModelWeights> obtain_ensemble(const RunConfig& rc, const std::string& dir);

// Mean per-step uncertainty over a held-out set.
UncertaintyTrace mean_uncertainty(const std::vector<ModelWeights>& members,
                                  std::span<const TrajectorySample> test_set,
                                  const UncertaintyWeights& weights, Distance distance);

// Start pose with free surroundings and a goal `goal_distance` away, both
// inside the world.
EpisodeSetup make_episode_setup(const TerrainWorld& world, const RunConfig& rc,
                                std::uint64_t episode_seed);
TerrainWorld episode_world(const RunConfig& rc, std::uint64_t episode_seed);

struct ArmResult {
  double beta_sigma = 0.0;
  std::vector<EpisodeResult> episodes;
};

struct StudySummary {
  int pairs = 0;
  int speed_wins = 0;  // episodes where the first arm was slower
  int sigma_wins = 0;  // episodes where the first arm had lower mean sigma
  double speed_p = 1.0;
  double sigma_p = 1.0;
  double mean_speed[2] = {0.0, 0.0};
  double mean_sigma[2] = {0.0, 0.0};
};

// Episodes 0..n-1 under each beta_sigma, all else fixed.
std::vector<ArmResult> run_study(const RunConfig& rc, const WorldModel& model,
                                 const std::vector<double>& betas, int episodes);
StudySummary summarize_study(const ArmResult& treated, const ArmResult& control);

}  // namespace offroad::cli

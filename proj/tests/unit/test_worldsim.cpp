#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "offroad/reward.hpp"
#include "offroad/worldsim.hpp"

using namespace offroad;

namespace {

ObservationConfig quiet() {
  ObservationConfig c;
  c.noise_std = 0.0;
  return c;
}

}  // namespace

TEST_CASE("default frequencies follow the reference label counts") {
  const auto f = default_class_frequencies();
  double s = 0;
  for (double x : f) s += x;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(f[static_cast<int>(Event::kSmoothRoad)] == doctest::Approx(10632.0 / 20982.0));
  CHECK(f[static_cast<int>(Event::kTraversableGrass)] == doctest::Approx(6421.0 / 20982.0));
}

TEST_CASE("generation is deterministic per seed") {
  WorldGenConfig cfg;
  cfg.size = 64;
  const auto a = generate_world(5, cfg);
  const auto b = generate_world(5, cfg);
  CHECK(a == b);
  CHECK(!(generate_world(6, cfg) == a));
}

TEST_CASE("degenerate prior gives a uniform grid") {
  WorldGenConfig cfg;
  cfg.size = 32;
  cfg.frequencies.fill(0.0);
  cfg.frequencies[static_cast<int>(Event::kSmoothRoad)] = 1.0;
  const auto w = generate_world(1, cfg);
  for (int r = 0; r < 32; ++r) {
    for (int c = 0; c < 32; ++c) CHECK(w.label(r, c) == static_cast<int>(Event::kSmoothRoad));
  }
}

TEST_CASE("class marginals match the prior on a large grid") {
  WorldGenConfig cfg;
  cfg.size = 256;
  const auto w = generate_world(9, cfg);
  std::array<double, kNumEvents> counts{};
  for (auto l : w.labels()) counts[l] += 1.0;
  for (int k = 0; k < kNumEvents; ++k) {
    CHECK(std::abs(counts[k] / (256.0 * 256.0) - cfg.frequencies[k]) <= 0.02);
  }
  for (double s : w.slopes()) {
    CHECK(s >= -0.15);
    CHECK(s <= 0.15);
  }
}

TEST_CASE("generation preconditions") {
  WorldGenConfig cfg;
  cfg.size = 7;
  CHECK_THROWS_AS(generate_world(1, cfg), DomainError);
  cfg.size = 16;
  cfg.frequencies[0] += 0.1;
  CHECK_THROWS_AS(generate_world(1, cfg), DomainError);
}

TEST_CASE("world file round trip") {
  WorldGenConfig cfg;
  cfg.size = 40;
  const auto w = generate_world(12, cfg);
  const auto path = std::filesystem::temp_directory_path() / "offroad_world_rt.bin";
  save_world(w, path);
  CHECK(load_world(path) == w);
  std::filesystem::remove(path);
}

TEST_CASE("single-class surroundings give one-hot probes") {
  const auto w = uniform_world(64, 0.5, static_cast<int>(Event::kTraversableGrass));
  const VehicleState s{16, 16, 0.3, 1.5, 0, kSigmaMin};
  const auto f = observe(w, s, 1, quiet());
  const ObservationConfig cfg;
  REQUIRE(f.size() == cfg.feature_count());
  CHECK(f.size() == 64);
  for (std::size_t p = 0; p < cfg.probe_distances.size(); ++p) {
    for (int k = 0; k < kNumEvents; ++k) {
      const double expect = k == static_cast<int>(Event::kTraversableGrass) ? 1.0 : 0.0;
      CHECK(f(static_cast<Eigen::Index>(p) * kNumEvents + k) == doctest::Approx(expect));
    }
  }
  CHECK(f(54) == 0.0);
  CHECK(f(55) == doctest::Approx(std::cos(0.3)));
  CHECK(f(56) == doctest::Approx(std::sin(0.3)));
  CHECK(f(57) == doctest::Approx(0.5));
}

TEST_CASE("observation is deterministic and noise is seeded") {
  WorldGenConfig cfg;
  cfg.size = 64;
  const auto w = generate_world(3, cfg);
  const VehicleState s{10, 12, 1.0, 2.0, 0, kSigmaMin};
  CHECK(observe(w, s, 7) == observe(w, s, 7));
  CHECK(!(observe(w, s, 7) == observe(w, s, 8)));
  CHECK(observe(w, s, 7).allFinite());
}

TEST_CASE("turning around looks at the opposite cells") {
  auto w = uniform_world(64, 0.5, static_cast<int>(Event::kSmoothRoad));
  // Tree patch 1 m east of (16, 16), mud patch 1 m west.
  for (int dr = -1; dr <= 1; ++dr) {
    for (int dc = -1; dc <= 1; ++dc) {
      w.set_label(32 + dr, 34 + dc, static_cast<int>(Event::kTree));
      w.set_label(32 + dr, 30 + dc, static_cast<int>(Event::kMud));
    }
  }
  const VehicleState east{16.25, 16.25, 0.0, 1.0, 0, kSigmaMin};
  VehicleState west = east;
  west.psi = kPi;
  const auto fe = observe(w, east, 0, quiet());
  const auto fw = observe(w, west, 0, quiet());
  CHECK(fe(static_cast<int>(Event::kTree)) == doctest::Approx(1.0));
  CHECK(fe(static_cast<int>(Event::kMud)) == 0.0);
  CHECK(fw(static_cast<int>(Event::kMud)) == doctest::Approx(1.0));
  CHECK(fw(static_cast<int>(Event::kTree)) == 0.0);
  // Forward rays see the tree only when facing it.
  CHECK(fe(60) < 1.0);
  CHECK(fw(60) == 1.0);
}

TEST_CASE("observing outside the world fails") {
  const auto w = uniform_world(16, 0.5, 0);
  CHECK_THROWS_AS(observe(w, {-1, 2, 0, 0, 0, kSigmaMin}, 0), ObservationError);
  CHECK_THROWS_AS(observe(w, {2, 8.0, 0, 0, 0, kSigmaMin}, 0), ObservationError);
}

TEST_CASE("ground truth labels") {
  auto w = uniform_world(64, 0.5, static_cast<int>(Event::kTraversableGrass));
  std::vector<VehicleState> states;
  for (int t = 0; t < 6; ++t) states.push_back({2.25 + t, 5.25, 0.1 * t, 1.0, 0, kSigmaMin});
  {
    const auto gt = ground_truth(w, states);
    REQUIRE(gt.steps.size() == 6);
    CHECK(!gt.truncated);
    for (std::size_t t = 0; t < 6; ++t) {
      CHECK(gt.steps[t].event == static_cast<int>(Event::kTraversableGrass));
      CHECK(!gt.steps[t].collision);
      CHECK(gt.steps[t].bearing == states[t].psi);
    }
  }
  w.set_label(10, 10, static_cast<int>(Event::kTree));  // cell of step 3 (x=5.25)
  {
    const auto gt = ground_truth(w, states);
    for (std::size_t t = 0; t < 6; ++t) CHECK(gt.steps[t].collision == (t == 3));
  }
  CHECK(ground_truth(w, std::vector<VehicleState>{}).steps.empty());
  states.push_back({100, 5, 0, 0, 0, kSigmaMin});
  const auto cut = ground_truth(w, states);
  CHECK(cut.truncated);
  CHECK(cut.steps.size() == 6);
}

TEST_CASE("collision flags agree with the reward's class set") {
  WorldGenConfig cfg;
  cfg.size = 32;
  const auto w = generate_world(4, cfg);
  const EventRewardConfig reward;
  std::vector<VehicleState> states;
  for (int r = 0; r < 32; ++r) {
    for (int c = 0; c < 32; ++c) states.push_back({(c + 0.5) * 0.5, (r + 0.5) * 0.5, 0, 0, 0, kSigmaMin});
  }
  const auto gt = ground_truth(w, states, reward.collision_classes);
  for (const auto& s : gt.steps) CHECK(s.collision == reward.is_collision(s.event));
}

TEST_CASE("dataset generation") {
  WorldGenConfig cfg;
  cfg.size = 96;
  const auto w = generate_world(2, cfg);
  DatasetConfig dc;
  dc.horizon = 10;
  CHECK(make_dataset(w, 0, 1, dc).empty());
  const auto a = make_dataset(w, 50, 1, dc);
  const auto b = make_dataset(w, 50, 1, dc);
  REQUIRE(a.size() == 50);
  CHECK(dataset_hash(a) == dataset_hash(b));
  CHECK(dataset_hash(a) != dataset_hash(make_dataset(w, 50, 2, dc)));
  for (const auto& s : a) {
    CHECK(s.horizon() == 10);
    CHECK(s.obs.size() == 64);
    for (int t = 0; t < 10; ++t) {
      CHECK(s.actions(t, 2) >= 0.2);
      CHECK(s.actions(t, 2) <= 0.6);
      CHECK(std::abs(s.actions(t, 0)) <= kDeltaMax);
      CHECK(s.event_labels[t] >= 0);
      CHECK(s.event_labels[t] < kNumEvents);
    }
  }
  dc.horizon = 7;
  CHECK_THROWS_AS(make_dataset(w, 5, 1, dc), DomainError);
}

TEST_CASE("dataset file round trip") {
  WorldGenConfig cfg;
  cfg.size = 64;
  const auto w = generate_world(5, cfg);
  DatasetConfig dc;
  dc.horizon = 10;
  const auto a = make_dataset(w, 12, 3, dc);
  const auto path = std::filesystem::temp_directory_path() / "offroad_dataset_rt.bin";
  save_dataset(a, path);
  const auto b = load_dataset(path);
  std::filesystem::remove(path);
  REQUIRE(b.size() == a.size());
  CHECK(dataset_hash(b) == dataset_hash(a));
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(b[i].obs == a[i].obs);
    CHECK(b[i].actions == a[i].actions);
    CHECK(b[i].event_labels == a[i].event_labels);
    CHECK(b[i].bearing_labels == a[i].bearing_labels);
  }
}

TEST_CASE("tiny worlds cannot supply long rollouts") {
  const auto w = uniform_world(10, 0.5, static_cast<int>(Event::kSmoothRoad));
  DatasetConfig dc;
  dc.horizon = 40;
  dc.margin = 0.5;
  CHECK_THROWS_AS(make_dataset(w, 20, 1, dc), GenerationError);
}

TEST_CASE("dataset label marginals follow the prior") {
  WorldGenConfig cfg;
  cfg.size = 128;
  const auto w = generate_world(21, cfg);
  DatasetConfig dc;
  dc.horizon = 10;
  const auto data = make_dataset(w, 20000, 3, dc);
  std::array<double, kNumEvents> counts{};
  double n = 0;
  for (const auto& s : data) {
    for (int e : s.event_labels) {
      counts[e] += 1;
      n += 1;
    }
  }
  for (int k = 0; k < kNumEvents; ++k) {
    CAPTURE(k);
    CHECK(std::abs(counts[k] / n - cfg.frequencies[k]) <= 0.03);
  }
}

TEST_CASE("measurements carry the configured noise levels") {
  SensorNoise noise;
  noise.gps_xy_std = 0.3;
  const VehicleState s{3, 4, 0.5, 1.2, 0, kSigmaMin};
  const auto m = measure(s, ControlInput(0, 0.5), ModelParams{}, 1.0, 9, noise);
  CHECK(m.gps_xy->std == 0.3);
  CHECK(m.speed->std == noise.speed_std);
  CHECK(m.accel->std == noise.accel_std);
  CHECK(m.gps_psi->std == noise.gps_psi_std);
  CHECK(m.t == 1.0);
  const auto again = measure(s, ControlInput(0, 0.5), ModelParams{}, 1.0, 9, noise);
  CHECK(again.gps_xy->x == m.gps_xy->x);

  Rng rng(1);
  double sq = 0;
  for (int i = 0; i < 4000; ++i) {
    const auto mi = measure(s, ControlInput(0, 0.5), ModelParams{}, 0.0, rng.next_u64(), noise);
    sq += (mi.gps_xy->x - 3.0) * (mi.gps_xy->x - 3.0);
  }
  CHECK(std::sqrt(sq / 4000) == doctest::Approx(0.3).epsilon(0.05));
}

#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "offroad/seqmodel.hpp"
#include "offroad/vehicle.hpp"

using namespace offroad;

namespace {

ModelConfig small(Architecture a, int width = 8) {
  ModelConfig c;
  c.architecture = a;
  c.obs_dim = 12;
  c.width = width;
  return c;
}

Matrix random_actions(Rng& rng, int h) {
  Matrix a(h, 3);
  for (int t = 0; t < h; ++t) {
    a(t, 0) = rng.uniform(-kDeltaMax, kDeltaMax);
    a(t, 1) = rng.uniform();
    a(t, 2) = throttle_to_dt(a(t, 1));
  }
  return a;
}

Eigen::VectorXd random_obs(Rng& rng, int f) {
  Eigen::VectorXd o(f);
  for (int i = 0; i < f; ++i) o(i) = rng.normal();
  return o;
}

// Labels are a fixed function of the observation, so the set is separable.
std::vector<TrajectorySample> separable_set(int n, int h, int f, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TrajectorySample> out;
  for (int i = 0; i < n; ++i) {
    TrajectorySample s;
    s.obs = random_obs(rng, f);
    s.actions = random_actions(rng, h);
    const int cls = i % kNumEvents;
    s.obs(cls) += 4.0;
    for (int t = 0; t < h; ++t) {
      s.event_labels.push_back(cls);
      s.bearing_labels.push_back(0.1 * t * s.actions(t, 0));
    }
    out.push_back(std::move(s));
  }
  return out;
}

const Architecture kArchs[] = {Architecture::kTransformer, Architecture::kLstm};

}  // namespace

TEST_CASE("predictions are normalized with floored variance") {
  Rng rng(1);
  for (auto arch : kArchs) {
    const auto w = init_weights(small(arch), 3);
    for (int trial = 0; trial < 20; ++trial) {
      const auto preds = forward(w, random_obs(rng, 12) * 5.0, random_actions(rng, 6));
      REQUIRE(preds.size() == 6);
      for (const auto& p : preds) {
        double s = 0;
        for (double q : p.event_probs) {
          CHECK(q >= 0.0);
          s += q;
        }
        CHECK(std::abs(s - 1.0) <= 1e-6);
        CHECK(p.bearing_var >= w.config.var_min);
      }
    }
  }
}

TEST_CASE("causality: later action rows never change earlier predictions") {
  Rng rng(2);
  for (auto arch : kArchs) {
    const auto w = init_weights(small(arch), 4);
    for (int trial = 0; trial < 100; ++trial) {
      const int h = 1 + static_cast<int>(rng.below(8));
      const auto obs = random_obs(rng, 12);
      const Matrix a = random_actions(rng, h);
      Matrix b = a;
      const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(h)));
      b.row(t) = random_actions(rng, 1).row(0);
      const auto pa = forward(w, obs, a);
      const auto pb = forward(w, obs, b);
      for (int s = 0; s < t; ++s) {
        CHECK(pa[s].event_probs == pb[s].event_probs);
        CHECK(pa[s].bearing_mu == pb[s].bearing_mu);
        CHECK(pa[s].bearing_var == pb[s].bearing_var);
      }
    }
  }
}

TEST_CASE("joint batch equals individual forwards") {
  Rng rng(3);
  for (auto arch : kArchs) {
    const auto w = init_weights(small(arch), 5);
    const auto o1 = random_obs(rng, 12);
    const auto o2 = random_obs(rng, 12);
    const Matrix a1 = random_actions(rng, 5);
    const Matrix a2 = random_actions(rng, 5);
    ModelBatch b;
    b.horizon = 5;
    b.obs.resize(2, 12);
    b.obs.row(0) = o1.transpose();
    b.obs.row(1) = o2.transpose();
    b.actions.resize(10, 3);
    b.actions.topRows(5) = a1;
    b.actions.bottomRows(5) = a2;
    const auto joint = forward_batch(w, b);
    const auto s1 = forward(w, o1, a1);
    const auto s2 = forward(w, o2, a2);
    for (int t = 0; t < 5; ++t) {
      for (int k = 0; k < kNumEvents; ++k) {
        CHECK(joint[0][t].event_probs[k] == doctest::Approx(s1[t].event_probs[k]).epsilon(1e-12));
        CHECK(joint[1][t].event_probs[k] == doctest::Approx(s2[t].event_probs[k]).epsilon(1e-12));
      }
      CHECK(joint[0][t].bearing_mu == doctest::Approx(s1[t].bearing_mu).epsilon(1e-12));
      CHECK(joint[1][t].bearing_var == doctest::Approx(s2[t].bearing_var).epsilon(1e-12));
    }
  }
}

TEST_CASE("forward input validation") {
  const auto w = init_weights(small(Architecture::kTransformer), 1);
  Rng rng(4);
  CHECK_THROWS_AS(forward(w, random_obs(rng, 11), random_actions(rng, 3)), DomainError);
  CHECK_THROWS_AS(forward(w, random_obs(rng, 12), Matrix(0, 3)), DomainError);
  CHECK_THROWS_AS(forward(w, random_obs(rng, 12), Matrix::Zero(3, 2)), DomainError);
}

TEST_CASE("non-finite activations name the layer") {
  auto w = init_weights(small(Architecture::kTransformer), 1);
  w.tensors.front().value.setConstant(1e300);
  Rng rng(5);
  try {
    forward(w, random_obs(rng, 12) * 1e10, random_actions(rng, 3));
    FAIL("expected InferenceError");
  } catch (const InferenceError& e) {
    CHECK(!e.layer().empty());
  }
}

TEST_CASE("loss hand computations") {
  StepPrediction uniform;
  uniform.event_probs.fill(1.0 / 9.0);
  uniform.bearing_mu = 0.5;
  uniform.bearing_var = 1.0;
  const std::vector<StepPrediction> preds(4, uniform);
  const std::vector<int> labels{0, 3, 8, 5};
  const std::vector<double> bearings(4, 0.5);
  CHECK(loss(preds, labels, bearings) ==
        doctest::Approx(std::log(9.0) + 0.5 * std::log(2 * kPi)).epsilon(1e-12));

  StepPrediction sure;
  sure.event_probs.fill(1e-9 / 8.0);
  sure.event_probs[2] = 1.0 - 1e-9;
  sure.bearing_mu = 0.0;
  sure.bearing_var = 1.0;
  const std::vector<StepPrediction> one{sure};
  const std::vector<int> lab{2};
  const std::vector<double> b0{0.0};
  CHECK(loss(one, lab, b0) - 0.5 * std::log(2 * kPi) <= 1.1e-9);

  CHECK_THROWS_AS(loss(one, labels, b0), DomainError);
}

TEST_CASE("composed-model gradient matches finite differences") {
  for (auto arch : kArchs) {
    const auto w = init_weights(small(arch), 7);
    const auto data = separable_set(3, 4, 12, 8);
    const auto r = gradient_check(w, data, 100, 1e-5, 9);
    CAPTURE(architecture_name(arch));
    CHECK(r.coordinates == 100);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("zero learning rate leaves weights untouched") {
  const auto data = separable_set(16, 4, 12, 10);
  TrainConfig tc;
  tc.lr = 0.0;
  tc.epochs = 3;
  tc.batch = 8;
  tc.seed = 2;
  const auto init = init_weights(small(Architecture::kTransformer), 2);
  const auto r = train(data, small(Architecture::kTransformer), tc);
  for (std::size_t k = 0; k < init.tensors.size(); ++k) {
    CHECK(r.weights.tensors[k].value == init.tensors[k].value);
  }
}

TEST_CASE("training overfits a small separable set and is reproducible") {
  for (auto arch : kArchs) {
    ModelConfig mc = small(arch, 32);
    const auto data = separable_set(32, 4, 12, 11);
    TrainConfig tc;
    tc.epochs = 500;
    tc.batch = 32;
    tc.lr = 1e-2;
    tc.seed = 5;
    const auto r = train(data, mc, tc);
    double ce = 0.0;
    int n = 0;
    for (const auto& s : data) {
      const auto p = forward(r.weights, s.obs, s.actions);
      for (int t = 0; t < s.horizon(); ++t) {
        ce -= std::log(p[t].event_probs[s.event_labels[t]]);
        ++n;
      }
    }
    CAPTURE(architecture_name(arch));
    CHECK(r.steps <= 500);
    CHECK(ce / n < 0.1);
    if (arch == Architecture::kTransformer) {
      tc.epochs = 5;
      const auto a = train(data, mc, tc);
      const auto b = train(data, mc, tc);
      CHECK(a.epoch_loss == b.epoch_loss);
    }
  }
}

TEST_CASE("non-finite loss aborts with the batch index") {
  auto data = separable_set(8, 3, 12, 12);
  data[5].bearing_labels[1] = INFINITY;
  TrainConfig tc;
  tc.batch = 4;
  tc.epochs = 1;
  try {
    train(data, small(Architecture::kLstm), tc);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.batch() <= 1);
  }
  CHECK_THROWS_AS(train({}, small(Architecture::kLstm), tc), DomainError);
}

TEST_CASE("weights round-trip through disk") {
  const auto dir = std::filesystem::temp_directory_path() / "offroad_weights_rt";
  std::filesystem::remove_all(dir);
  for (auto arch : kArchs) {
    const auto w = init_weights(small(arch), 13);
    save_weights(w, dir);
    const auto r = load_weights(dir);
    CHECK(r.config == w.config);
    CHECK(r.seed == 13);
    REQUIRE(r.tensors.size() == w.tensors.size());
    for (std::size_t k = 0; k < w.tensors.size(); ++k) {
      CHECK(r.tensors[k].name == w.tensors[k].name);
      CHECK(r.tensors[k].value == w.tensors[k].value);
    }
    std::filesystem::remove_all(dir);
  }
  CHECK_THROWS(load_weights(dir));
}

TEST_CASE("manifest shapes follow the config") {
  for (auto arch : kArchs) {
    const auto mc = small(arch);
    const auto w = init_weights(mc, 1);
    const auto manifest = weight_manifest(mc);
    REQUIRE(manifest.size() == w.tensors.size());
    std::size_t total = 0;
    for (std::size_t k = 0; k < manifest.size(); ++k) {
      CHECK(manifest[k].first == w.tensors[k].name);
      CHECK(manifest[k].second.first == w.tensors[k].value.rows());
      CHECK(manifest[k].second.second == w.tensors[k].value.cols());
      total += static_cast<std::size_t>(w.tensors[k].value.size());
    }
    CHECK(total == w.parameter_count());
    CHECK(w.all_finite());
  }
  CHECK(parse_architecture("lstm") == Architecture::kLstm);
  CHECK_THROWS_AS(parse_architecture("gru"), DomainError);
}

TEST_CASE("per-step metrics of a perfect predictor") {
  const auto data = separable_set(90, 5, 12, 14);
  const auto m = per_step_metrics(
      [](const TrajectorySample& s) {
        std::vector<StepPrediction> out(static_cast<std::size_t>(s.horizon()));
        for (int t = 0; t < s.horizon(); ++t) {
          out[t].event_probs.fill(0.0);
          out[t].event_probs[s.event_labels[t]] = 1.0;
          out[t].bearing_mu = s.bearing_labels[t];
        }
        return out;
      },
      data);
  REQUIRE(m.size() == 5);
  for (const auto& r : m) {
    CHECK(r.macro_f1 == 1.0);
    CHECK(r.accuracy == 1.0);
    CHECK(r.bearing_mae == 0.0);
  }
}

TEST_CASE("per-step metrics of a uniform random predictor") {
  Rng labels(15);
  std::vector<TrajectorySample> data;
  for (int i = 0; i < 6000; ++i) {
    TrajectorySample s;
    s.obs = Eigen::VectorXd::Zero(12);
    s.actions = Matrix::Zero(2, 3);
    s.event_labels = {static_cast<int>(labels.below(9)), static_cast<int>(labels.below(9))};
    s.bearing_labels = {0.0, 0.0};
    data.push_back(std::move(s));
  }
  Rng guess(16);
  const auto m = per_step_metrics(
      [&](const TrajectorySample&) {
        std::vector<StepPrediction> out(2);
        for (auto& p : out) {
          p.event_probs.fill(0.0);
          p.event_probs[guess.below(9)] = 1.0;
        }
        return out;
      },
      data);
  for (const auto& r : m) CHECK(std::abs(r.accuracy - 1.0 / 9.0) <= 0.02);
}

TEST_CASE("classes absent from the test set are skipped") {
  auto data = separable_set(4, 2, 12, 17);  // classes 0..3 only
  const auto m = per_step_metrics(
      [](const TrajectorySample& s) {
        std::vector<StepPrediction> out(static_cast<std::size_t>(s.horizon()));
        for (int t = 0; t < s.horizon(); ++t) out[t].event_probs[s.event_labels[t]] = 1.0;
        return out;
      },
      data);
  CHECK(m[0].skipped_classes == 5);
  CHECK(m[0].macro_f1 == 1.0);
}

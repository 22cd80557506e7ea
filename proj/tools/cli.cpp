#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "offroad/csv.hpp"
#include "offroad/parallel.hpp"
#include "offroad/stats.hpp"

namespace offroad::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON run configuration");
  sub->add_option("--seed", c.seed, "override the run seed");
  sub->add_option("--output-dir", c.output_dir, "override output_dir");
}

// Loads, applies overrides, creates output_dir and echoes the resolved config.
RunConfig resolve(const Common& c) {
  RunConfig rc;
  if (!c.config.empty()) {
    try {
      rc = load_config(c.config);
    } catch (const std::ios_base::failure& e) {
      throw UsageError(e.what());
    }
  }
  if (c.seed) rc.seed = *c.seed;
  if (!c.output_dir.empty()) rc.output_dir = c.output_dir;
  fs::create_directories(rc.output_dir);
  save_config(rc, fs::path(rc.output_dir) / "config.resolved.json");
  return rc;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError(what + ": not an integer list: " + s);
    }
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

std::vector<double> parse_double_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError(what + ": not a number list: " + s);
    }
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

std::vector<std::vector<double>> metric_rows(const std::vector<StepMetrics>& m) {
  std::vector<std::vector<double>> rows;
  for (const auto& s : m) rows.push_back({double(s.step), s.macro_f1, s.accuracy, s.bearing_mae});
  return rows;
}

std::vector<std::vector<double>> trace_rows(const UncertaintyTrace& tr) {
  std::vector<std::vector<double>> rows;
  for (std::size_t t = 0; t < tr.size(); ++t) {
    rows.push_back({double(t), tr[t].mi_class, tr[t].mi_kl, tr[t].mi_bhatt, tr[t].sigma});
  }
  return rows;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string beta_tag(double beta) {
  std::string s = format_double(beta);
  std::replace(s.begin(), s.end(), '.', 'p');
  return s;
}

// ---- subcommands ----

int cmd_gen_world(const Common& c, std::ostream& out) {
  const RunConfig rc = resolve(c);
  const TerrainWorld world = generate_world(rc.seed, rc.world);
  const fs::path dir = rc.output_dir;
  save_world(world, dir / "world.bin");
  std::array<double, kNumEvents> counts{};
  for (auto l : world.labels()) counts[l] += 1.0;
  std::vector<std::vector<double>> rows;
  const double n = static_cast<double>(world.labels().size());
  for (int k = 0; k < kNumEvents; ++k) {
    rows.push_back({double(k), counts[static_cast<std::size_t>(k)] / n,
                    world.class_frequencies()[static_cast<std::size_t>(k)]});
  }
  emit_csv(dir / "world_classes.csv", {"class", "fraction", "prior"}, rows);
  out << "world " << world.size() << "x" << world.size() << " written to "
      << (dir / "world.bin").string() << "\n";
  return 0;
}

int cmd_make_dataset(const Common& c, std::optional<int> horizon, std::ostream& out) {
  const RunConfig rc = resolve(c);
  const int h = horizon.value_or(rc.dataset.horizon);
  const Datasets d = build_datasets(rc, h);
  const fs::path dir = rc.output_dir;
  save_dataset(d.train, dir / "train.bin");
  save_dataset(d.test, dir / "test.bin");
  json summary = {{"horizon", h},
                  {"obs_dim", rc.observation.feature_count()},
                  {"train", {{"samples", d.train.size()}, {"hash", hex(dataset_hash(d.train))}}},
                  {"test", {{"samples", d.test.size()}, {"hash", hex(dataset_hash(d.test))}}}};
  std::ofstream(dir / "dataset_summary.json", std::ios::binary) << summary.dump(2) << '\n';
  out << "train " << d.train.size() << " samples, test " << d.test.size() << " samples, H=" << h
      << "\n";
  return 0;
}

std::vector<TrajectorySample> training_set(const RunConfig& rc, const std::string& dataset_dir) {
  if (!dataset_dir.empty()) return load_dataset(fs::path(dataset_dir) / "train.bin");
  return build_datasets(rc, rc.dataset.horizon).train;
}

int cmd_train(const Common& c, const std::string& arch, int member, const std::string& dataset_dir,
              std::ostream& out) {
  RunConfig rc = resolve(c);
  if (!arch.empty()) rc.model.architecture = parse_architecture(arch);
  if (member < 0) throw UsageError("--member must be >= 0");
  const auto train_set = training_set(rc, dataset_dir);
  const TrainResult r = train_member(rc, train_set, member);
  const fs::path dir = fs::path(rc.output_dir) /
                       ("model_" + std::string(architecture_name(rc.model.architecture)) + "_m" +
                        std::to_string(member));
  save_weights(r.weights, dir);
  std::vector<std::vector<double>> rows;
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) rows.push_back({double(e), r.epoch_loss[e]});
  emit_csv(fs::path(rc.output_dir) / "train_loss.csv", {"epoch", "loss"}, rows);
  out << "trained " << architecture_name(rc.model.architecture) << " member " << member
      << ", final epoch loss " << format_double(r.epoch_loss.back()) << "\n";
  return 0;
}

int cmd_train_ensemble(const Common& c, const std::string& dataset_dir, std::ostream& out) {
  const RunConfig rc = resolve(c);
  const auto train_set = training_set(rc, dataset_dir);
  std::vector<TrainResult> results(static_cast<std::size_t>(rc.ensemble.members));
  parallel_for(results.size(), [&](std::size_t m) {
    results[m] = train_member(rc, train_set, static_cast<int>(m));
  });
  std::vector<ModelWeights> members;
  std::vector<std::vector<double>> rows;
  for (std::size_t m = 0; m < results.size(); ++m) {
    members.push_back(results[m].weights);
    for (std::size_t e = 0; e < results[m].epoch_loss.size(); ++e) {
      rows.push_back({double(m), double(e), results[m].epoch_loss[e]});
    }
  }
  save_ensemble(members, fs::path(rc.output_dir) / "ensemble");
  emit_csv(fs::path(rc.output_dir) / "ensemble_loss.csv", {"member", "epoch", "loss"}, rows);
  out << "trained " << members.size() << " members into "
      << (fs::path(rc.output_dir) / "ensemble").string() << "\n";
  return 0;
}

int cmd_eval_model(const Common& c, const std::string& weights_dir, const std::string& horizons,
                   const std::string& predictor, std::optional<int> test_samples,
                   std::ostream& out) {
  const RunConfig rc = resolve(c);
  if (predictor != "model" && predictor != "perfect" && predictor != "uniform") {
    throw UsageError("--predictor must be model, perfect or uniform");
  }
  const auto hs = parse_int_list(horizons, "--horizons");
  const int n = test_samples.value_or(rc.dataset.test_samples);
  if (n < 1) throw UsageError("--test-samples must be >= 1");

  std::optional<ModelWeights> weights;
  if (predictor == "model") {
    if (!weights_dir.empty()) {
      weights = load_weights(weights_dir);
    } else {
      const auto train_set = build_datasets(rc, rc.dataset.horizon).train;
      weights = train_member(rc, train_set, 0).weights;
      save_weights(*weights, fs::path(rc.output_dir) / "model");
    }
  }
  for (int h : hs) {
    const auto test = build_test_set(rc, h, n);
    std::vector<StepMetrics> m;
    if (weights) {
      m = per_step_metrics(*weights, test);
    } else if (predictor == "perfect") {
      m = per_step_metrics(
          [](const TrajectorySample& s) {
            std::vector<StepPrediction> p(static_cast<std::size_t>(s.horizon()));
            for (std::size_t t = 0; t < p.size(); ++t) {
              p[t].event_probs[static_cast<std::size_t>(s.event_labels[t])] = 1.0;
              p[t].bearing_mu = s.bearing_labels[t];
            }
            return p;
          },
          test);
    } else {
      Rng rng(mix_seed(rc.seed, 0x756e69));
      m = per_step_metrics(
          [&](const TrajectorySample& s) {
            std::vector<StepPrediction> p(static_cast<std::size_t>(s.horizon()));
            for (auto& step : p) {
              step.event_probs[rng.below(kNumEvents)] = 1.0;
              step.bearing_mu = rng.uniform(-kPi, kPi);
            }
            return p;
          },
          test);
    }
    const std::string name = predictor == "model" ? "metrics_h" + std::to_string(h) + ".csv"
                                                  : "metrics_" + predictor + "_h" +
                                                        std::to_string(h) + ".csv";
    emit_csv(fs::path(rc.output_dir) / name, {"step", "macro_f1", "accuracy", "bearing_mae"},
             metric_rows(m));
    out << name << ": step 0 accuracy " << format_double(m.front().accuracy) << ", step "
        << h - 1 << " accuracy " << format_double(m.back().accuracy) << "\n";
  }
  return 0;
}

int cmd_uncertainty_curve(const Common& c, const std::string& ensemble_dir,
                          std::optional<int> horizon, std::optional<int> test_samples,
                          std::ostream& out) {
  const RunConfig rc = resolve(c);
  const int h = horizon.value_or(rc.dataset.horizon);
  const int n = test_samples.value_or(rc.dataset.test_samples);
  if (n < 1) throw UsageError("--test-samples must be >= 1");
  const auto members = obtain_ensemble(rc, ensemble_dir);
  const auto test = build_test_set(rc, h, n);
  const UncertaintyTrace tr =
      mean_uncertainty(members, test, rc.ensemble.weights, rc.ensemble.distance);
  emit_csv(fs::path(rc.output_dir) / "uncertainty_curve.csv",
           {"step", "mi_class", "mi_kl", "mi_bhatt", "sigma"}, trace_rows(tr));
  std::vector<double> steps, cls, kl, bh, sg;
  for (std::size_t t = 0; t < tr.size(); ++t) {
    steps.push_back(double(t));
    cls.push_back(tr[t].mi_class);
    kl.push_back(tr[t].mi_kl);
    bh.push_back(tr[t].mi_bhatt);
    sg.push_back(tr[t].sigma);
  }
  const std::vector<std::vector<double>> trend = {
      {0, spearman(steps, cls)}, {1, spearman(steps, kl)}, {2, spearman(steps, bh)},
      {3, spearman(steps, sg)}};
  emit_csv(fs::path(rc.output_dir) / "uncertainty_trend.csv", {"quantity", "spearman_vs_step"},
           trend);
  out << "spearman(step, MI): class " << format_double(trend[0][1]) << ", kl "
      << format_double(trend[1][1]) << ", bhattacharyya " << format_double(trend[2][1])
      << ", sigma " << format_double(trend[3][1]) << "\n";
  return 0;
}

int cmd_run_episodes(const Common& c, const std::string& ensemble_dir,
                     std::optional<int> episodes, const std::string& betas_s, std::ostream& out) {
  const RunConfig rc = resolve(c);
  const int n = episodes.value_or(rc.planner.episodes);
  if (n < 1) throw UsageError("--episodes must be >= 1");
  const std::vector<double> betas =
      betas_s.empty() ? std::vector<double>{rc.mpc.beta_sigma, 0.0}
                      : parse_double_list(betas_s, "--betas");
  for (double b : betas) {
    if (!(b >= 0.0)) throw UsageError("--betas must be >= 0");
  }
  const auto members = obtain_ensemble(rc, ensemble_dir);
  const EnsembleModel model(members, rc.ensemble.weights, rc.ensemble.distance);
  const auto arms = run_study(rc, model, betas, n);

  const fs::path dir = rc.output_dir;
  fs::create_directories(dir / "ticks");
  std::vector<std::vector<double>> rows;
  for (const auto& arm : arms) {
    for (std::size_t i = 0; i < arm.episodes.size(); ++i) {
      const auto& m = arm.episodes[i].metrics;
      rows.push_back({double(i), arm.beta_sigma, m.success ? 1.0 : 0.0, double(m.ticks),
                      m.mean_speed, m.speed_variance, double(m.collision_events), m.mean_sigma,
                      m.expected_return_avg});
      char name[64];
      std::snprintf(name, sizeof name, "episode_%03zu_beta_%s.csv", i,
                    beta_tag(arm.beta_sigma).c_str());
      emit_csv(dir / "ticks" / name, tick_header(), tick_rows(arm.episodes[i]));
    }
  }
  emit_csv(dir / "episodes.csv",
           {"episode", "beta_sigma", "success", "ticks", "mean_speed", "speed_variance",
            "collision_events", "mean_sigma", "expected_return_avg"},
           rows);
  if (arms.size() >= 2) {
    const StudySummary s = summarize_study(arms[0], arms[1]);
    emit_csv(dir / "study.csv",
             {"metric", "treated_beta", "control_beta", "treated_mean", "control_mean", "wins",
              "pairs", "p_value"},
             {{0, arms[0].beta_sigma, arms[1].beta_sigma, s.mean_speed[0], s.mean_speed[1],
               double(s.speed_wins), double(s.pairs), s.speed_p},
              {1, arms[0].beta_sigma, arms[1].beta_sigma, s.mean_sigma[0], s.mean_sigma[1],
               double(s.sigma_wins), double(s.pairs), s.sigma_p}});
    out << "beta " << format_double(arms[0].beta_sigma) << " vs " << format_double(arms[1].beta_sigma)
        << ": mean speed " << format_double(s.mean_speed[0]) << " vs "
        << format_double(s.mean_speed[1]) << " (slower in " << s.speed_wins << "/" << s.pairs
        << ", p=" << format_double(s.speed_p) << "); mean sigma " << format_double(s.mean_sigma[0])
        << " vs " << format_double(s.mean_sigma[1]) << " (lower in " << s.sigma_wins << "/"
        << s.pairs << ", p=" << format_double(s.sigma_p) << ")\n";
  }
  return 0;
}

int cmd_grad_check(const Common& c, std::ostream& out) {
  const RunConfig rc = resolve(c);
  Rng rng(rc.seed);
  double worst = 0.0;
  std::vector<std::vector<double>> rows;
  for (Architecture a : {Architecture::kTransformer, Architecture::kLstm}) {
    ModelConfig mc;
    mc.architecture = a;
    mc.obs_dim = 12;
    mc.width = 8;
    mc.heads = 2;
    mc.layers = 2;
    const ModelWeights w = init_weights(mc, rng.next_u64());
    std::vector<TrajectorySample> batch(3);
    for (auto& s : batch) {
      s.obs = Eigen::VectorXd(mc.obs_dim);
      for (int i = 0; i < mc.obs_dim; ++i) s.obs[i] = rng.normal();
      s.actions = Matrix(4, 3);
      for (int t = 0; t < 4; ++t) {
        s.actions(t, 0) = rng.uniform(-kDeltaMax, kDeltaMax);
        s.actions(t, 1) = rng.uniform();
        s.actions(t, 2) = throttle_to_dt(s.actions(t, 1));
        s.event_labels.push_back(static_cast<int>(rng.below(kNumEvents)));
        s.bearing_labels.push_back(rng.uniform(-0.5, 0.5));
      }
    }
    const GradCheckResult r = gradient_check(w, batch, 100, 1e-5, rng.next_u64());
    worst = std::max(worst, r.max_rel_error);
    rows.push_back({a == Architecture::kTransformer ? 0.0 : 1.0, double(r.coordinates),
                    r.max_rel_error});
    out << architecture_name(a) << " max relative error: " << format_double(r.max_rel_error)
        << "\n";
  }
  emit_csv(fs::path(rc.output_dir) / "grad_check.csv",
           {"architecture", "coordinates", "max_rel_error"}, rows);
  out << "max relative error: " << format_double(worst) << "\n";
  if (!(worst < 1e-4)) {
    throw std::runtime_error("gradient check failed: " + format_double(worst) + " >= 1e-4");
  }
  return 0;
}

int cmd_bench_optim(const Common& c, int seeds, std::ostream& out) {
  const RunConfig rc = resolve(c);
  if (seeds < 1) throw UsageError("--seeds must be >= 1");
  auto sphere = [](const Eigen::VectorXd& x) { return x.squaredNorm(); };
  auto rosen = [](const Eigen::VectorXd& x) {
    return 100.0 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1.0 - x[0], 2);
  };
  std::vector<std::vector<double>> rows;
  for (int k = 0; k < seeds; ++k) {
    const std::uint64_t seed = mix_seed(rc.seed, static_cast<std::uint64_t>(k));
    BoxProblem p4;
    p4.dim = 4;
    p4.lower = Eigen::VectorXd::Constant(4, -5.0);
    p4.upper = Eigen::VectorXd::Constant(4, 5.0);
    p4.objective = sphere;
    p4.seed = seed;
    CemConfig cem;
    cem.population = 64;
    cem.iters = 50;
    const auto a = cem_minimize(p4, cem);
    rows.push_back({0, 0, double(k), a.best_f, a.best_x.norm(), double(a.evaluations)});

    p4.budget = 3000;
    CmaConfig cma;
    cma.iters = 100000;
    cma.init_sigma = 2.0;
    const auto b = cma_minimize(p4, cma);
    rows.push_back({1, 0, double(k), b.best_f, b.best_x.norm(), double(b.evaluations)});

    BoxProblem r2;
    r2.dim = 2;
    r2.lower = Eigen::VectorXd::Constant(2, -5.0);
    r2.upper = Eigen::VectorXd::Constant(2, 5.0);
    r2.objective = rosen;
    r2.seed = seed;
    r2.budget = 5000;
    CmaConfig cr;
    cr.iters = 100000;
    cr.init_sigma = 0.5;
    cr.init_mean = Eigen::Vector2d(-1.0, 1.0);
    const auto d = cma_minimize(r2, cr);
    rows.push_back({1, 1, double(k), d.best_f, (d.best_x - Eigen::Vector2d(1, 1)).norm(),
                    double(d.evaluations)});
  }
  emit_csv(fs::path(rc.output_dir) / "bench_optim.csv",
           {"optimizer", "problem", "seed_index", "best_f", "distance_to_optimum", "evaluations"},
           rows);
  double cem_worst = 0, rosen_worst = 0;
  for (const auto& r : rows) {
    if (r[0] == 0) cem_worst = std::max(cem_worst, r[4]);
    if (r[0] == 1 && r[1] == 1) rosen_worst = std::max(rosen_worst, r[3]);
  }
  out << "CEM sphere worst |x| " << format_double(cem_worst) << "; CMA-ES Rosenbrock worst f "
      << format_double(rosen_worst) << "\n";
  return 0;
}

}  // namespace

// ---- library helpers ----

std::uint64_t member_seed(std::uint64_t run_seed, int member) {
  return mix_seed(run_seed, 1000 + static_cast<std::uint64_t>(member));
}

Datasets build_datasets(const RunConfig& rc, int horizon) {
  TerrainWorld world = generate_world(rc.seed, rc.world);
  DatasetConfig dc = rc.dataset_config();
  dc.horizon = horizon;
  auto train = make_dataset(world, rc.dataset.samples, mix_seed(rc.seed, 11), dc);
  auto test = make_dataset(world, rc.dataset.test_samples, mix_seed(rc.seed, 12), dc);
  return {std::move(world), std::move(train), std::move(test)};
}

std::vector<TrajectorySample> build_test_set(const RunConfig& rc, int horizon, int samples) {
  const TerrainWorld world = generate_world(rc.seed, rc.world);
  DatasetConfig dc = rc.dataset_config();
  dc.horizon = horizon;
  return make_dataset(world, samples, mix_seed(rc.seed, 12), dc);
}

TrainResult train_member(const RunConfig& rc, std::span<const TrajectorySample> train_set,
                         int member) {
  TrainConfig tc = rc.train;
  tc.seed = member_seed(rc.seed, member);
  return train(train_set, rc.model, tc);
}

std::vector<ModelWeights> train_ensemble(const RunConfig& rc,
                                         std::span<const TrajectorySample> train_set) {
  std::vector<ModelWeights> members(static_cast<std::size_t>(rc.ensemble.members));
  parallel_for(members.size(), [&](std::size_t m) {
    members[m] = train_member(rc, train_set, static_cast<int>(m)).weights;
  });
  return members;
}

void save_ensemble(const std::vector<ModelWeights>& members, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t m = 0; m < members.size(); ++m) {
    save_weights(members[m], dir / ("member_" + std::to_string(m)));
  }
}

std::vector<ModelWeights> load_ensemble(const fs::path& dir) {
  std::vector<ModelWeights> members;
  for (int m = 0;; ++m) {
    const fs::path p = dir / ("member_" + std::to_string(m));
    if (!fs::exists(p)) break;
    members.push_back(load_weights(p));
  }
  if (members.size() < 2) {
    throw std::runtime_error("ensemble directory " + dir.string() +
                             " needs member_0, member_1, ...");
  }
  return members;
}

std::vector<ModelWeights> obtain_ensemble(const RunConfig& rc, const std::string& dir) {
  const std::string d = !dir.empty() ? dir : rc.ensemble.weights_dir;
  if (!d.empty()) return load_ensemble(d);
  const auto data = build_datasets(rc, rc.dataset.horizon);
  return train_ensemble(rc, data.train);
}

UncertaintyTrace mean_uncertainty(const std::vector<ModelWeights>& members,
                                  std::span<const TrajectorySample> test_set,
                                  const UncertaintyWeights& weights, Distance distance) {
  if (test_set.empty()) throw DomainError("test set is empty");
  const int h = test_set.front().horizon();
  UncertaintyTrace sum(static_cast<std::size_t>(h), UncertaintyStep{0.0, 0.0, 0.0, 0.0});
  constexpr std::size_t kChunk = 256;
  for (std::size_t s = 0; s < test_set.size(); s += kChunk) {
    const auto part = test_set.subspan(s, std::min(kChunk, test_set.size() - s));
    for (const auto& e : ensemble_predict_batch(members, ModelBatch::from_samples(part))) {
      const auto tr = uncertainty_trace(e, weights, distance);
      for (std::size_t t = 0; t < tr.size(); ++t) {
        sum[t].mi_class += tr[t].mi_class;
        sum[t].mi_kl += tr[t].mi_kl;
        sum[t].mi_bhatt += tr[t].mi_bhatt;
        sum[t].sigma += tr[t].sigma;
      }
    }
  }
  const double n = static_cast<double>(test_set.size());
  for (auto& u : sum) {
    u.mi_class /= n;
    u.mi_kl /= n;
    u.mi_bhatt /= n;
    u.sigma /= n;
  }
  return sum;
}

TerrainWorld episode_world(const RunConfig& rc, std::uint64_t episode_seed) {
  if (rc.planner.terrain == "empty") {
    return uniform_world(rc.world.size, rc.world.cell_size, static_cast<int>(Event::kSmoothRoad));
  }
  return generate_world(mix_seed(episode_seed, 1), rc.world);
}

EpisodeSetup make_episode_setup(const TerrainWorld& world, const RunConfig& rc,
                                std::uint64_t episode_seed) {
  Rng rng(mix_seed(episode_seed, 2));
  const double margin = 3.0;
  const double extent = world.extent();
  const double d = rc.planner.goal_distance;
  if (extent - 2 * margin <= 0.0) throw GenerationError("world too small for episodes");
  auto free_disc = [&](double x, double y, double r) {
    for (double dx = -r; dx <= r; dx += 0.25) {
      for (double dy = -r; dy <= r; dy += 0.25) {
        if (dx * dx + dy * dy > r * r) continue;
        const auto l = world.label_at(x + dx, y + dy);
        if (!l || rc.event.is_collision(*l)) return false;
      }
    }
    return true;
  };
  for (int tries = 0; tries < 10000; ++tries) {
    const double psi = rng.uniform(-kPi, kPi);
    const double sx = rng.uniform(margin, extent - margin);
    const double sy = rng.uniform(margin, extent - margin);
    const double gx = sx + d * std::cos(psi);
    const double gy = sy + d * std::sin(psi);
    if (gx < margin || gy < margin || gx > extent - margin || gy > extent - margin) continue;
    if (!free_disc(sx, sy, 1.5) || !free_disc(gx, gy, rc.planner.goal_radius)) continue;
    EpisodeSetup s;
    s.start = {sx, sy, psi, rc.planner.start_speed, world.slope_at(sx, sy), kSigmaMin};
    s.goal = {gx, gy};
    s.true_params = rc.vehicle;
    s.seed = mix_seed(episode_seed, 3);
    return s;
  }
  throw GenerationError("no free start/goal pair found");
}

std::vector<ArmResult> run_study(const RunConfig& rc, const WorldModel& model,
                                 const std::vector<double>& betas, int episodes) {
  std::vector<ArmResult> arms(betas.size());
  for (std::size_t a = 0; a < betas.size(); ++a) {
    arms[a].beta_sigma = betas[a];
    arms[a].episodes.resize(static_cast<std::size_t>(episodes));
  }
  const std::size_t n = static_cast<std::size_t>(episodes);
  parallel_for(betas.size() * n, [&](std::size_t job) {
    const std::size_t a = job / n;
    const std::size_t i = job % n;
    const std::uint64_t es = mix_seed(rc.seed, 5000 + static_cast<std::uint64_t>(i));
    const TerrainWorld world = episode_world(rc, es);
    const EpisodeSetup setup = make_episode_setup(world, rc, es);
    PlannerConfig cfg = rc.planner_config();
    cfg.mpc.beta_sigma = betas[a];
    arms[a].episodes[i] = run_episode(world, setup, model, cfg);
  });
  return arms;
}

StudySummary summarize_study(const ArmResult& treated, const ArmResult& control) {
  if (treated.episodes.size() != control.episodes.size()) {
    throw DomainError("study arms differ in episode count");
  }
  StudySummary s;
  int speed_pairs = 0, sigma_pairs = 0;
  const double n = static_cast<double>(treated.episodes.size());
  for (std::size_t i = 0; i < treated.episodes.size(); ++i) {
    const auto& t = treated.episodes[i].metrics;
    const auto& c = control.episodes[i].metrics;
    s.mean_speed[0] += t.mean_speed / n;
    s.mean_speed[1] += c.mean_speed / n;
    s.mean_sigma[0] += t.mean_sigma / n;
    s.mean_sigma[1] += c.mean_sigma / n;
    if (t.mean_speed != c.mean_speed) {
      ++speed_pairs;
      if (t.mean_speed < c.mean_speed) ++s.speed_wins;
    }
    if (t.mean_sigma != c.mean_sigma) {
      ++sigma_pairs;
      if (t.mean_sigma < c.mean_sigma) ++s.sigma_wins;
    }
  }
  s.pairs = static_cast<int>(treated.episodes.size());
  s.speed_p = sign_test_p(s.speed_wins, speed_pairs);
  s.sigma_p = sign_test_p(s.sigma_wins, sigma_pairs);
  return s;
}

// ---- dispatch ----

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hybrid offroad planner experiments", "offroad"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common common;
  std::string arch, dataset_dir, weights_dir, horizons = "10,20,40", predictor = "model",
                                              ensemble_dir, betas;
  int member = 0, seeds = 5;
  std::optional<int> horizon, test_samples, episodes;

  auto* gen_world = app.add_subcommand("gen-world", "generate a terrain world");
  add_common(gen_world, common);

  auto* make_ds = app.add_subcommand("make-dataset", "sample train/test trajectory sets");
  add_common(make_ds, common);
  make_ds->add_option("--horizon", horizon, "prediction horizon (10, 20 or 40)");

  auto* train_cmd = app.add_subcommand("train", "train one predictive model");
  add_common(train_cmd, common);
  train_cmd->add_option("--arch", arch, "transformer or lstm")
      ->check(CLI::IsMember({"transformer", "lstm"}));
  train_cmd->add_option("--member", member, "member index (selects the seed)");
  train_cmd->add_option("--dataset", dataset_dir, "directory holding train.bin");

  auto* train_ens = app.add_subcommand("train-ensemble", "train the model ensemble");
  add_common(train_ens, common);
  train_ens->add_option("--dataset", dataset_dir, "directory holding train.bin");

  auto* eval = app.add_subcommand("eval-model", "per-step metrics over horizons");
  add_common(eval, common);
  eval->add_option("--weights", weights_dir, "model directory (trained on the fly if absent)");
  eval->add_option("--horizons", horizons, "comma-separated horizons");
  eval->add_option("--predictor", predictor, "model, perfect or uniform");
  eval->add_option("--test-samples", test_samples, "held-out samples per horizon");

  auto* unc = app.add_subcommand("uncertainty-curve", "mean per-step ensemble MI");
  add_common(unc, common);
  unc->add_option("--ensemble", ensemble_dir, "directory with member_<k> subdirectories");
  unc->add_option("--horizon", horizon, "prediction horizon");
  unc->add_option("--test-samples", test_samples, "held-out samples");

  auto* runep = app.add_subcommand("run-episodes", "paired closed-loop study over beta_sigma");
  add_common(runep, common);
  runep->add_option("--ensemble", ensemble_dir, "directory with member_<k> subdirectories");
  runep->add_option("--episodes", episodes, "episodes per arm");
  runep->add_option("--betas", betas, "comma-separated beta_sigma arms (default: config, 0)");

  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient check");
  add_common(grad, common);

  auto* bench = app.add_subcommand("bench-optim", "optimizer benchmarks");
  add_common(bench, common);
  bench->add_option("--seeds", seeds, "number of seeds");

  std::vector<std::string> storage{"offroad"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen_world->parsed()) return cmd_gen_world(common, out);
    if (make_ds->parsed()) return cmd_make_dataset(common, horizon, out);
    if (train_cmd->parsed()) return cmd_train(common, arch, member, dataset_dir, out);
    if (train_ens->parsed()) return cmd_train_ensemble(common, dataset_dir, out);
    if (eval->parsed()) {
      return cmd_eval_model(common, weights_dir, horizons, predictor, test_samples, out);
    }
    if (unc->parsed()) return cmd_uncertainty_curve(common, ensemble_dir, horizon, test_samples, out);
    if (runep->parsed()) return cmd_run_episodes(common, ensemble_dir, episodes, betas, out);
    if (grad->parsed()) return cmd_grad_check(common, out);
    if (bench->parsed()) return cmd_bench_optim(common, seeds, out);
  } catch (const ConfigError& e) {
    err << "config error at " << e.path() << ": " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  err << app.help();
  return 1;
}

int dispatch(const std::vector<std::string>& args) { return dispatch(args, std::cout, std::cerr); }

}  // namespace offroad::cli

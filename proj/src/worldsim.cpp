#include "offroad/worldsim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace offroad {

namespace {

using json = nlohmann::json;

void check_frequencies(const ClassFrequencies& f) {
  double s = 0.0;
  for (double x : f) {
    if (!(x >= 0.0)) throw DomainError("class frequencies must be non-negative");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-9) throw DomainError("class frequencies must sum to 1");
}

// Smooth value noise on a square lattice with the given spacing (in cells).
class ValueNoise {
 public:
  ValueNoise(int size, double spacing, Rng& rng)
      : spacing_(std::max(spacing, 1.0)),
        n_(static_cast<int>(std::ceil(size / spacing_)) + 2),
        lattice_(static_cast<std::size_t>(n_) * static_cast<std::size_t>(n_)) {
    for (double& v : lattice_) v = rng.uniform();
  }

  double at(int row, int col) const {
    const double fr = row / spacing_;
    const double fc = col / spacing_;
    const int r0 = static_cast<int>(fr);
    const int c0 = static_cast<int>(fc);
    const double tr = smooth(fr - r0);
    const double tc = smooth(fc - c0);
    const double a = node(r0, c0) * (1 - tc) + node(r0, c0 + 1) * tc;
    const double b = node(r0 + 1, c0) * (1 - tc) + node(r0 + 1, c0 + 1) * tc;
    return a * (1 - tr) + b * tr;
  }

 private:
  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }
  double node(int r, int c) const {
    return lattice_[static_cast<std::size_t>(r) * static_cast<std::size_t>(n_) + static_cast<std::size_t>(c)];
  }

  double spacing_;
  int n_;
  std::vector<double> lattice_;
};

std::vector<double> blob_field(int size, double scale, Rng& rng) {
  ValueNoise coarse(size, scale, rng);
  ValueNoise fine(size, scale / 2.0, rng);
  std::vector<double> f(static_cast<std::size_t>(size) * static_cast<std::size_t>(size));
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      f[static_cast<std::size_t>(r) * static_cast<std::size_t>(size) + static_cast<std::size_t>(c)] =
          0.7 * coarse.at(r, c) + 0.3 * fine.at(r, c);
    }
  }
  return f;
}

// Largest-remainder apportionment of n cells.
std::array<long, kNumEvents> class_counts(const ClassFrequencies& f, long n) {
  std::array<long, kNumEvents> counts{};
  std::array<double, kNumEvents> rem{};
  long assigned = 0;
  for (int k = 0; k < kNumEvents; ++k) {
    const double exact = f[static_cast<std::size_t>(k)] * static_cast<double>(n);
    counts[static_cast<std::size_t>(k)] = static_cast<long>(std::floor(exact));
    rem[static_cast<std::size_t>(k)] = exact - std::floor(exact);
    assigned += counts[static_cast<std::size_t>(k)];
  }
  std::array<int, kNumEvents> order{};
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return rem[static_cast<std::size_t>(a)] > rem[static_cast<std::size_t>(b)]; });
  for (int i = 0; assigned < n; ++i, ++assigned) ++counts[static_cast<std::size_t>(order[static_cast<std::size_t>(i % kNumEvents)])];
  return counts;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

ClassFrequencies default_class_frequencies() {
  const std::array<double, kNumEvents> counts = {586, 1631, 517, 66, 267, 164, 6421, 10632, 698};
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  ClassFrequencies f{};
  for (std::size_t k = 0; k < f.size(); ++k) f[k] = counts[k] / total;
  return f;
}

TerrainWorld::TerrainWorld(int size, double cell_size, std::uint64_t seed, ClassFrequencies frequencies)
    : size_(size),
      cell_size_(cell_size),
      seed_(seed),
      frequencies_(frequencies),
      labels_(static_cast<std::size_t>(size) * static_cast<std::size_t>(std::max(size, 0)), 0),
      slopes_(labels_.size(), 0.0) {
  if (size < 1) throw DomainError("world size must be positive");
  if (!(cell_size > 0.0)) throw DomainError("cell size must be positive");
  check_frequencies(frequencies);
}

std::size_t TerrainWorld::index(int row, int col) const {
  if (row < 0 || col < 0 || row >= size_ || col >= size_) throw DomainError("cell outside the world");
  return static_cast<std::size_t>(row) * static_cast<std::size_t>(size_) + static_cast<std::size_t>(col);
}

void TerrainWorld::set_label(int row, int col, int event) {
  if (event < 0 || event >= kNumEvents) throw DomainError("event index out of range");
  labels_[index(row, col)] = static_cast<std::uint8_t>(event);
}

void TerrainWorld::set_slope(int row, int col, double phi) { slopes_[index(row, col)] = phi; }

bool TerrainWorld::contains(double x, double y) const {
  return x >= 0.0 && y >= 0.0 && x < extent() && y < extent();
}

std::optional<int> TerrainWorld::label_at(double x, double y) const {
  if (!contains(x, y)) return std::nullopt;
  return label(static_cast<int>(y / cell_size_), static_cast<int>(x / cell_size_));
}

double TerrainWorld::slope_at(double x, double y) const {
  if (!contains(x, y)) return 0.0;
  return slope(static_cast<int>(y / cell_size_), static_cast<int>(x / cell_size_));
}

TerrainWorld generate_world(std::uint64_t seed, const WorldGenConfig& cfg) {
  if (cfg.size < 8) throw DomainError("world size must be >= 8");
  check_frequencies(cfg.frequencies);
  TerrainWorld world(cfg.size, cfg.cell_size, seed, cfg.frequencies);
  const long n = static_cast<long>(cfg.size) * cfg.size;
  const auto counts = class_counts(cfg.frequencies, n);

  std::array<int, kNumEvents> order{};
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return counts[static_cast<std::size_t>(a)] < counts[static_cast<std::size_t>(b)];
  });
  const int base = order.back();

  Rng rng(seed);
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  std::vector<int> label(static_cast<std::size_t>(n), base);
  // Rarer classes first: each claims the highest cells of its own noise field
  // among the still-free cells, giving contiguous blobs of exact total area.
  for (int i = 0; i + 1 < kNumEvents; ++i) {
    const int k = order[static_cast<std::size_t>(i)];
    Rng class_rng = rng.fork(static_cast<std::uint64_t>(k) + 1);
    const long want = counts[static_cast<std::size_t>(k)];
    if (want == 0) continue;
    const auto field = blob_field(cfg.size, cfg.blob_scale, class_rng);
    std::vector<std::pair<double, long>> free;
    free.reserve(static_cast<std::size_t>(n));
    for (long c = 0; c < n; ++c) {
      if (!taken[static_cast<std::size_t>(c)]) free.emplace_back(-field[static_cast<std::size_t>(c)], c);
    }
    std::nth_element(free.begin(), free.begin() + (want - 1), free.end());
    for (long j = 0; j < want; ++j) {
      const long c = free[static_cast<std::size_t>(j)].second;
      taken[static_cast<std::size_t>(c)] = true;
      label[static_cast<std::size_t>(c)] = k;
    }
  }
  Rng slope_rng = rng.fork(1000);
  const auto slope_field = blob_field(cfg.size, 2.0 * cfg.blob_scale, slope_rng);
  for (int r = 0; r < cfg.size; ++r) {
    for (int c = 0; c < cfg.size; ++c) {
      const auto i = static_cast<std::size_t>(r) * static_cast<std::size_t>(cfg.size) + static_cast<std::size_t>(c);
      world.set_label(r, c, label[i]);
      world.set_slope(r, c, cfg.max_slope * (2.0 * slope_field[i] - 1.0));
    }
  }
  return world;
}

TerrainWorld uniform_world(int size, double cell_size, int event) {
  if (event < 0 || event >= kNumEvents) throw DomainError("event index out of range");
  ClassFrequencies f{};
  f[static_cast<std::size_t>(event)] = 1.0;
  TerrainWorld w(size, cell_size, 0, f);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) w.set_label(r, c, event);
  }
  return w;
}

void save_world(const TerrainWorld& world, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  json header = {{"seed", world.seed()},
                 {"size", world.size()},
                 {"cell_size", world.cell_size()},
                 {"frequencies", world.class_frequencies()}};
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(world.labels().data()),
            static_cast<std::streamsize>(world.labels().size()));
  for (double s : world.slopes()) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(s);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

TerrainWorld load_world(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  const json header = json::parse(line);
  TerrainWorld world(header.at("size").get<int>(), header.at("cell_size").get<double>(),
                     header.at("seed").get<std::uint64_t>(),
                     header.at("frequencies").get<ClassFrequencies>());
  const int n = world.size();
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(n) * static_cast<std::size_t>(n));
  in.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      std::uint64_t bits = 0;
      in.read(reinterpret_cast<char*>(&bits), sizeof bits);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      world.set_label(r, c, labels[static_cast<std::size_t>(r) * static_cast<std::size_t>(n) + static_cast<std::size_t>(c)]);
      world.set_slope(r, c, std::bit_cast<double>(bits));
    }
  }
  if (!in) throw std::runtime_error("truncated world file " + path.string());
  return world;
}

int ObservationConfig::feature_count() const {
  return static_cast<int>(probe_distances.size()) * kNumEvents + 4 +
         static_cast<int>(ray_angles.size());
}

Eigen::VectorXd observe(const TerrainWorld& world, const VehicleState& s, std::uint64_t noise_seed,
                        const ObservationConfig& cfg) {
  if (!std::isfinite(s.x) || !std::isfinite(s.y) || !world.contains(s.x, s.y)) {
    throw ObservationError("vehicle is outside the world");
  }
  const int wall = static_cast<int>(Event::kOtherObstacles);
  auto cell_label = [&](int r, int c) {
    if (r < 0 || c < 0 || r >= world.size() || c >= world.size()) return wall;
    return world.label(r, c);
  };
  auto is_obstacle = [&](int e) {
    return std::find(cfg.obstacle_classes.begin(), cfg.obstacle_classes.end(), e) !=
           cfg.obstacle_classes.end();
  };
  Eigen::VectorXd f = Eigen::VectorXd::Zero(cfg.feature_count());
  const double ch = std::cos(s.psi);
  const double sh = std::sin(s.psi);
  const double cs = world.cell_size();
  int k = 0;
  for (double d : cfg.probe_distances) {
    const int r0 = static_cast<int>(std::floor((s.y + d * sh) / cs));
    const int c0 = static_cast<int>(std::floor((s.x + d * ch) / cs));
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) f(k + cell_label(r0 + dr, c0 + dc)) += 1.0 / 9.0;
    }
    k += kNumEvents;
  }
  f(k++) = world.slope_at(s.x, s.y) / 0.15;
  f(k++) = ch;
  f(k++) = sh;
  f(k++) = s.v / 3.0;
  const double step = 0.5 * cs;
  for (double a : cfg.ray_angles) {
    const double ca = std::cos(s.psi + a);
    const double sa = std::sin(s.psi + a);
    double hit = cfg.ray_range;
    for (double d = step; d <= cfg.ray_range; d += step) {
      const int r = static_cast<int>(std::floor((s.y + d * sa) / cs));
      const int c = static_cast<int>(std::floor((s.x + d * ca) / cs));
      if (is_obstacle(cell_label(r, c))) {
        hit = d;
        break;
      }
    }
    f(k++) = hit / cfg.ray_range;
  }
  if (cfg.noise_std > 0.0) {
    Rng rng(noise_seed);
    for (Eigen::Index i = 0; i < f.size(); ++i) f(i) += cfg.noise_std * rng.normal();
  }
  return f;
}

GroundTruth ground_truth(const TerrainWorld& world, std::span<const VehicleState> states,
                         std::span<const int> collision_classes) {
  GroundTruth gt;
  gt.steps.reserve(states.size());
  for (const VehicleState& s : states) {
    const auto e = world.label_at(s.x, s.y);
    if (!e) {
      gt.truncated = true;
      break;
    }
    StepTruth st;
    st.event = *e;
    st.collision = std::find(collision_classes.begin(), collision_classes.end(), *e) !=
                   collision_classes.end();
    st.bearing = s.psi;
    gt.steps.push_back(st);
  }
  return gt;
}

GroundTruth ground_truth(const TerrainWorld& world, std::span<const VehicleState> states) {
  static const std::vector<int> kCollision = {static_cast<int>(Event::kTree),
                                              static_cast<int>(Event::kOtherObstacles),
                                              static_cast<int>(Event::kHuman)};
  return ground_truth(world, states, kCollision);
}

std::vector<TrajectorySample> make_dataset(const TerrainWorld& world, int n_samples,
                                           std::uint64_t seed, const DatasetConfig& cfg) {
  const int H = cfg.horizon;
  if (!cfg.allow_any_horizon && H != 10 && H != 20 && H != 40) {
    throw DomainError("dataset horizon must be 10, 20 or 40");
  }
  if (H < 1) throw DomainError("dataset horizon must be >= 1");
  if (n_samples < 0) throw DomainError("sample count must be >= 0");
  std::vector<TrajectorySample> out;
  out.reserve(static_cast<std::size_t>(n_samples));
  if (n_samples == 0) return out;
  const double lo = cfg.margin;
  const double hi = world.extent() - cfg.margin;
  if (!(hi > lo)) throw GenerationError("world too small for the start margin");

  Rng rng(seed);
  const long max_attempts = 200L * n_samples + 1000;
  long attempts = 0;
  std::vector<ControlInput> controls(static_cast<std::size_t>(H));
  std::vector<double> dts(static_cast<std::size_t>(H));
  while (static_cast<int>(out.size()) < n_samples) {
    if (++attempts > max_attempts) {
      throw GenerationError("could not find enough in-bounds rollouts (" +
                            std::to_string(out.size()) + " of " + std::to_string(n_samples) + ")");
    }
    VehicleState s0;
    s0.x = rng.uniform(lo, hi);
    s0.y = rng.uniform(lo, hi);
    s0.psi = wrap_angle(rng.uniform(-kPi, kPi));
    s0.v = rng.uniform(0.0, cfg.max_start_speed);
    s0.phi = world.slope_at(s0.x, s0.y);
    double delta = rng.uniform(-kDeltaMax, kDeltaMax);
    Matrix actions(H, 3);
    for (int t = 0; t < H; ++t) {
      if (t > 0) delta = std::clamp(delta + cfg.steer_walk_std * rng.normal(), -kDeltaMax, kDeltaMax);
      const double level = 0.5 * static_cast<double>(rng.below(3));
      const double d = std::clamp(level + rng.uniform(-cfg.throttle_jitter, cfg.throttle_jitter), 0.0, 1.0);
      controls[static_cast<std::size_t>(t)] = ControlInput(delta, d);
      dts[static_cast<std::size_t>(t)] = throttle_to_dt(d);
      actions(t, 0) = delta;
      actions(t, 1) = d;
      actions(t, 2) = dts[static_cast<std::size_t>(t)];
    }
    const std::uint64_t noise_seed = rng.next_u64();
    const auto states = rollout(s0, controls, cfg.params, dts, kDefaultSubstep);
    const auto gt = ground_truth(world, std::span<const VehicleState>(states).subspan(1));
    if (gt.truncated) continue;

    TrajectorySample sample;
    sample.obs = observe(world, s0, noise_seed, cfg.observation);
    sample.actions = std::move(actions);
    double heading_change = 0.0;
    for (int t = 0; t < H; ++t) {
      heading_change += wrap_angle(states[static_cast<std::size_t>(t) + 1].psi - states[static_cast<std::size_t>(t)].psi);
      sample.event_labels.push_back(gt.steps[static_cast<std::size_t>(t)].event);
      sample.bearing_labels.push_back(heading_change);
    }
    out.push_back(std::move(sample));
  }
  return out;
}

Measurement measure(const VehicleState& truth, const ControlInput& last_control,
                    const ModelParams& true_params, double t, std::uint64_t noise_seed,
                    const SensorNoise& noise) {
  Rng rng(noise_seed);
  Measurement m;
  m.t = t;
  m.gps_xy = GpsFix{truth.x + noise.gps_xy_std * rng.normal(), truth.y + noise.gps_xy_std * rng.normal(),
                    noise.gps_xy_std};
  m.gps_psi = ScalarReading{wrap_angle(truth.psi + noise.gps_psi_std * rng.normal()), noise.gps_psi_std};
  m.accel = ScalarReading{derivative(truth, last_control, true_params)[3] + noise.accel_std * rng.normal(),
                          noise.accel_std};
  m.speed = ScalarReading{truth.v + noise.speed_std * rng.normal(), noise.speed_std};
  return m;
}

std::uint64_t dataset_hash(std::span<const TrajectorySample> samples) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& s : samples) {
    h = fnv1a(h, s.obs.data(), static_cast<std::size_t>(s.obs.size()) * sizeof(double));
    h = fnv1a(h, s.actions.data(), static_cast<std::size_t>(s.actions.size()) * sizeof(double));
    h = fnv1a(h, s.event_labels.data(), s.event_labels.size() * sizeof(int));
    h = fnv1a(h, s.bearing_labels.data(), s.bearing_labels.size() * sizeof(double));
  }
  return h;
}

namespace {

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

double read_f64(std::istream& in) {
  std::uint64_t bits = 0;
  in.read(reinterpret_cast<char*>(&bits), sizeof bits);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_dataset(std::span<const TrajectorySample> samples, const std::filesystem::path& path) {
  const int f = samples.empty() ? 0 : static_cast<int>(samples.front().obs.size());
  const int h = samples.empty() ? 0 : samples.front().horizon();
  for (const auto& s : samples) {
    if (s.obs.size() != f || s.horizon() != h || s.actions.cols() != 3 ||
        static_cast<int>(s.event_labels.size()) != h ||
        static_cast<int>(s.bearing_labels.size()) != h) {
      throw DomainError("dataset samples must share observation size and horizon");
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const json header = {{"samples", samples.size()}, {"obs_dim", f}, {"horizon", h}};
  out << header.dump() << '\n';
  for (const auto& s : samples) {
    for (Eigen::Index i = 0; i < s.obs.size(); ++i) write_f64(out, s.obs[i]);
    for (Eigen::Index i = 0; i < s.actions.size(); ++i) write_f64(out, s.actions.data()[i]);
    for (int e : s.event_labels) write_f64(out, e);
    for (double b : s.bearing_labels) write_f64(out, b);
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<TrajectorySample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  const json header = json::parse(line);
  const auto n = header.at("samples").get<std::size_t>();
  const int f = header.at("obs_dim").get<int>();
  const int h = header.at("horizon").get<int>();
  std::vector<TrajectorySample> out(n);
  for (auto& s : out) {
    s.obs.resize(f);
    for (int i = 0; i < f; ++i) s.obs[i] = read_f64(in);
    s.actions.resize(h, 3);
    for (Eigen::Index i = 0; i < s.actions.size(); ++i) s.actions.data()[i] = read_f64(in);
    s.event_labels.resize(static_cast<std::size_t>(h));
    for (int& e : s.event_labels) e = static_cast<int>(read_f64(in));
    s.bearing_labels.resize(static_cast<std::size_t>(h));
    for (double& b : s.bearing_labels) b = read_f64(in);
  }
  if (!in) throw std::runtime_error("truncated dataset file " + path.string());
  return out;
}

}  // namespace offroad

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace offroad {

// Precondition or value-range violation.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, int stage)
      : std::runtime_error(what), stage_(stage) {}
  int stage() const { return stage_; }

 private:
  int stage_;
};

class EstimationFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class InferenceError : public std::runtime_error {
 public:
  InferenceError(const std::string& layer, const std::string& what)
      : std::runtime_error(what + " (layer " + layer + ")"), layer_(layer) {}
  const std::string& layer() const { return layer_; }

 private:
  std::string layer_;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t batch, const std::string& what)
      : std::runtime_error(what + " (batch " + std::to_string(batch) + ")"),
        batch_(batch) {}
  std::size_t batch() const { return batch_; }

 private:
  std::size_t batch_;
};

class ObservationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

constexpr double kPi = std::numbers::pi;

// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * kPi);
  if (w <= -kPi) w += 2.0 * kPi;
  return w;
}

// Seeded generator with platform-independent distributions.
// std::uniform_real_distribution and friends are implementation-defined, so
// the draws are derived from the raw 64-bit stream here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * kPi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * kPi * u2);
  }
  double normal(double mean, double std) { return mean + std * normal(); }

  // Independent child stream, e.g. one per ensemble member or per tick.
  Rng fork(std::uint64_t salt) {
    return Rng(next_u64() ^ (salt * 0xD1B54A32D192ED03ULL));
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Deterministic seed mixing for derived streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::mt19937_64 eng(seq);
  return eng();
}

}  // namespace offroad

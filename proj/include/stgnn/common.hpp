#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace stgnn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Vec2 = Eigen::Vector2d;
/// N x 2 array of planar positions, velocities or accelerations.
using Points = Eigen::Matrix<double, Eigen::Dynamic, 2>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for invalid user configuration; the CLI maps it to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

/// Per-item seed derivation used for datasets and sweeps.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return seed ^ index;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

/// Isotropic Gaussian 2-vector scaled so that E||v|| equals `expected_norm`.
/// For a standard 2-d normal, E||v|| = sqrt(pi/2).
inline Vec2 gaussian_with_expected_norm(Rng& rng, double expected_norm) {
  const double scale = expected_norm / std::sqrt(std::numbers::pi / 2.0);
  const double a = normal(rng);
  const double b = normal(rng);
  return Vec2(a, b) * scale;
}

inline Vec2 clip_norm(const Vec2& u, double max_norm) {
  const double n = u.norm();
  if (n > max_norm && n > 0.0) return u * (max_norm / n);
  return u;
}

inline std::size_t default_jobs() {
  const auto hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : hc;
}

/// Runs fn(i) for i in [0, count) on up to `jobs` threads. Each index writes
/// only its own output slot, so results do not depend on scheduling.
inline void parallel_for(std::size_t count, std::size_t jobs,
                         const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(jobs);
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += jobs) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline double mean(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline double population_variance(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return s / static_cast<double>(xs.size());
}

inline double sample_variance(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  return population_variance(xs) * static_cast<double>(xs.size()) /
         static_cast<double>(xs.size() - 1);
}

}  // namespace stgnn

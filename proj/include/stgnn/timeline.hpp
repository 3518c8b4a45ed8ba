#pragma once

#include <functional>
#include <span>
#include <vector>

#include "stgnn/common.hpp"
#include "stgnn/signal.hpp"

namespace stgnn {

/// Uniform sample times k * ts for k = 0 .. n_steps - 1.
struct SamplingGrid {
  double ts = 0.1;
  int n_steps = 1;

  SamplingGrid() = default;
  SamplingGrid(double ts_, int n) : ts(ts_), n_steps(n) {
    if (!(ts > 0.0)) throw Error("SamplingGrid: ts must be positive");
    if (n_steps < 1) throw Error("SamplingGrid: need at least one step");
  }

  double time(int k) const { return k * ts; }
  double horizon() const { return (n_steps - 1) * ts; }
};

/// Time warp u -> u + z(u) with error function xi = z'.
struct WarpFunction {
  double eps_u = 0.0;
  std::function<double(double)> z;
  std::function<double(double)> xi;
  double kappa = 0.0;
};

inline WarpFunction identity_warp() {
  return {0.0, [](double) { return 0.0; }, [](double) { return 0.0; }, 0.0};
}

/// z(u) = sqrt(eps) cos(eps u) e^{-eps u}; ||xi||_2 = sqrt(3/4) eps on [0, inf).
inline WarpFunction warp_exponential_cosine(double eps) {
  if (eps < 0.0 || eps >= 1.0) throw Error("warp_exponential_cosine: eps must lie in [0, 1)");
  WarpFunction w;
  w.eps_u = eps;
  w.kappa = std::sqrt(0.75);
  w.z = [eps](double u) { return std::sqrt(eps) * std::cos(eps * u) * std::exp(-eps * u); };
  w.xi = [eps](double u) {
    return -std::pow(eps, 1.5) * (std::sin(eps * u) + std::cos(eps * u)) * std::exp(-eps * u);
  };
  return w;
}

/// Composite Simpson rule on [a, b] with an even number of panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int panels) {
  if (panels % 2) ++panels;
  const double h = (b - a) / panels;
  double s = f(a) + f(b);
  for (int i = 1; i < panels; ++i) s += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return s * h / 3.0;
}

/// L2 norm of xi over [0, 40/eps] with 2^14 Simpson panels.
inline double xi_l2_norm(const WarpFunction& w) {
  if (w.eps_u == 0.0) return 0.0;
  const auto sq = [&](double u) { const double x = w.xi(u); return x * x; };
  return std::sqrt(simpson(sq, 0.0, 40.0 / w.eps_u, 1 << 14));
}

/// Piecewise-linear interpolant at fractional sample index `pos`, clamped to [0, n - 1].
inline double interpolate_index(std::span<const double> samples, double pos) {
  const int n = static_cast<int>(samples.size());
  if (n == 0) throw Error("interpolate_linear: no samples");
  if (n == 1) return samples[0];
  pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
  const int k = static_cast<int>(std::floor(pos));
  if (k >= n - 1) return samples[n - 1];
  const double frac = pos - k;
  if (frac == 0.0) return samples[k];
  return samples[k] + frac * (samples[k + 1] - samples[k]);
}

/// Piecewise-linear interpolant of samples on a uniform grid, clamped to the grid span.
inline double interpolate_linear(std::span<const double> samples, double ts, double t) {
  return interpolate_index(samples, t / ts);
}

/// Samples observed on the warped timeline: out[k] = x(k ts + z(k ts)).
inline std::vector<double> resample_warped(std::span<const double> samples, const SamplingGrid& grid,
                                           const WarpFunction& warp) {
  if (samples.size() < 2) throw Error("resample_warped: need at least two samples");
  std::vector<double> out(samples.size());
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const double t = grid.time(static_cast<int>(k));
    out[k] = interpolate_index(samples, static_cast<double>(k) + warp.z(t) / grid.ts);
  }
  return out;
}

/// Applies resample_warped to every (feature, node) channel of a signal.
inline SpaceTimeSignal resample_warped(const SpaceTimeSignal& x, const SamplingGrid& grid,
                                       const WarpFunction& warp) {
  SpaceTimeSignal out(x.features(), x.nodes(), x.steps());
  std::vector<double> channel(x.steps());
  for (int f = 0; f < x.features(); ++f)
    for (int n = 0; n < x.nodes(); ++n) {
      for (int t = 0; t < x.steps(); ++t) channel[t] = x(f, n, t);
      const auto w = resample_warped(channel, grid, warp);
      for (int t = 0; t < x.steps(); ++t) out(f, n, t) = w[t];
    }
  return out;
}

/// Resamples onto a grid of period new_ts spanning the same duration; the new
/// length is floor((T - 1) old_ts / new_ts) + 1.
inline std::vector<double> regrid(std::span<const double> samples, double old_ts, double new_ts) {
  if (!(old_ts > 0.0) || !(new_ts > 0.0)) throw Error("regrid: periods must be positive");
  if (samples.empty()) throw Error("regrid: new grid would be empty");
  const double duration = (static_cast<double>(samples.size()) - 1.0) * old_ts;
  // Guard against floor() dropping an endpoint that lies on the grid up to rounding.
  const auto count = static_cast<long>(std::floor(duration / new_ts + 1e-9)) + 1;
  if (count < 1) throw Error("regrid: new grid would be empty");
  std::vector<double> out(static_cast<std::size_t>(count));
  const double ratio = new_ts / old_ts;
  for (long k = 0; k < count; ++k) out[k] = interpolate_index(samples, static_cast<double>(k) * ratio);
  return out;
}

}  // namespace stgnn

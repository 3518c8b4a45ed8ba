#pragma once

#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "stgnn/common.hpp"

namespace stgnn {

/// F x N x T real tensor: F features on N nodes over T time steps.
///
/// Storage is feature-major; inside a feature block column t holds the N node
/// values at step t, so `feature(f)` is a column-major N x T matrix view.
class SpaceTimeSignal {
 public:
  using FeatureMap = Eigen::Map<Matrix>;
  using ConstFeatureMap = Eigen::Map<const Matrix>;

  SpaceTimeSignal() = default;
  SpaceTimeSignal(int features, int nodes, int steps)
      : f_(features), n_(nodes), t_(steps),
        data_(static_cast<std::size_t>(features) * nodes * steps, 0.0) {
    if (features < 0 || nodes < 0 || steps < 0) throw Error("SpaceTimeSignal: negative shape");
  }

  int features() const { return f_; }
  int nodes() const { return n_; }
  int steps() const { return t_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(int f, int n, int t) { return data_[index(f, n, t)]; }
  double operator()(int f, int n, int t) const { return data_[index(f, n, t)]; }

  FeatureMap feature(int f) { return FeatureMap(data_.data() + block(f), n_, t_); }
  ConstFeatureMap feature(int f) const {
    return ConstFeatureMap(data_.data() + block(f), n_, t_);
  }

  /// All features as an F x (N*T) row-major view, for feature mixing.
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> flat() {
    return {data_.data(), f_, static_cast<Eigen::Index>(n_) * t_};
  }
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
  flat() const {
    return {data_.data(), f_, static_cast<Eigen::Index>(n_) * t_};
  }

  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  bool same_shape(const SpaceTimeSignal& o) const {
    return f_ == o.f_ && n_ == o.n_ && t_ == o.t_;
  }

  std::string shape_string() const {
    return "(" + std::to_string(f_) + "," + std::to_string(n_) + "," + std::to_string(t_) + ")";
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double squared_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return s;
  }
  double norm() const { return std::sqrt(squared_norm()); }

  SpaceTimeSignal& operator+=(const SpaceTimeSignal& o) {
    require_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  SpaceTimeSignal& operator-=(const SpaceTimeSignal& o) {
    require_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  SpaceTimeSignal& operator*=(double a) {
    for (double& v : data_) v *= a;
    return *this;
  }
  friend SpaceTimeSignal operator+(SpaceTimeSignal a, const SpaceTimeSignal& b) { return a += b; }
  friend SpaceTimeSignal operator-(SpaceTimeSignal a, const SpaceTimeSignal& b) { return a -= b; }
  friend SpaceTimeSignal operator*(double s, SpaceTimeSignal a) { return a *= s; }

  double dot(const SpaceTimeSignal& o) const {
    require_same(o);
    double s = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) s += data_[i] * o.data_[i];
    return s;
  }

  double max_abs_diff(const SpaceTimeSignal& o) const {
    require_same(o);
    double m = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) m = std::max(m, std::abs(data_[i] - o.data_[i]));
    return m;
  }

  friend bool operator==(const SpaceTimeSignal& a, const SpaceTimeSignal& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

  /// Prefix of the first `steps` time samples.
  SpaceTimeSignal head(int steps) const {
    SpaceTimeSignal out(f_, n_, steps);
    for (int f = 0; f < f_; ++f) out.feature(f) = feature(f).leftCols(steps);
    return out;
  }

 private:
  std::size_t block(int f) const { return static_cast<std::size_t>(f) * n_ * t_; }
  std::size_t index(int f, int n, int t) const {
    return block(f) + static_cast<std::size_t>(t) * n_ + n;
  }
  void require_same(const SpaceTimeSignal& o) const {
    if (!same_shape(o))
      throw Error("SpaceTimeSignal: shape mismatch " + shape_string() + " vs " + o.shape_string());
  }

  int f_ = 0, n_ = 0, t_ = 0;
  std::vector<double> data_;
};

inline SpaceTimeSignal random_signal(int f, int n, int t, Rng& rng, double lo = -1.0,
                                     double hi = 1.0) {
  SpaceTimeSignal s(f, n, t);
  for (double& v : s.raw()) v = uniform(rng, lo, hi);
  return s;
}

/// CSV with header "f,n,t,value", rows ordered by f, then n, then t.
inline void write_signal_csv(std::ostream& os, const SpaceTimeSignal& s) {
  os << "f,n,t,value\n" << std::setprecision(17);
  for (int f = 0; f < s.features(); ++f)
    for (int n = 0; n < s.nodes(); ++n)
      for (int t = 0; t < s.steps(); ++t) os << f << ',' << n << ',' << t << ',' << s(f, n, t) << '\n';
}

inline SpaceTimeSignal read_signal_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "f,n,t,value")
    throw Error("read_signal_csv: missing header 'f,n,t,value'");
  struct Row { int f, n, t; double v; };
  std::vector<Row> rows;
  int fmax = -1, nmax = -1, tmax = -1;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    Row r{};
    char c1 = 0, c2 = 0, c3 = 0;
    std::istringstream ls(line);
    if (!(ls >> r.f >> c1 >> r.n >> c2 >> r.t >> c3 >> r.v) || c1 != ',' || c2 != ',' || c3 != ',' ||
        r.f < 0 || r.n < 0 || r.t < 0)
      throw Error("read_signal_csv: malformed row at line " + std::to_string(line_no));
    fmax = std::max(fmax, r.f);
    nmax = std::max(nmax, r.n);
    tmax = std::max(tmax, r.t);
    rows.push_back(r);
  }
  SpaceTimeSignal s(fmax + 1, nmax + 1, tmax + 1);
  if (rows.size() != s.size()) throw Error("read_signal_csv: tensor is incomplete");
  for (const auto& r : rows) s(r.f, r.n, r.t) = r.v;
  return s;
}

inline void save_signal_csv(const std::string& path, const SpaceTimeSignal& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  write_signal_csv(os, s);
}

inline SpaceTimeSignal load_signal_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path);
  return read_signal_csv(is);
}

}  // namespace stgnn

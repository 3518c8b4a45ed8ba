#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stgnn/common.hpp"
#include "stgnn/graph.hpp"
#include "stgnn/signal.hpp"
#include "stgnn/stfilter.hpp"

namespace stgnn {

enum class Activation { tanh, identity };

inline double activate(Activation a, double z) { return a == Activation::tanh ? std::tanh(z) : z; }

/// One ST-GNN layer: a bank of F_out x F_in FIR space-time graph filters with
/// K taps each, followed by a pointwise activation.
struct LayerParams {
  int f_out = 0;
  int f_in = 0;
  int k = 0;
  std::vector<double> taps;  // (f, g, k) row-major
  Activation activation = Activation::tanh;

  double& tap(int f, int g, int kk) { return taps[(static_cast<std::size_t>(f) * f_in + g) * k + kk]; }
  double tap(int f, int g, int kk) const {
    return taps[(static_cast<std::size_t>(f) * f_in + g) * k + kk];
  }

  /// F_out x F_in mixing matrix of tap index kk.
  Matrix tap_matrix(int kk) const {
    Matrix h(f_out, f_in);
    for (int f = 0; f < f_out; ++f)
      for (int g = 0; g < f_in; ++g) h(f, g) = tap(f, g, kk);
    return h;
  }

  FirFilter filter(int f, int g, double ts) const {
    std::vector<double> h(k);
    for (int kk = 0; kk < k; ++kk) h[kk] = tap(f, g, kk);
    return FirFilter(std::move(h), ts);
  }
};

struct StgnnParams {
  std::vector<LayerParams> layers;

  int input_features() const { return layers.empty() ? 0 : layers.front().f_in; }
  int output_features() const { return layers.empty() ? 0 : layers.back().f_out; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.taps.size();
    return n;
  }

  void validate() const {
    if (layers.empty()) throw Error("StgnnParams: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.f_out < 1 || l.f_in < 1 || l.k < 1)
        throw Error("StgnnParams: layer " + std::to_string(i) + " has an empty dimension");
      if (l.taps.size() != static_cast<std::size_t>(l.f_out) * l.f_in * l.k)
        throw Error("StgnnParams: layer " + std::to_string(i) + " tap count mismatch");
      if (i > 0 && layers[i - 1].f_out != l.f_in)
        throw Error("StgnnParams: layer " + std::to_string(i) + " input features " +
                    std::to_string(l.f_in) + " != previous output " +
                    std::to_string(layers[i - 1].f_out));
      for (double h : l.taps)
        if (!std::isfinite(h)) throw Error("StgnnParams: non-finite tap");
    }
  }

  /// Zero-valued parameters with the same shapes (used for gradients).
  StgnnParams zeros_like() const {
    StgnnParams z = *this;
    for (auto& l : z.layers) std::fill(l.taps.begin(), l.taps.end(), 0.0);
    return z;
  }

  friend bool operator==(const StgnnParams& a, const StgnnParams& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      const auto& x = a.layers[i];
      const auto& y = b.layers[i];
      if (x.f_out != y.f_out || x.f_in != y.f_in || x.k != y.k || x.activation != y.activation ||
          x.taps != y.taps)
        return false;
    }
    return true;
  }
};

/// Builds an L-layer network with feature sizes `features` (F_0 .. F_L) and
/// taps per layer. Taps are i.i.d. uniform on [-a, a], a = 1/sqrt(F_in K).
/// Hidden layers use tanh; the last layer uses `final_activation`.
inline StgnnParams make_params(const std::vector<int>& features, const std::vector<int>& taps,
                               Activation final_activation, std::uint64_t seed) {
  if (features.size() < 2 || taps.size() + 1 != features.size())
    throw Error("make_params: need L+1 feature sizes and L tap counts");
  auto rng = make_rng(seed);
  StgnnParams p;
  for (std::size_t l = 0; l < taps.size(); ++l) {
    LayerParams layer;
    layer.f_in = features[l];
    layer.f_out = features[l + 1];
    layer.k = taps[l];
    layer.activation = l + 1 == taps.size() ? final_activation : Activation::tanh;
    const double a = 1.0 / std::sqrt(static_cast<double>(layer.f_in) * layer.k);
    layer.taps.resize(static_cast<std::size_t>(layer.f_out) * layer.f_in * layer.k);
    for (double& h : layer.taps) h = uniform(rng, -a, a);
    p.layers.push_back(std::move(layer));
  }
  p.validate();
  return p;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LayerTape {
  /// diffused[k] is F_in x (N T): row g holds W_k of input feature g.
  std::vector<RowMatrix> diffused;
  SpaceTimeSignal output;  // post-activation
};

struct ForwardResult {
  SpaceTimeSignal output;
  std::vector<LayerTape> tape;
};

namespace detail {

inline void check_forward_inputs(const StgnnParams& params, std::span<const Graph> graphs,
                                 const SpaceTimeSignal& x) {
  params.validate();
  if (x.features() != params.input_features())
    throw Error("forward: input has " + std::to_string(x.features()) + " features, network expects " +
                std::to_string(params.input_features()));
  check_graph_sequence(graphs, x);
}

}  // namespace detail

/// Runs every layer: X_l^f = sigma(sum_g sum_k h_kl^fg W_k[X_{l-1}^g]) on the
/// per-step graphs (recursive time-varying implementation).
inline ForwardResult forward(const StgnnParams& params, std::span<const Graph> graphs,
                             const SpaceTimeSignal& x) {
  detail::check_forward_inputs(params, graphs, x);
  const int n = x.nodes();
  const int t = x.steps();
  const auto shift = [&](int step) -> const Matrix& { return graphs[step].gso(); };
  ForwardResult result;
  SpaceTimeSignal current = x;
  for (const auto& layer : params.layers) {
    LayerTape tape;
    tape.diffused.assign(layer.k, RowMatrix(layer.f_in, static_cast<Eigen::Index>(n) * t));
    for (int g = 0; g < layer.f_in; ++g) {
      const auto w = diffuse(current.feature(g), layer.k, shift);
      for (int k = 0; k < layer.k; ++k)
        tape.diffused[k].row(g) = Eigen::Map<const Eigen::RowVectorXd>(w[k].data(), w[k].size());
    }
    SpaceTimeSignal out(layer.f_out, n, t);
    auto flat = out.flat();
    for (int k = 0; k < layer.k; ++k) flat.noalias() += layer.tap_matrix(k) * tape.diffused[k];
    if (layer.activation == Activation::tanh) flat = flat.array().tanh().matrix();
    tape.output = out;
    result.tape.push_back(std::move(tape));
    current = std::move(out);
  }
  result.output = std::move(current);
  return result;
}

struct BackwardResult {
  StgnnParams gradient;
  SpaceTimeSignal input_gradient;
};

/// Reverse-mode gradients of a scalar loss given dLoss/dOutput.
inline BackwardResult backward(const StgnnParams& params, std::span<const Graph> graphs,
                               const ForwardResult& fwd, const SpaceTimeSignal& loss_grad) {
  if (fwd.tape.size() != params.layers.size())
    throw Error("backward: tape does not match the network depth");
  if (!loss_grad.same_shape(fwd.output))
    throw Error("backward: loss gradient shape " + loss_grad.shape_string() +
                " does not match output " + fwd.output.shape_string());
  const int n = loss_grad.nodes();
  const int t = loss_grad.steps();
  const auto shift = [&](int step) -> const Matrix& { return graphs[step].gso(); };
  BackwardResult res;
  res.gradient = params.zeros_like();
  SpaceTimeSignal upstream = loss_grad;
  for (int l = static_cast<int>(params.layers.size()) - 1; l >= 0; --l) {
    const auto& layer = params.layers[l];
    const auto& tape = fwd.tape[l];
    if (static_cast<int>(tape.diffused.size()) != layer.k || tape.output.features() != layer.f_out ||
        !tape.output.same_shape(upstream))
      throw Error("backward: stale tape at layer " + std::to_string(l));
    RowMatrix delta = upstream.flat();
    if (layer.activation == Activation::tanh)
      delta.array() *= (1.0 - tape.output.flat().array().square());
    auto& grad_layer = res.gradient.layers[l];
    std::vector<RowMatrix> dw(layer.k);
    for (int k = 0; k < layer.k; ++k) {
      const Matrix dh = delta * tape.diffused[k].transpose();
      for (int f = 0; f < layer.f_out; ++f)
        for (int g = 0; g < layer.f_in; ++g) grad_layer.tap(f, g, k) = dh(f, g);
      dw[k] = layer.tap_matrix(k).transpose() * delta;
    }
    SpaceTimeSignal down(layer.f_in, n, t);
    std::vector<Matrix> cot(layer.k);
    for (int g = 0; g < layer.f_in; ++g) {
      for (int k = 0; k < layer.k; ++k)
        cot[k] = Eigen::Map<const Matrix>(dw[k].row(g).data(), n, t);
      down.feature(g) = diffuse_adjoint(cot, shift);
    }
    upstream = std::move(down);
  }
  res.input_gradient = std::move(upstream);
  return res;
}

struct LossResult {
  double value = 0.0;
  SpaceTimeSignal grad;
};

/// Mean over all F N T entries of the squared difference.
inline LossResult mse_loss(const SpaceTimeSignal& pred, const SpaceTimeSignal& target) {
  if (!pred.same_shape(target))
    throw Error("mse_loss: shape mismatch " + pred.shape_string() + " vs " + target.shape_string());
  LossResult r;
  r.grad = pred - target;
  const double count = static_cast<double>(pred.size());
  r.value = r.grad.squared_norm() / count;
  r.grad *= 2.0 / count;
  return r;
}

/// Streams one time step at a time through the network using the recursive
/// implementation, keeping only the last diffused copies per layer. Output at
/// step n equals forward(...) at step n on the same graphs.
class OnlineStgnn {
 public:
  explicit OnlineStgnn(StgnnParams params) : params_(std::move(params)) {
    params_.validate();
    reset();
  }

  void reset() {
    prev_.assign(params_.layers.size(), {});
    has_prev_ = false;
  }

  /// x is F_0 x N (features by nodes) at the current step; `graph` is the GSO
  /// at this step, which affects only later outputs. Returns F_L x N.
  Matrix step(const Graph& graph, const Matrix& x) {
    if (x.rows() != params_.input_features())
      throw Error("OnlineStgnn: expected " + std::to_string(params_.input_features()) + " features");
    Matrix current = x;  // features x nodes
    for (std::size_t l = 0; l < params_.layers.size(); ++l) {
      const auto& layer = params_.layers[l];
      const int nodes = static_cast<int>(current.cols());
      // w[k] is F_in x N: W_k at the current step.
      std::vector<Matrix> w(layer.k);
      w[0] = current;
      for (int k = 1; k < layer.k; ++k) {
        if (has_prev_) w[k].noalias() = prev_[l][k - 1] * prev_shift_;  // (S x)^T = x^T S
        else w[k] = Matrix::Zero(layer.f_in, nodes);
      }
      Matrix out = Matrix::Zero(layer.f_out, nodes);
      for (int k = 0; k < layer.k; ++k) out.noalias() += layer.tap_matrix(k) * w[k];
      if (layer.activation == Activation::tanh) out = out.array().tanh().matrix();
      prev_[l] = std::move(w);
      current = std::move(out);
    }
    prev_shift_ = graph.gso();
    has_prev_ = true;
    return current;
  }

  const StgnnParams& params() const { return params_; }

 private:
  StgnnParams params_;
  std::vector<std::vector<Matrix>> prev_;
  Matrix prev_shift_;
  bool has_prev_ = false;
};

struct AdamConfig {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;

  static AdamState for_params(const StgnnParams& p) {
    AdamState s;
    for (const auto& l : p.layers) {
      s.m.emplace_back(l.taps.size(), 0.0);
      s.v.emplace_back(l.taps.size(), 0.0);
    }
    return s;
  }
};

/// Bias-corrected ADAM update in place.
inline void adam_step(StgnnParams& params, const StgnnParams& grads, AdamState& state,
                      const AdamConfig& cfg) {
  if (state.m.size() != params.layers.size()) state = AdamState::for_params(params);
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& taps = params.layers[l].taps;
    const auto& g = grads.layers[l].taps;
    auto& m = state.m[l];
    auto& v = state.v[l];
    for (std::size_t i = 0; i < taps.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      taps[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
  }
}

enum class SelectionMetric { validation_cost, validation_mse, final_goal_distance };

inline std::string to_string(SelectionMetric m) {
  switch (m) {
    case SelectionMetric::validation_cost: return "validation_cost";
    case SelectionMetric::validation_mse: return "validation_mse";
    case SelectionMetric::final_goal_distance: return "final_goal_distance";
  }
  return "?";
}

inline SelectionMetric selection_metric_from_string(const std::string& s) {
  if (s == "validation_cost") return SelectionMetric::validation_cost;
  if (s == "validation_mse") return SelectionMetric::validation_mse;
  if (s == "final_goal_distance") return SelectionMetric::final_goal_distance;
  throw ConfigError("unknown selection metric '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int epochs = 30;
  int batch_size = 20;
  std::uint64_t seed = 0;
  SelectionMetric selection_metric = SelectionMetric::validation_mse;

  void validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
      throw ConfigError("TrainConfig: betas must lie in (0, 1)");
    if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning rate must be positive");
    if (epochs < 1 || batch_size < 1) throw ConfigError("TrainConfig: epochs and batch size must be >= 1");
  }
};

struct Example {
  SpaceTimeSignal input;
  SpaceTimeSignal target;
  std::vector<Graph> graphs;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<Example> train, validation, test;
};

/// Loss and parameter gradient for one example.
inline std::pair<double, StgnnParams> example_gradient(const StgnnParams& params, const Example& ex) {
  const auto fwd = forward(params, ex.graphs, ex.input);
  const auto loss = mse_loss(fwd.output, ex.target);
  auto back = backward(params, ex.graphs, fwd, loss.grad);
  return {loss.value, std::move(back.gradient)};
}

inline double mean_mse(const StgnnParams& params, const std::vector<Example>& examples,
                       std::size_t jobs = 1) {
  std::vector<double> losses(examples.size());
  parallel_for(examples.size(), jobs, [&](std::size_t i) {
    losses[i] = mse_loss(forward(params, examples[i].graphs, examples[i].input).output,
                         examples[i].target).value;
  });
  return mean(losses);
}

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
};

struct TrainResult {
  StgnnParams best_params;
  int best_epoch = 0;
  double best_metric = 0.0;
  std::vector<EpochLog> log;
};

/// Scores a candidate on the validation split (lower is better).
using Evaluator = std::function<double(const StgnnParams&)>;

/// Minibatch ADAM on the MSE imitation loss. After every epoch the selection
/// metric is evaluated on the validation split and the best parameters over
/// all epochs are returned. `evaluator` is required for metrics other than
/// validation_mse.
inline TrainResult train_imitation(const Dataset& data, const StgnnParams& init, const TrainConfig& cfg,
                                   const Evaluator& evaluator = nullptr, std::size_t jobs = 1,
                                   const std::function<void(const EpochLog&)>& on_epoch = nullptr) {
  cfg.validate();
  init.validate();
  if (data.train.empty() || data.validation.empty())
    throw Error("train_imitation: train and validation splits must be nonempty");
  if (cfg.selection_metric != SelectionMetric::validation_mse && !evaluator)
    throw Error("train_imitation: selection metric " + to_string(cfg.selection_metric) +
                " requires an evaluator");
  for (const auto* split : {&data.train, &data.validation})
    for (const auto& ex : *split)
      if (ex.input.features() != init.input_features() ||
          ex.target.features() != init.output_features())
        throw Error("train_imitation: example shape " + ex.input.shape_string() + " -> " +
                    ex.target.shape_string() + " does not fit network " +
                    std::to_string(init.input_features()) + " -> " +
                    std::to_string(init.output_features()));

  const AdamConfig adam{cfg.learning_rate, cfg.beta1, cfg.beta2, 1e-8};
  StgnnParams params = init;
  AdamState state = AdamState::for_params(params);
  auto rng = make_rng(cfg.seed);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  const auto metric = [&](const StgnnParams& p) {
    return cfg.selection_metric == SelectionMetric::validation_mse ? mean_mse(p, data.validation, jobs)
                                                                   : evaluator(p);
  };

  TrainResult result;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::vector<double> losses(count);
      std::vector<StgnnParams> grads(count);
      parallel_for(count, jobs, [&](std::size_t i) {
        auto [l, g] = example_gradient(params, data.train[order[start + i]]);
        losses[i] = l;
        grads[i] = std::move(g);
      });
      // Fixed summation order keeps runs bit-reproducible.
      StgnnParams total = params.zeros_like();
      for (std::size_t i = 0; i < count; ++i) {
        if (!std::isfinite(losses[i]))
          throw Error("train_imitation: non-finite loss in epoch " + std::to_string(epoch));
        loss_sum += losses[i];
        for (std::size_t l = 0; l < total.layers.size(); ++l)
          for (std::size_t j = 0; j < total.layers[l].taps.size(); ++j)
            total.layers[l].taps[j] += grads[i].layers[l].taps[j];
      }
      for (auto& l : total.layers)
        for (double& g : l.taps) g /= static_cast<double>(count);
      adam_step(params, total, state, adam);
    }
    EpochLog entry{epoch, loss_sum / static_cast<double>(order.size()), metric(params)};
    if (!std::isfinite(entry.train_loss) || !std::isfinite(entry.val_metric))
      throw Error("train_imitation: divergence in epoch " + std::to_string(epoch));
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (epoch == 1 || entry.val_metric < result.best_metric) {
      result.best_metric = entry.val_metric;
      result.best_epoch = epoch;
      result.best_params = params;
    }
  }
  return result;
}

// Parameter file: "STGNN1", u32 L, then per layer u32 (F_out, F_in, K), then
// every layer's float64 taps in (f, g, k) row-major order; all little-endian.

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(bytes, sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& offset) {
  if (offset + sizeof(T) > in.size())
    throw Error("parameter file truncated at byte offset " + std::to_string(offset));
  char bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + offset, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  offset += sizeof(T);
  return value;
}

}  // namespace detail

inline std::string serialize_params(const StgnnParams& params) {
  params.validate();
  std::string out = "STGNN1";
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.layers.size()));
  for (const auto& l : params.layers) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.f_out));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.f_in));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.k));
  }
  for (const auto& l : params.layers)
    for (double h : l.taps) detail::put_le<double>(out, h);
  return out;
}

/// The file format does not carry activations: hidden layers are tanh and the
/// last layer uses `final_activation`.
inline StgnnParams deserialize_params(const std::string& bytes,
                                      Activation final_activation = Activation::identity) {
  if (bytes.size() < 6 || bytes.compare(0, 6, "STGNN1") != 0)
    throw Error("parameter file: bad magic at byte offset 0");
  std::size_t offset = 6;
  const auto n_layers = detail::get_le<std::uint32_t>(bytes, offset);
  if (n_layers == 0 || n_layers > 1024)
    throw Error("parameter file: implausible layer count at byte offset 6");
  StgnnParams p;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const std::size_t at = offset;
    LayerParams l;
    l.f_out = static_cast<int>(detail::get_le<std::uint32_t>(bytes, offset));
    l.f_in = static_cast<int>(detail::get_le<std::uint32_t>(bytes, offset));
    l.k = static_cast<int>(detail::get_le<std::uint32_t>(bytes, offset));
    if (l.f_out < 1 || l.f_in < 1 || l.k < 1 || l.f_out > (1 << 20) || l.f_in > (1 << 20) || l.k > (1 << 16))
      throw Error("parameter file: invalid layer shape at byte offset " + std::to_string(at));
    if (i > 0 && p.layers.back().f_out != l.f_in)
      throw Error("parameter file: layer shapes do not chain at byte offset " + std::to_string(at));
    l.activation = i + 1 == n_layers ? final_activation : Activation::tanh;
    p.layers.push_back(l);
  }
  for (auto& l : p.layers) {
    l.taps.resize(static_cast<std::size_t>(l.f_out) * l.f_in * l.k);
    for (double& h : l.taps) h = detail::get_le<double>(bytes, offset);
  }
  if (offset != bytes.size())
    throw Error("parameter file: trailing data at byte offset " + std::to_string(offset));
  p.validate();
  return p;
}

inline void save_params(const StgnnParams& params, const std::string& path) {
  const auto bytes = serialize_params(params);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write parameter file " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing parameter file " + path);
}

inline StgnnParams load_params(const std::string& path, Activation final_activation = Activation::identity) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read parameter file " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_params(bytes, final_activation);
}

}  // namespace stgnn

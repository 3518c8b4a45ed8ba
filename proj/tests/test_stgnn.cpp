#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "stgnn/stgnn.hpp"

using namespace stgnn;

namespace {

std::vector<Graph> random_graphs(int n, int steps, Rng& rng) {
  std::vector<Graph> g;
  for (int t = 0; t < steps; ++t) g.push_back(Graph::from_matrix(0.5 * oracle::random_symmetric(n, rng)));
  return g;
}

// Loop-based network evaluation: explicit graph products, no diffusion recursion.
SpaceTimeSignal naive_forward(const StgnnParams& p, const std::vector<Graph>& graphs, const SpaceTimeSignal& x) {
  SpaceTimeSignal cur = x;
  const int n = x.nodes(), steps = x.steps();
  for (const auto& layer : p.layers) {
    SpaceTimeSignal out(layer.f_out, n, steps);
    for (int f = 0; f < layer.f_out; ++f)
      for (int t = 0; t < steps; ++t)
        for (int i = 0; i < n; ++i) {
          double z = 0;
          for (int g = 0; g < layer.f_in; ++g)
            for (int k = 0; k < layer.k && k <= t; ++k) {
              Matrix prod = Matrix::Identity(n, n);
              for (int m = 1; m <= k; ++m) prod = prod * graphs[t - m].gso();
              for (int j = 0; j < n; ++j) z += layer.tap(f, g, k) * prod(i, j) * cur(g, j, t - k);
            }
          out(f, i, t) = layer.activation == Activation::tanh ? std::tanh(z) : z;
        }
    cur = std::move(out);
  }
  return cur;
}

Example make_example(const StgnnParams& teacher, const std::vector<Graph>& graphs, Rng& rng) {
  Example ex;
  ex.graphs = graphs;
  ex.input = random_signal(teacher.input_features(), graphs[0].n_nodes(), static_cast<int>(graphs.size()), rng);
  ex.target = forward(teacher, graphs, ex.input).output;
  return ex;
}

double loss_at(const StgnnParams& p, const std::vector<Graph>& g, const SpaceTimeSignal& x,
               const SpaceTimeSignal& target) {
  return mse_loss(forward(p, g, x).output, target).value;
}

}  // namespace

TEST(Forward, IdentityNetwork) {
  Rng rng(1);
  auto p = make_params({1, 1}, {1}, Activation::identity, 1);
  p.layers[0].taps = {1.0};
  const auto g = random_graphs(3, 4, rng);
  const auto x = random_signal(1, 3, 4, rng);
  EXPECT_EQ(forward(p, g, x).output, x);
}

TEST(Forward, ZeroTapsGiveZeroOutput) {
  Rng rng(2);
  auto p = make_params({2, 3, 2}, {2, 2}, Activation::tanh, 1);
  for (auto& l : p.layers) std::fill(l.taps.begin(), l.taps.end(), 0.0);
  const auto g = random_graphs(3, 5, rng);
  EXPECT_EQ(forward(p, g, random_signal(2, 3, 5, rng)).output.squared_norm(), 0.0);
}

TEST(Forward, MatchesNaiveImplementation) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = make_params({2, 3, 1}, {3, 2}, trial % 2 ? Activation::tanh : Activation::identity, trial);
    const auto g = random_graphs(3, 5, rng);
    const auto x = random_signal(2, 3, 5, rng);
    EXPECT_LE(forward(p, g, x).output.max_abs_diff(naive_forward(p, g, x)), 1e-12);
  }
}

TEST(Forward, PermutationEquivariance) {
  Rng rng(4);
  const auto p = make_params({2, 4, 2}, {3, 2}, Activation::identity, 4);
  const int n = 6, steps = 7;
  const auto g = random_graphs(n, steps, rng);
  const auto x = random_signal(2, n, steps, rng);
  const Matrix pm = permutation_matrix(oracle::random_permutation(n, rng));
  std::vector<Graph> pg;
  for (const auto& gr : g) pg.push_back(Graph::from_matrix(pm.transpose() * gr.gso() * pm));
  SpaceTimeSignal px(2, n, steps);
  for (int f = 0; f < 2; ++f) px.feature(f) = pm.transpose() * x.feature(f);
  const auto y = forward(p, g, x).output;
  const auto py = forward(p, pg, px).output;
  for (int f = 0; f < 2; ++f)
    EXPECT_LE((py.feature(f) - pm.transpose() * y.feature(f)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Forward, IsCausal) {
  Rng rng(5);
  const auto p = make_params({2, 4, 2}, {3, 2}, Activation::tanh, 5);
  const auto g = random_graphs(4, 8, rng);
  auto x = random_signal(2, 4, 8, rng);
  const auto y = forward(p, g, x).output;
  for (int f = 0; f < 2; ++f)
    for (int t = 5; t < 8; ++t) x.feature(f).col(t).setZero();
  const auto y2 = forward(p, g, x).output;
  for (int f = 0; f < 2; ++f) EXPECT_EQ(y.feature(f).leftCols(5), y2.feature(f).leftCols(5));
}

TEST(Forward, RejectsFeatureMismatch) {
  Rng rng(6);
  const auto p = make_params({2, 2}, {1}, Activation::identity, 1);
  EXPECT_THROW(forward(p, random_graphs(3, 4, rng), random_signal(3, 3, 4, rng)), Error);
}

TEST(Online, MatchesBatchForward) {
  Rng rng(7);
  const auto p = make_params({3, 5, 2}, {4, 2}, Activation::identity, 7);
  const auto g = random_graphs(4, 9, rng);
  const auto x = random_signal(3, 4, 9, rng);
  const auto y = forward(p, g, x).output;
  OnlineStgnn net(p);
  for (int pass = 0; pass < 2; ++pass) {
    net.reset();
    for (int t = 0; t < 9; ++t) {
      Matrix xt(3, 4);
      for (int f = 0; f < 3; ++f) xt.row(f) = x.feature(f).col(t).transpose();
      const Matrix out = net.step(g[t], xt);
      for (int f = 0; f < 2; ++f) EXPECT_LE((out.row(f).transpose() - y.feature(f).col(t)).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Loss, Values) {
  Rng rng(8);
  const auto a = random_signal(2, 3, 4, rng);
  EXPECT_EQ(mse_loss(a, a).value, 0.0);
  SpaceTimeSignal b = a;
  for (double& v : b.raw()) v += 1.0;
  EXPECT_NEAR(mse_loss(b, a).value, 1.0, 1e-15);
  const auto c = random_signal(2, 3, 4, rng);
  double s = 0;
  for (int f = 0; f < 2; ++f)
    for (int i = 0; i < 3; ++i)
      for (int t = 0; t < 4; ++t) s += (a(f, i, t) - c(f, i, t)) * (a(f, i, t) - c(f, i, t));
  const auto l = mse_loss(a, c);
  EXPECT_NEAR(l.value, s / 24, 1e-15);
  EXPECT_NEAR(l.grad(1, 2, 3), 2 * (a(1, 2, 3) - c(1, 2, 3)) / 24, 1e-15);
  EXPECT_THROW(mse_loss(a, random_signal(1, 3, 4, rng)), Error);
}

TEST(Backward, ZeroUpstreamGivesZeroGradient) {
  Rng rng(9);
  const auto p = make_params({2, 3, 2}, {3, 1}, Activation::identity, 9);
  const auto g = random_graphs(3, 5, rng);
  const auto fwd = forward(p, g, random_signal(2, 3, 5, rng));
  const auto back = backward(p, g, fwd, SpaceTimeSignal(2, 3, 5));
  for (const auto& l : back.gradient.layers)
    for (double v : l.taps) EXPECT_EQ(v, 0.0);
}

TEST(Backward, LinearLayerClosedForm) {
  // dL/dh_k = <upstream, S^k x delayed by k> for a single linear filter.
  Rng rng(10);
  const auto p = make_params({1, 1}, {3}, Activation::identity, 10);
  const auto g = random_graphs(4, 6, rng);
  const auto x = random_signal(1, 4, 6, rng);
  const auto up = random_signal(1, 4, 6, rng);
  const auto back = backward(p, g, forward(p, g, x), up);
  std::vector<Matrix> s;
  for (const auto& gr : g) s.push_back(gr.gso());
  for (int k = 0; k < 3; ++k) {
    std::vector<double> e(3, 0.0);
    e[k] = 1.0;
    EXPECT_NEAR(back.gradient.layers[0].tap(0, 0, k), oracle::unrolled_dynamic(e, s, x).dot(up), 1e-12);
  }
}

TEST(Backward, MatchesCentralFiniteDifferences) {
  Rng rng(11);
  auto p = make_params({3, 6, 3}, {4, 2}, Activation::tanh, 11);
  const auto g = random_graphs(4, 6, rng);
  const auto x = random_signal(3, 4, 6, rng);
  const auto target = random_signal(3, 4, 6, rng);
  const auto fwd = forward(p, g, x);
  const auto grad = backward(p, g, fwd, mse_loss(fwd.output, target).grad).gradient;
  const double h = 1e-5;
  int checked = 0;
  double worst = 0.0;
  for (std::size_t l = 0; l < p.layers.size(); ++l)
    for (std::size_t j = 0; j < p.layers[l].taps.size(); ++j) {
      const double orig = p.layers[l].taps[j];
      p.layers[l].taps[j] = orig + h;
      const double up = loss_at(p, g, x, target);
      p.layers[l].taps[j] = orig - h;
      const double down = loss_at(p, g, x, target);
      p.layers[l].taps[j] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = grad.layers[l].taps[j];
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
      ++checked;
    }
  EXPECT_GE(checked, 100);
  EXPECT_LE(worst, 1e-5);
}

TEST(Adam, ZeroGradientLeavesParams) {
  auto p = make_params({2, 2}, {2}, Activation::identity, 1);
  const auto before = p;
  auto state = AdamState::for_params(p);
  adam_step(p, p.zeros_like(), state, AdamConfig{});
  EXPECT_EQ(p, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = make_params({2, 2}, {2}, Activation::identity, 2);
  const auto before = p;
  auto g = p.zeros_like();
  Rng rng(3);
  for (double& v : g.layers[0].taps) v = uniform(rng, -2, 2);
  auto state = AdamState::for_params(p);
  AdamConfig cfg;
  cfg.learning_rate = 0.01;
  adam_step(p, g, state, cfg);
  for (std::size_t j = 0; j < p.layers[0].taps.size(); ++j) {
    const double gj = g.layers[0].taps[j];
    EXPECT_NEAR(p.layers[0].taps[j] - before.layers[0].taps[j], -0.01 * gj / std::abs(gj), 1e-6);
  }
}

TEST(Adam, Deterministic) {
  auto a = make_params({2, 3}, {2}, Activation::identity, 4), b = a;
  auto g = a.zeros_like();
  for (double& v : g.layers[0].taps) v = 0.3;
  auto sa = AdamState::for_params(a), sb = AdamState::for_params(b);
  for (int i = 0; i < 2; ++i) {
    adam_step(a, g, sa, {});
    adam_step(b, g, sb, {});
  }
  EXPECT_EQ(a, b);
}

TEST(Training, RecoversTeacherNetwork) {
  Rng rng(12);
  const auto teacher = make_params({2, 1}, {3}, Activation::identity, 99);
  Dataset d;
  for (int i = 0; i < 16; ++i) d.train.push_back(make_example(teacher, random_graphs(4, 8, rng), rng));
  for (int i = 0; i < 4; ++i) d.validation.push_back(make_example(teacher, random_graphs(4, 8, rng), rng));
  const auto init = make_params({2, 1}, {3}, Activation::identity, 5);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.01;
  cfg.seed = 1;
  const auto res = train_imitation(d, init, cfg);
  EXPECT_LE(mean_mse(res.best_params, d.train), 1e-3 * mean_mse(init, d.train));
}

TEST(Training, SingleExampleLossDecreases) {
  Rng rng(13);
  const auto teacher = make_params({2, 4, 2}, {2, 1}, Activation::identity, 7);
  Dataset d;
  d.train.push_back(make_example(teacher, random_graphs(3, 6, rng), rng));
  d.validation = d.train;
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 1;
  cfg.learning_rate = 0.005;
  const auto res = train_imitation(d, make_params({2, 4, 2}, {2, 1}, Activation::identity, 8), cfg);
  ASSERT_EQ(res.log.size(), 10u);
  for (std::size_t e = 1; e < res.log.size(); ++e) EXPECT_LT(res.log[e].train_loss, res.log[e - 1].train_loss);
}

TEST(Training, ZeroTargetsConverge) {
  Rng rng(14);
  Dataset d;
  for (int i = 0; i < 4; ++i) {
    Example ex;
    ex.graphs = random_graphs(3, 6, rng);
    ex.input = random_signal(2, 3, 6, rng);
    ex.target = SpaceTimeSignal(1, 3, 6);
    d.train.push_back(ex);
  }
  d.validation = d.train;
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.01;
  const auto res = train_imitation(d, make_params({2, 1}, {2}, Activation::identity, 3), cfg);
  EXPECT_LE(res.best_metric, 1e-6);
}

TEST(Training, DeterministicLogsAndBestEpochSelection) {
  Rng rng(15);
  const auto teacher = make_params({2, 3, 1}, {2, 1}, Activation::identity, 21);
  Dataset d;
  for (int i = 0; i < 6; ++i) d.train.push_back(make_example(teacher, random_graphs(3, 5, rng), rng));
  for (int i = 0; i < 2; ++i) d.validation.push_back(make_example(teacher, random_graphs(3, 5, rng), rng));
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 2;
  cfg.seed = 77;
  const auto init = make_params({2, 3, 1}, {2, 1}, Activation::identity, 22);
  const auto a = train_imitation(d, init, cfg, nullptr, 1);
  const auto b = train_imitation(d, init, cfg, nullptr, 3);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t e = 0; e < a.log.size(); ++e) {
    EXPECT_EQ(a.log[e].train_loss, b.log[e].train_loss);
    EXPECT_EQ(a.log[e].val_metric, b.log[e].val_metric);
  }
  EXPECT_EQ(a.best_params, b.best_params);
  double best = a.log[0].val_metric;
  for (const auto& e : a.log) best = std::min(best, e.val_metric);
  EXPECT_EQ(a.best_metric, best);
  EXPECT_EQ(a.log[a.best_epoch - 1].val_metric, best);
}

TEST(Training, CustomSelectionMetricNeedsEvaluator) {
  Rng rng(16);
  const auto teacher = make_params({1, 1}, {1}, Activation::identity, 1);
  Dataset d;
  d.train.push_back(make_example(teacher, random_graphs(2, 3, rng), rng));
  d.validation = d.train;
  TrainConfig cfg;
  cfg.selection_metric = SelectionMetric::final_goal_distance;
  EXPECT_THROW(train_imitation(d, teacher, cfg), Error);
}

TEST(ParamFile, RoundTripIsBitExact) {
  const auto p = make_params({3, 5, 2}, {4, 1}, Activation::identity, 31);
  const auto bytes = serialize_params(p);
  EXPECT_EQ(bytes.substr(0, 6), "STGNN1");
  EXPECT_EQ(deserialize_params(bytes), p);
  EXPECT_EQ(serialize_params(deserialize_params(bytes)), bytes);
  // 6 magic + 4 + 2 * 12 + 8 * (15 * 4 + 10).
  EXPECT_EQ(bytes.size(), 6u + 4u + 24u + 8u * 70u);
}

TEST(ParamFile, MalformedFilesAreRejected) {
  const auto bytes = serialize_params(make_params({2, 3, 1}, {2, 1}, Activation::identity, 1));
  EXPECT_THROW(deserialize_params(bytes.substr(0, bytes.size() - 3)), Error);
  EXPECT_THROW(deserialize_params("STGNN2" + bytes.substr(6)), Error);
  EXPECT_THROW(deserialize_params(bytes + "x"), Error);
  std::string broken = bytes;
  broken[6 + 4 + 12 + 4] = 7;  // second layer F_in no longer chains with first layer F_out
  try {
    deserialize_params(broken);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
}

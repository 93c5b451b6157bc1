// SPDX-License-Identifier: Apache-2.0
#include "nofe/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "nofe/graph.hpp"
#include "nofe/model.hpp"
#include "nofe/random.hpp"

namespace nofe {
namespace {

FunctionSample random_sample(Index n, Index d_x, Index d_f, std::uint64_t seed,
                             double value_scale = 2.0) {
  Rng rng(seed);
  FunctionSample s;
  s.sample_id = "rnd";
  s.coords.resize(n, d_x);
  s.values.resize(n, d_f);
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < d_x; ++c) s.coords(r, c) = rng.uniform();
    for (Index c = 0; c < d_f; ++c) s.values(r, c) = rng.uniform(-value_scale, value_scale);
  }
  return s;
}

// Graph with out-edges only from node 0, for the literal normalization
// examples.
DomainGraph star_graph() {
  DomainGraph g;
  g.n_nodes = 3;
  g.k = 0;
  g.edges = {{0, 1}, {0, 2}};
  g.edge_attrs = Matrix::Zero(2, 2);
  g.node_offsets = {0, 2, 2, 2};
  return g;
}

TEST(Affinities, EqualDistancesSplitEvenly) {
  Matrix v(3, 1);
  v << 0.0, 1.0, -1.0;
  const AffinityTable p = affinities(v, star_graph(), AffinityNorm::Row);
  EXPECT_DOUBLE_EQ(p.a(0), 0.5);
  EXPECT_DOUBLE_EQ(p.a(1), 0.5);
}

TEST(Affinities, HandValuesBothModes) {
  Matrix v(3, 1);
  v << 0.0, 1.0, 2.0;
  const AffinityTable row = affinities(v, star_graph(), AffinityNorm::Row);
  EXPECT_NEAR(row.a(0), 5.0 / 7.0, 1e-15);
  EXPECT_NEAR(row.a(1), 2.0 / 7.0, 1e-15);

  const AffinityTable excl = affinities(v, star_graph(), AffinityNorm::RowExclTarget);
  EXPECT_NEAR(excl.a(0), 2.5, 1e-15);   // 0.5 / 0.2
  EXPECT_NEAR(excl.a(1), 0.4, 1e-15);   // 0.2 / 0.5
}

TEST(Affinities, RowModeRowsSumToOne) {
  const FunctionSample s = random_sample(40, 2, 3, 7);
  const DomainGraph g = build_knn_graph(s, 4);
  const AffinityTable p = affinities(s.values, g, AffinityNorm::Row);
  EXPECT_TRUE((p.a.array() > 0.0).all());
  for (Index i = 0; i < g.n_nodes; ++i) {
    double row = 0.0;
    for (Index e = g.node_offsets[static_cast<std::size_t>(i)];
         e < g.node_offsets[static_cast<std::size_t>(i) + 1]; ++e) {
      row += p.a(e);
    }
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
}

TEST(Affinities, SingleNeighborRejectedInExclMode) {
  const FunctionSample s = random_sample(5, 1, 1, 9);
  const DomainGraph g = build_knn_graph(s, 1);
  EXPECT_NO_THROW(affinities(s.values, g, AffinityNorm::Row));
  EXPECT_THROW(affinities(s.values, g, AffinityNorm::RowExclTarget), ValidationError);
}

TEST(KlDivergence, IdentityAndHandValue) {
  Matrix v(3, 1);
  v << 0.0, 1.0, 2.0;
  const DomainGraph g = star_graph();
  const AffinityTable p = affinities(v, g, AffinityNorm::Row);
  EXPECT_EQ(kl_divergence(p, p), 0.0);

  AffinityTable q = p;
  q.a(0) = 0.5;
  q.a(1) = 0.5;
  // (5/7) ln(10/7) + (2/7) ln(4/7), summed by hand
  const double expected = (5.0 / 7.0) * std::log((5.0 / 7.0) / 0.5) +
                          (2.0 / 7.0) * std::log((2.0 / 7.0) / 0.5);
  EXPECT_NEAR(kl_divergence(p, q), expected, 1e-15);
  EXPECT_NEAR(kl_divergence(p, q), 0.09492, 1e-4);
}

TEST(KlDivergence, NonNegativeOnRowModeTables) {
  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    const FunctionSample a = random_sample(20, 2, 2, rng.bits());
    FunctionSample b = a;
    for (Index r = 0; r < 20; ++r) {
      for (Index c = 0; c < 2; ++c) b.values(r, c) = rng.uniform(-2.0, 2.0);
    }
    const DomainGraph g = build_knn_graph(a, 3);
    const AffinityTable p = affinities(a.values, g, AffinityNorm::Row);
    const AffinityTable q = affinities(b.values, g, AffinityNorm::Row);
    EXPECT_GE(kl_divergence(p, q), -1e-12);
  }
}

TEST(KlDivergence, MisalignedTablesRejected) {
  Matrix v(3, 1);
  v << 0.0, 1.0, 2.0;
  const AffinityTable p = affinities(v, star_graph(), AffinityNorm::Row);
  AffinityTable q = p;
  q.a.resize(3);
  q.a.setConstant(0.3);
  EXPECT_THROW(kl_divergence(p, q), ValidationError);
  AffinityTable r = p;
  r.mode = AffinityNorm::RowExclTarget;
  EXPECT_THROW(kl_divergence(p, r), ValidationError);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

double eval_loss(const ModelParams& params, const DomainGraph& graph, const Matrix& values,
                 const ModelConfig& cfg, const AffinityTable& p) {
  const Matrix z = forward(params, graph, values, cfg);
  return kl_divergence(p, affinities(z, graph, cfg.affinity_norm));
}

struct FdStats {
  double max_rel = 0.0;
  double max_abs_small = 0.0;
  Index checked = 0;
};

FdStats finite_difference_check(const ModelConfig& cfg, std::uint64_t seed, Index n_points) {
  const FunctionSample s = random_sample(n_points, cfg.d_x, cfg.d_f, seed, 1.5);
  const DomainGraph g = build_knn_graph(s, cfg.k);
  const AffinityTable p = affinities(s.values, g, cfg.affinity_norm);

  ModelParams params = init_params(cfg, seed ^ 0x5eed);
  const auto [loss, grads] = loss_and_gradients(params, g, s.values, cfg, &p);
  EXPECT_TRUE(std::isfinite(loss));

  std::vector<Matrix*> theta = tensor_list(params);
  ModelParams grads_copy = grads;
  std::vector<Matrix*> grad = tensor_list(grads_copy);

  const double h = 1e-6;
  FdStats stats;
  for (std::size_t t = 0; t < theta.size(); ++t) {
    for (Index r = 0; r < theta[t]->rows(); ++r) {
      for (Index c = 0; c < theta[t]->cols(); ++c) {
        const double orig = (*theta[t])(r, c);
        (*theta[t])(r, c) = orig + h;
        const double lp = eval_loss(params, g, s.values, cfg, p);
        (*theta[t])(r, c) = orig - h;
        const double lm = eval_loss(params, g, s.values, cfg, p);
        (*theta[t])(r, c) = orig;
        const double fd = (lp - lm) / (2.0 * h);
        const double an = (*grad[t])(r, c);
        ++stats.checked;
        if (std::abs(an) < 1e-8) {
          stats.max_abs_small = std::max(stats.max_abs_small, std::abs(fd - an));
        } else {
          const double rel = std::abs(fd - an) / std::max(std::abs(fd), std::abs(an));
          stats.max_rel = std::max(stats.max_rel, rel);
        }
      }
    }
  }
  return stats;
}

TEST(LossAndGradients, MatchesFiniteDifferencesRowMode) {
  ModelConfig cfg;
  cfg.d_f = 3;
  cfg.d_x = 2;
  cfg.d_h = 4;
  cfg.kw = 3;
  cfg.kd = 2;
  cfg.k = 3;
  cfg.T = 2;
  cfg.d_g = 2;
  const FdStats stats = finite_difference_check(cfg, 2024, 12);
  EXPECT_LT(stats.max_rel, 1e-5);
  EXPECT_LT(stats.max_abs_small, 1e-8);
  EXPECT_GT(stats.checked, 100);
}

TEST(LossAndGradients, MatchesFiniteDifferencesExclMode) {
  ModelConfig cfg;
  cfg.d_f = 2;
  cfg.d_x = 1;
  cfg.d_h = 3;
  cfg.kw = 2;
  cfg.kd = 1;
  cfg.k = 2;
  cfg.T = 2;
  cfg.d_g = 1;
  cfg.affinity_norm = AffinityNorm::RowExclTarget;
  const FdStats stats = finite_difference_check(cfg, 513, 10);
  EXPECT_LT(stats.max_rel, 1e-5);
  EXPECT_LT(stats.max_abs_small, 1e-8);
}

TEST(LossAndGradients, DeadParametersGetExactlyZeroGradient) {
  // Negative self-weight on positive states kills every hidden unit, so no
  // parameter ahead of the projection bias can move the loss; the projection
  // bias itself shifts all embeddings equally, which affinities ignore.
  ModelConfig cfg;
  cfg.d_f = 2;
  cfg.d_x = 1;
  cfg.d_h = 3;
  cfg.kw = 2;
  cfg.kd = 1;
  cfg.k = 2;
  cfg.T = 1;
  cfg.d_g = 1;
  ModelParams params = zero_params(cfg);
  params.block.lift.w.setConstant(1.0);
  params.block.self_weight = -Matrix::Identity(3, 3);
  params.proj.w.setConstant(1.0);

  FunctionSample s = random_sample(8, 1, 2, 77);
  s.values = s.values.cwiseAbs();  // keep the lift output positive
  const DomainGraph g = build_knn_graph(s, cfg.k);
  const auto [loss, grads] = loss_and_gradients(params, g, s.values, cfg);
  EXPECT_TRUE(std::isfinite(loss));
  for_each_tensor_const(grads, [](const std::string& name, const Matrix& t) {
    EXPECT_TRUE((t.array() == 0.0).all()) << name;
  });
}

TEST(LossAndGradients, ZeroLossAtDistancePreservingEmbedding) {
  // Identity-chain operator on 1-D values reproduces them exactly, so the
  // input and output affinities coincide.
  ModelParams params;
  params.block.lift.w = Matrix::Ones(1, 1);
  params.block.lift.b = Matrix::Zero(1, 1);
  params.block.self_weight = Matrix::Ones(1, 1);
  params.block.kernel.layers.push_back({Matrix::Zero(1, 2), Matrix::Zero(1, 1)});
  params.block.kernel.layers.push_back({Matrix::Zero(1, 1), Matrix::Zero(1, 1)});
  params.proj.w = Matrix::Ones(1, 1);
  params.proj.b = Matrix::Zero(1, 1);

  FunctionSample s;
  s.sample_id = "iso";
  s.coords.resize(3, 1);
  s.coords << 0.0, 1.0, 3.0;
  s.values.resize(3, 1);
  s.values << 1.0, 2.0, 4.0;  // positive, so the relu chain is the identity
  const DomainGraph g = build_knn_graph(s, 2);
  ModelConfig cfg;
  cfg.T = 1;
  cfg.affinity_norm = AffinityNorm::Row;
  const auto [loss, grads] = loss_and_gradients(params, g, s.values, cfg);
  EXPECT_NEAR(loss, 0.0, 1e-10);
}

TEST(DualLossAndGradients, MatchesFiniteDifferences) {
  ModelConfig cfg;
  cfg.d_f = 2;
  cfg.d_x = 2;
  cfg.d_h = 3;
  cfg.kw = 2;
  cfg.kd = 1;
  cfg.k = 2;
  cfg.k_cross = 2;
  cfg.T = 2;
  cfg.d_g = 1;

  const FunctionSample src = random_sample(9, 2, 2, 301, 1.5);
  const FunctionSample qry = random_sample(8, 2, 2, 302, 1.5);
  const DualGraph dual = build_dual_graph(src, qry.coords, cfg.k, cfg.k_cross);
  const AffinityTable p = affinities(qry.values, dual.target_graph, cfg.affinity_norm);

  DualParams params = dual_from_point_model(init_params(cfg, 303));
  const auto [loss, grads] = dual_loss_and_gradients(params, dual, qry.values, cfg, &p);
  EXPECT_TRUE(std::isfinite(loss));

  std::vector<Matrix*> theta = tensor_list(params);
  DualParams grads_copy = grads;
  std::vector<Matrix*> grad = tensor_list(grads_copy);

  const double h = 1e-6;
  double max_rel = 0.0;
  double max_abs_small = 0.0;
  for (std::size_t t = 0; t < theta.size(); ++t) {
    for (Index r = 0; r < theta[t]->rows(); ++r) {
      for (Index c = 0; c < theta[t]->cols(); ++c) {
        const double orig = (*theta[t])(r, c);
        auto eval = [&]() {
          const Matrix z = forward_dual(params, dual, cfg);
          return kl_divergence(p, affinities(z, dual.target_graph, cfg.affinity_norm));
        };
        (*theta[t])(r, c) = orig + h;
        const double lp = eval();
        (*theta[t])(r, c) = orig - h;
        const double lm = eval();
        (*theta[t])(r, c) = orig;
        const double fd = (lp - lm) / (2.0 * h);
        const double an = (*grad[t])(r, c);
        if (std::abs(an) < 1e-8) {
          max_abs_small = std::max(max_abs_small, std::abs(fd - an));
        } else {
          max_rel = std::max(max_rel, std::abs(fd - an) / std::max(std::abs(fd), std::abs(an)));
        }
      }
    }
  }
  EXPECT_LT(max_rel, 1e-5);
  EXPECT_LT(max_abs_small, 1e-8);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.d_f = 2;
  cfg.d_x = 1;
  cfg.d_h = 2;
  cfg.kw = 2;
  cfg.kd = 1;
  cfg.k = 2;
  cfg.T = 1;
  cfg.d_g = 1;
  return cfg;
}

TEST(AdamwStep, ZeroGradZeroDecayIsFixedPoint) {
  ModelParams params = init_params(small_cfg(), 1);
  const ModelParams before = params;
  TrainState<ModelParams> state(params);
  const ModelParams grads = zero_like(params);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(state, grads, 0.1, cfg);

  std::vector<const Matrix*> now, orig;
  for_each_tensor_const(state.params,
                        [&now](const std::string&, const Matrix& t) { now.push_back(&t); });
  for_each_tensor_const(before,
                        [&orig](const std::string&, const Matrix& t) { orig.push_back(&t); });
  for (std::size_t t = 0; t < now.size(); ++t) {
    EXPECT_TRUE((now[t]->array() == orig[t]->array()).all());
  }
  for_each_tensor_const(state.m, [](const std::string&, const Matrix& t) {
    EXPECT_TRUE((t.array() == 0.0).all());
  });
  EXPECT_EQ(state.step, 1);
}

TEST(AdamwStep, BiasCorrectedFirstStep) {
  ModelParams params = init_params(small_cfg(), 2);
  for_each_tensor(params, [](const std::string&, Matrix& t) { t.setConstant(1.0); });
  TrainState<ModelParams> state(params);
  ModelParams grads = zero_like(params);
  for_each_tensor(grads, [](const std::string&, Matrix& t) { t.setConstant(0.5); });
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(state, grads, 0.1, cfg);
  // m_hat = 0.5, v_hat = 0.25, delta = -0.1 * 0.5 / (0.5 + 1e-8)
  const double expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
  for_each_tensor_const(state.params, [expected](const std::string& name, const Matrix& t) {
    EXPECT_NEAR(t(0, 0), expected, 1e-12) << name;
  });
  EXPECT_NEAR(state.params.proj.w(0, 0), 0.9, 1e-7);
}

TEST(AdamwStep, DecoupledDecayWithZeroGradient) {
  ModelParams params = init_params(small_cfg(), 3);
  for_each_tensor(params, [](const std::string&, Matrix& t) { t.setConstant(1.0); });
  TrainState<ModelParams> state(params);
  const ModelParams grads = zero_like(params);
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  adamw_step(state, grads, 0.1, cfg);
  for_each_tensor_const(state.params, [](const std::string& name, const Matrix& t) {
    EXPECT_NEAR(t(0, 0), 0.99, 1e-15) << name;
  });
}

TEST(AdamwStep, Deterministic) {
  ModelParams params = init_params(small_cfg(), 4);
  ModelParams grads = zero_like(params);
  for_each_tensor(grads, [](const std::string&, Matrix& t) { t.setConstant(0.25); });
  TrainConfig cfg;
  TrainState<ModelParams> s1(params), s2(params);
  for (int i = 0; i < 5; ++i) {
    adamw_step(s1, grads, 0.01, cfg);
    adamw_step(s2, grads, 0.01, cfg);
  }
  std::vector<const Matrix*> a, b;
  for_each_tensor_const(s1.params, [&a](const std::string&, const Matrix& t) { a.push_back(&t); });
  for_each_tensor_const(s2.params, [&b](const std::string&, const Matrix& t) { b.push_back(&t); });
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_TRUE((a[t]->array() == b[t]->array()).all());
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST(Train, SingleSampleSingleEpochEqualsOneStep) {
  ModelConfig mc = small_cfg();
  mc.d_f = 3;
  mc.d_x = 2;
  TrainConfig tc;
  tc.epochs = 1;
  const std::vector<FunctionSample> data{random_sample(12, 2, 3, 21)};

  const TrainResult result = train(data, mc, tc, 99);
  ASSERT_EQ(result.epoch_mean_loss.size(), 1u);

  // Manual replay: init, one gradient, one optimizer step.
  const DomainGraph g = build_knn_graph(data[0], mc.k);
  TrainState<ModelParams> state(init_params(mc, 99));
  const auto [loss, grads] = loss_and_gradients(state.params, g, data[0].values, mc);
  adamw_step(state, grads, tc.lr0, tc);
  EXPECT_EQ(result.epoch_mean_loss[0], loss);

  std::vector<const Matrix*> a, b;
  for_each_tensor_const(result.params,
                        [&a](const std::string&, const Matrix& t) { a.push_back(&t); });
  for_each_tensor_const(state.params,
                        [&b](const std::string&, const Matrix& t) { b.push_back(&t); });
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_TRUE((a[t]->array() == b[t]->array()).all());
  }
}

TEST(Train, DeterministicLossHistory) {
  ModelConfig mc = small_cfg();
  mc.d_f = 3;
  mc.d_x = 2;
  TrainConfig tc;
  tc.epochs = 4;
  std::vector<FunctionSample> data;
  for (int i = 0; i < 3; ++i) data.push_back(random_sample(15, 2, 3, 31 + i));

  const TrainResult r1 = train(data, mc, tc, 7);
  const TrainResult r2 = train(data, mc, tc, 7);
  ASSERT_EQ(r1.epoch_mean_loss.size(), r2.epoch_mean_loss.size());
  for (std::size_t e = 0; e < r1.epoch_mean_loss.size(); ++e) {
    EXPECT_EQ(r1.epoch_mean_loss[e], r2.epoch_mean_loss[e]);
  }
}

TEST(Train, LearningRateHalvesEveryTenEpochs) {
  ModelConfig mc = small_cfg();
  mc.d_f = 3;
  mc.d_x = 2;
  TrainConfig tc;
  tc.epochs = 21;
  tc.lr0 = 1e-3;
  const std::vector<FunctionSample> data{random_sample(10, 2, 3, 41)};
  const TrainResult result = train(data, mc, tc, 5);
  EXPECT_DOUBLE_EQ(result.epoch_lr[0], 1e-3);
  EXPECT_DOUBLE_EQ(result.epoch_lr[9], 1e-3);
  EXPECT_DOUBLE_EQ(result.epoch_lr[10], 5e-4);
  EXPECT_DOUBLE_EQ(result.epoch_lr[19], 5e-4);
  EXPECT_DOUBLE_EQ(result.epoch_lr[20], 2.5e-4);
}

TEST(Train, LossInvariantUnderNodeRelabeling) {
  ModelConfig mc;
  mc.d_f = 3;
  mc.d_x = 2;
  mc.d_h = 4;
  mc.kw = 3;
  mc.kd = 1;
  mc.k = 3;
  mc.T = 2;
  mc.d_g = 2;
  const FunctionSample s = random_sample(16, 2, 3, 51);
  std::vector<Index> perm(16);
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng(52);
  rng.shuffle(perm);
  FunctionSample permuted = s;
  for (Index r = 0; r < 16; ++r) {
    permuted.coords.row(perm[static_cast<std::size_t>(r)]) = s.coords.row(r);
    permuted.values.row(perm[static_cast<std::size_t>(r)]) = s.values.row(r);
  }
  const ModelParams params = init_params(mc, 53);
  const auto [l1, g1] = loss_and_gradients(params, build_knn_graph(s, mc.k), s.values, mc);
  const auto [l2, g2] =
      loss_and_gradients(params, build_knn_graph(permuted, mc.k), permuted.values, mc);
  EXPECT_NEAR(l1, l2, 1e-10);
}

TEST(TrainDual, DeterministicAndFiniteLosses) {
  ModelConfig mc;
  mc.d_f = 2;
  mc.d_x = 2;
  mc.d_h = 3;
  mc.kw = 2;
  mc.kd = 1;
  mc.k = 2;
  mc.k_cross = 2;
  mc.T = 1;
  mc.d_g = 1;
  TrainConfig tc;
  tc.epochs = 3;
  tc.lr0 = 1e-3;
  std::vector<FunctionSample> data;
  for (int i = 0; i < 2; ++i) data.push_back(random_sample(20, 2, 2, 61 + i));
  const ModelParams base = init_params(mc, 62);

  const DualTrainResult r1 = train_dual(data, base, mc, tc, 8);
  const DualTrainResult r2 = train_dual(data, base, mc, tc, 8);
  ASSERT_EQ(r1.epoch_mean_loss.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_TRUE(std::isfinite(r1.epoch_mean_loss[e]));
    EXPECT_EQ(r1.epoch_mean_loss[e], r2.epoch_mean_loss[e]);
  }
}

}  // namespace
}  // namespace nofe

// SPDX-License-Identifier: Apache-2.0
#include "nofe/model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <vector>

#include "nofe/graph.hpp"
#include "nofe/random.hpp"

namespace nofe {
namespace {

Affine make_affine(Matrix w, Matrix b) {
  Affine a;
  a.w = std::move(w);
  a.b = std::move(b);
  return a;
}

Matrix scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

// d_f = d_h = d_g = 1, L = [2], W = [1], P = [3], kernel MLP all zero
// (kd = 1, kw = 1, d_x = 1).
ModelParams tiny_params(double kernel_out_bias = 0.0) {
  ModelParams p;
  p.block.lift = make_affine(scalar(2.0), scalar(0.0));
  p.block.self_weight = scalar(1.0);
  p.block.kernel.layers.push_back(make_affine(Matrix::Zero(1, 2), scalar(0.0)));
  p.block.kernel.layers.push_back(make_affine(scalar(0.0), scalar(kernel_out_bias)));
  p.proj = make_affine(scalar(3.0), scalar(0.0));
  return p;
}

DomainGraph isolated_pair_graph() {
  FunctionSample s;
  s.sample_id = "pair";
  s.coords.resize(2, 1);
  s.coords << 0.0, 1.0;
  s.values = Matrix::Zero(2, 1);
  return build_knn_graph(s, 1);
}

FunctionSample random_sample(Index n, Index d_x, Index d_f, std::uint64_t seed) {
  Rng rng(seed);
  FunctionSample s;
  s.sample_id = "rnd";
  s.coords.resize(n, d_x);
  s.values.resize(n, d_f);
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < d_x; ++c) s.coords(r, c) = rng.uniform();
    for (Index c = 0; c < d_f; ++c) s.values(r, c) = rng.uniform(-2.0, 2.0);
  }
  return s;
}

TEST(InitParams, DeterministicAndBounded) {
  ModelConfig cfg;
  cfg.d_f = 6;
  cfg.d_x = 2;
  cfg.d_h = 8;
  cfg.kw = 4;
  cfg.kd = 2;
  cfg.d_g = 2;
  const ModelParams a = init_params(cfg, 99);
  const ModelParams b = init_params(cfg, 99);
  const ModelParams c = init_params(cfg, 100);

  bool any_differs_from_c = false;
  std::vector<const Matrix*> ta, tb, tc;
  for_each_tensor_const(a, [&ta](const std::string&, const Matrix& t) { ta.push_back(&t); });
  for_each_tensor_const(b, [&tb](const std::string&, const Matrix& t) { tb.push_back(&t); });
  for_each_tensor_const(c, [&tc](const std::string&, const Matrix& t) { tc.push_back(&t); });
  for (std::size_t t = 0; t < ta.size(); ++t) {
    EXPECT_TRUE((ta[t]->array() == tb[t]->array()).all()) << "tensor " << t;
    if (!(ta[t]->array() == tc[t]->array()).all()) any_differs_from_c = true;
  }
  EXPECT_TRUE(any_differs_from_c);

  // fan_in = 6 for the lift, so its scale is exactly 1.
  EXPECT_LE(a.block.lift.w.cwiseAbs().maxCoeff(), 1.0);
  // Biases start at zero.
  EXPECT_TRUE((a.block.lift.b.array() == 0.0).all());
  EXPECT_TRUE((a.proj.b.array() == 0.0).all());
  for (const Affine& layer : a.block.kernel.layers) {
    EXPECT_TRUE((layer.b.array() == 0.0).all());
  }
}

TEST(InitParams, KernelOutputLayerDamped) {
  ModelConfig cfg;
  cfg.d_f = 4;
  cfg.d_x = 1;
  cfg.d_h = 3;
  cfg.kw = 4;
  cfg.kd = 1;
  cfg.d_g = 1;
  const ModelParams p = init_params(cfg, 5);
  const double s = std::sqrt(6.0 / 4.0) * 1e-2;
  EXPECT_LE(p.block.kernel.layers.back().w.cwiseAbs().maxCoeff(), s);
  EXPECT_GT(p.block.kernel.layers.back().w.cwiseAbs().maxCoeff(), 0.0);
}

TEST(KernelMatrix, ZeroMlpGivesZeroMatrix) {
  const ModelParams p = tiny_params();
  Vector attr(2);
  attr << 0.3, -0.7;
  EXPECT_EQ(kernel_matrix(p, attr), scalar(0.0));
}

TEST(KernelMatrix, HandForwardPass) {
  // All-ones single-hidden MLP: hidden = relu(a0 + a1), out = hidden.
  ModelParams p = tiny_params();
  p.block.kernel.layers[0] = make_affine(Matrix::Ones(1, 2), scalar(0.0));
  p.block.kernel.layers[1] = make_affine(scalar(1.0), scalar(0.0));
  Vector attr(2);
  attr << 1.0, 1.0;
  EXPECT_EQ(kernel_matrix(p, attr), scalar(2.0));
  attr << -1.0, -1.0;
  EXPECT_EQ(kernel_matrix(p, attr), scalar(0.0));
}

TEST(KernelMatrix, RowMajorReshape) {
  ModelConfig cfg;
  cfg.d_f = 3;
  cfg.d_x = 1;
  cfg.d_h = 2;
  cfg.kw = 1;
  cfg.kd = 1;
  cfg.d_g = 1;
  ModelParams p = zero_params(cfg);
  Matrix out_bias(4, 1);
  out_bias << 1.0, 2.0, 3.0, 4.0;
  p.block.kernel.layers.back().b = out_bias;
  Vector attr(2);
  attr << 0.0, 0.0;
  Matrix expected(2, 2);
  expected << 1.0, 2.0, 3.0, 4.0;
  EXPECT_EQ(kernel_matrix(p, attr), expected);
}

TEST(KernelMatrix, RejectsWrongAttributeLength) {
  const ModelParams p = tiny_params();
  Vector attr(3);
  attr.setZero();
  EXPECT_THROW(kernel_matrix(p, attr), ValidationError);
}

TEST(Forward, HandEvaluation) {
  const ModelParams p = tiny_params();
  const DomainGraph g = isolated_pair_graph();
  ModelConfig cfg;
  cfg.T = 1;

  Matrix y(2, 1);
  y << 5.0, 5.0;
  const Matrix z = forward(p, g, y, cfg);
  EXPECT_EQ(z(0, 0), 30.0);

  y << -5.0, -5.0;
  const Matrix z_neg = forward(p, g, y, cfg);
  EXPECT_EQ(z_neg(0, 0), 0.0);
}

TEST(Forward, OutputShapeContract) {
  ModelConfig cfg;
  cfg.d_f = 5;
  cfg.d_x = 2;
  cfg.d_h = 6;
  cfg.kw = 3;
  cfg.kd = 2;
  cfg.k = 3;
  cfg.T = 2;
  cfg.d_g = 2;
  const ModelParams p = init_params(cfg, 21);
  const FunctionSample s = random_sample(18, 2, 5, 22);
  const DomainGraph g = build_knn_graph(s, cfg.k);
  const Matrix z = forward(p, g, s.values, cfg);
  EXPECT_EQ(z.rows(), 18);
  EXPECT_EQ(z.cols(), 2);
  EXPECT_LT(cfg.d_g, cfg.d_f);
}

TEST(Forward, LocalityOutsideReceptiveFieldIsBitExact) {
  ModelConfig cfg;
  cfg.d_f = 3;
  cfg.d_x = 2;
  cfg.d_h = 4;
  cfg.kw = 3;
  cfg.kd = 1;
  cfg.k = 3;
  cfg.T = 2;
  cfg.d_g = 1;
  const ModelParams p = init_params(cfg, 31);
  const FunctionSample s = random_sample(24, 2, 3, 32);
  const DomainGraph g = build_knn_graph(s, cfg.k);

  const Index node = 5;
  const std::vector<Index> rf = receptive_field(g, node, cfg.T);
  ASSERT_LT(rf.size(), 24u) << "perturbation set would be empty";

  const Matrix z = forward(p, g, s.values, cfg);
  Matrix perturbed = s.values;
  Rng rng(33);
  for (Index r = 0; r < 24; ++r) {
    if (std::find(rf.begin(), rf.end(), r) != rf.end()) continue;
    for (Index c = 0; c < 3; ++c) perturbed(r, c) += rng.uniform(-100.0, 100.0);
  }
  const Matrix z2 = forward(p, g, perturbed, cfg);
  EXPECT_TRUE((z.row(node).array() == z2.row(node).array()).all());
}

TEST(Forward, PermutationEquivariance) {
  ModelConfig cfg;
  cfg.d_f = 3;
  cfg.d_x = 2;
  cfg.d_h = 5;
  cfg.kw = 4;
  cfg.kd = 2;
  cfg.k = 3;
  cfg.T = 2;
  cfg.d_g = 2;
  const ModelParams p = init_params(cfg, 41);
  const FunctionSample s = random_sample(20, 2, 3, 42);
  const DomainGraph g = build_knn_graph(s, cfg.k);
  const Matrix z = forward(p, g, s.values, cfg);

  std::vector<Index> perm(20);
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng(43);
  rng.shuffle(perm);
  FunctionSample permuted = s;
  for (Index r = 0; r < 20; ++r) {
    permuted.coords.row(perm[static_cast<std::size_t>(r)]) = s.coords.row(r);
    permuted.values.row(perm[static_cast<std::size_t>(r)]) = s.values.row(r);
  }
  const DomainGraph g2 = build_knn_graph(permuted, cfg.k);
  const Matrix z2 = forward(p, g2, permuted.values, cfg);
  double max_diff = 0.0;
  for (Index r = 0; r < 20; ++r) {
    max_diff = std::max(
        max_diff, (z.row(r) - z2.row(perm[static_cast<std::size_t>(r)])).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(max_diff, 1e-12);
}

TEST(Forward, ZeroKernelMatchesPerNodeOracle) {
  ModelConfig cfg;
  cfg.d_f = 3;
  cfg.d_x = 2;
  cfg.d_h = 4;
  cfg.kw = 3;
  cfg.kd = 1;
  cfg.k = 4;
  cfg.T = 3;
  cfg.d_g = 2;
  ModelParams p = init_params(cfg, 51);
  for (Affine& layer : p.block.kernel.layers) {
    layer.w.setZero();
    layer.b.setZero();
  }
  const FunctionSample s = random_sample(15, 2, 3, 52);
  const DomainGraph g = build_knn_graph(s, cfg.k);
  const Matrix z = forward(p, g, s.values, cfg);

  // Independent per-node oracle with explicit loops.
  for (Index node = 0; node < 15; ++node) {
    std::vector<double> h(4, 0.0);
    for (Index r = 0; r < 4; ++r) {
      double acc = p.block.lift.b(r, 0);
      for (Index c = 0; c < 3; ++c) acc += p.block.lift.w(r, c) * s.values(node, c);
      h[static_cast<std::size_t>(r)] = acc;
    }
    for (Index t = 0; t < cfg.T; ++t) {
      std::vector<double> next(4, 0.0);
      for (Index r = 0; r < 4; ++r) {
        double acc = 0.0;
        for (Index c = 0; c < 4; ++c) {
          acc += p.block.self_weight(r, c) * h[static_cast<std::size_t>(c)];
        }
        next[static_cast<std::size_t>(r)] = acc > 0.0 ? acc : 0.0;
      }
      h = next;
    }
    for (Index r = 0; r < 2; ++r) {
      double acc = p.proj.b(r, 0);
      for (Index c = 0; c < 4; ++c) acc += p.proj.w(r, c) * h[static_cast<std::size_t>(c)];
      EXPECT_NEAR(z(node, r), acc, 1e-13);
    }
  }
}

TEST(Forward, NonFiniteStateReportsNodeAndStep) {
  ModelParams p = tiny_params();
  p.block.lift.w(0, 0) = 1e308;
  p.block.self_weight(0, 0) = 1e308;
  const DomainGraph g = isolated_pair_graph();
  ModelConfig cfg;
  cfg.T = 1;
  Matrix y(2, 1);
  y << 1e8, 1e8;
  try {
    forward(p, g, y, cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& err) {
    EXPECT_NE(std::string(err.what()).find("node"), std::string::npos);
    EXPECT_NE(std::string(err.what()).find("step"), std::string::npos);
  }
}

// Manually assembled dual graph: one source node, one query node, one cross
// edge, no intra edges anywhere.
DualGraph tiny_dual(double y_s, double y_init) {
  DualGraph dual;
  dual.source.sample_id = "s";
  dual.source.coords = scalar(0.0);
  dual.source.values = scalar(y_s);
  dual.source_graph.n_nodes = 1;
  dual.source_graph.k = 0;
  dual.source_graph.edge_attrs = Matrix(0, 2);
  dual.source_graph.node_offsets = {0, 0};
  dual.query_coords = scalar(0.5);
  dual.target_graph = dual.source_graph;
  dual.cross_edges = {{0, 0}};
  dual.cross_attrs.resize(1, 2);
  dual.cross_attrs << 0.5, 0.5;
  dual.cross_offsets = {0, 1};
  dual.init_features = scalar(y_init);
  dual.k_cross = 1;
  return dual;
}

TEST(ForwardDual, HandEvaluationWithConstantCrossKernel) {
  const double c = 0.5;
  DualParams params;
  const ModelParams base = tiny_params();
  params.source = base.block;
  params.target = base.block;
  params.cross_kernel = base.block.kernel;
  params.cross_kernel.layers.back().b = scalar(c);
  params.proj = base.proj;

  ModelConfig cfg;
  cfg.T = 1;
  const DualGraph dual = tiny_dual(5.0, 0.8);
  const Matrix z = forward_dual(params, dual, cfg);

  // z = P * relu(relu(W L y_init) + c * relu(W L y_s))
  const double hs1 = std::max(0.0, 1.0 * (2.0 * 5.0));
  const double mid = std::max(0.0, 1.0 * (2.0 * 0.8));
  const double hq1 = std::max(0.0, mid + c * hs1);
  EXPECT_DOUBLE_EQ(z(0, 0), 3.0 * hq1);
}

TEST(ForwardDual, ZeroKernelsDependOnlyOnIdwInit) {
  ModelConfig cfg;
  cfg.d_f = 2;
  cfg.d_x = 2;
  cfg.d_h = 3;
  cfg.kw = 2;
  cfg.kd = 1;
  cfg.k = 2;
  cfg.k_cross = 3;
  cfg.T = 2;
  cfg.d_g = 1;
  ModelParams base = init_params(cfg, 61);
  for (Affine& layer : base.block.kernel.layers) {
    layer.w.setZero();
    layer.b.setZero();
  }
  DualParams params = dual_from_point_model(base);

  const FunctionSample src = random_sample(10, 2, 2, 62);
  Rng rng(63);
  Matrix queries(6, 2);
  for (Index r = 0; r < 6; ++r) {
    queries(r, 0) = rng.uniform();
    queries(r, 1) = rng.uniform();
  }
  const DualGraph dual = build_dual_graph(src, queries, cfg.k, cfg.k_cross);
  const Matrix z = forward_dual(params, dual, cfg);

  // With every kernel zero the query chain is relu(W .) applied T times to
  // the lifted IDW features.
  Matrix h = dual.init_features * params.target.lift.w.transpose();
  h.rowwise() += params.target.lift.b.col(0).transpose();
  for (Index t = 0; t < cfg.T; ++t) h = (h * params.target.self_weight.transpose()).cwiseMax(0.0);
  Matrix expected = h * params.proj.w.transpose();
  expected.rowwise() += params.proj.b.col(0).transpose();
  EXPECT_LT((z - expected).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(ForwardDual, SourceOrderingInvarianceBitExact) {
  ModelConfig cfg;
  cfg.d_f = 3;
  cfg.d_x = 2;
  cfg.d_h = 4;
  cfg.kw = 3;
  cfg.kd = 2;
  cfg.k = 3;
  cfg.k_cross = 2;
  cfg.T = 2;
  cfg.d_g = 2;
  const DualParams params = dual_from_point_model(init_params(cfg, 71));

  const FunctionSample src = random_sample(14, 2, 3, 72);
  Rng rng(73);
  Matrix queries(9, 2);
  for (Index r = 0; r < 9; ++r) {
    queries(r, 0) = rng.uniform();
    queries(r, 1) = rng.uniform();
  }
  const Matrix z = forward_dual(params, build_dual_graph(src, queries, cfg.k, cfg.k_cross), cfg);

  std::vector<Index> perm(14);
  std::iota(perm.begin(), perm.end(), Index{0});
  rng.shuffle(perm);
  FunctionSample shuffled = src;
  for (Index r = 0; r < 14; ++r) {
    shuffled.coords.row(perm[static_cast<std::size_t>(r)]) = src.coords.row(r);
    shuffled.values.row(perm[static_cast<std::size_t>(r)]) = src.values.row(r);
  }
  const Matrix z2 =
      forward_dual(params, build_dual_graph(shuffled, queries, cfg.k, cfg.k_cross), cfg);
  EXPECT_TRUE((z.array() == z2.array()).all());
}

}  // namespace
}  // namespace nofe

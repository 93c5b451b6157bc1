// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "nofe/errors.hpp"
#include "nofe/graph.hpp"
#include "nofe/model.hpp"
#include "nofe/random.hpp"
#include "nofe/types.hpp"

namespace nofe {

constexpr double kAffinityFloor = 1e-12;  // clamp on q before the log

/// Per-edge student-t affinities, aligned with the owning graph's edge order.
struct AffinityTable {
  Vector a;
  AffinityNorm mode = AffinityNorm::Row;
  Index n_nodes = 0;
};

/// Student-t kernel (1 + ||v_i - v_j||^2)^-1 normalized per source node over
/// that node's out-edges. Row mode divides by the full row sum;
/// RowExclTarget leaves the target edge out of the denominator, which is the
/// form that permits values above 1.
inline AffinityTable affinities(const Matrix& values, const DomainGraph& graph,
                                AffinityNorm mode) {
  if (values.rows() != graph.n_nodes) {
    throw ValidationError("affinities: values rows != graph nodes");
  }
  const Index n_edges = graph.n_edges();
  Vector kappa(n_edges);
  for (Index e = 0; e < n_edges; ++e) {
    const Edge& ed = graph.edges[static_cast<std::size_t>(e)];
    kappa(e) = 1.0 / (1.0 + squared_distance(values, ed.i, values, ed.j));
  }

  AffinityTable table;
  table.mode = mode;
  table.n_nodes = graph.n_nodes;
  table.a.resize(n_edges);
  for (Index i = 0; i < graph.n_nodes; ++i) {
    const Index b = graph.node_offsets[static_cast<std::size_t>(i)];
    const Index e = graph.node_offsets[static_cast<std::size_t>(i) + 1];
    const Index degree = e - b;
    if (degree == 0) continue;  // no edges, no row to normalize
    if (mode == AffinityNorm::RowExclTarget && degree < 2) {
      throw ValidationError("affinities: node " + std::to_string(i) +
                            " has a single out-edge; the target-excluding "
                            "denominator would be empty");
    }
    double row_sum = 0.0;
    for (Index t = b; t < e; ++t) row_sum += kappa(t);
    for (Index t = b; t < e; ++t) {
      const double denom = mode == AffinityNorm::Row ? row_sum : row_sum - kappa(t);
      table.a(t) = kappa(t) / denom;
    }
  }
  return table;
}

/// Sum over directed edges of p * ln(p / max(q, 1e-12)).
inline double kl_divergence(const AffinityTable& p, const AffinityTable& q) {
  if (p.a.size() != q.a.size() || p.n_nodes != q.n_nodes || p.mode != q.mode) {
    throw ValidationError("kl_divergence: misaligned affinity tables");
  }
  double kl = 0.0;
  for (Index e = 0; e < p.a.size(); ++e) {
    const double term = p.a(e) * std::log(p.a(e) / std::max(q.a(e), kAffinityFloor));
    if (!std::isfinite(term)) {
      throw NumericError("kl_divergence: non-finite term at edge " + std::to_string(e));
    }
    kl += term;
  }
  return kl;
}

// ---------------------------------------------------------------------------
// Reverse-mode gradients
// ---------------------------------------------------------------------------

namespace detail {

// KL loss of q(embeddings) against a fixed p, plus dLoss/dZ. q-values at or
// below the clamp floor contribute zero gradient (the clamp is active there).
inline double kl_loss_and_embedding_grad(const AffinityTable& p, const Matrix& z,
                                         const DomainGraph& graph, Matrix& g_z) {
  const Index n_edges = graph.n_edges();
  Vector kappa(n_edges);
  for (Index e = 0; e < n_edges; ++e) {
    const Edge& ed = graph.edges[static_cast<std::size_t>(e)];
    kappa(e) = 1.0 / (1.0 + squared_distance(z, ed.i, z, ed.j));
  }

  Vector q(n_edges), g_q(n_edges), g_kappa(n_edges);
  double loss = 0.0;
  for (Index i = 0; i < graph.n_nodes; ++i) {
    const Index b = graph.node_offsets[static_cast<std::size_t>(i)];
    const Index e = graph.node_offsets[static_cast<std::size_t>(i) + 1];
    double row_sum = 0.0;
    for (Index t = b; t < e; ++t) row_sum += kappa(t);
    for (Index t = b; t < e; ++t) {
      const double denom =
          p.mode == AffinityNorm::Row ? row_sum : row_sum - kappa(t);
      q(t) = kappa(t) / denom;
      const double q_clamped = std::max(q(t), kAffinityFloor);
      const double term = p.a(t) * std::log(p.a(t) / q_clamped);
      if (!std::isfinite(term)) {
        throw NumericError("loss: non-finite KL term at edge " + std::to_string(t));
      }
      loss += term;
      g_q(t) = q(t) > kAffinityFloor ? -p.a(t) / q(t) : 0.0;
    }
    if (p.mode == AffinityNorm::Row) {
      double dot = 0.0;
      for (Index t = b; t < e; ++t) dot += g_q(t) * q(t);
      for (Index t = b; t < e; ++t) g_kappa(t) = (g_q(t) - dot) / row_sum;
    } else {
      double pooled = 0.0;
      for (Index t = b; t < e; ++t) {
        const double denom = row_sum - kappa(t);
        pooled += g_q(t) * kappa(t) / (denom * denom);
      }
      for (Index t = b; t < e; ++t) {
        const double denom = row_sum - kappa(t);
        g_kappa(t) = g_q(t) / denom + g_q(t) * kappa(t) / (denom * denom) - pooled;
      }
    }
  }

  g_z = Matrix::Zero(z.rows(), z.cols());
  for (Index e = 0; e < n_edges; ++e) {
    const Edge& ed = graph.edges[static_cast<std::size_t>(e)];
    const double scale = g_kappa(e) * (-2.0) * kappa(e) * kappa(e);
    for (Index c = 0; c < z.cols(); ++c) {
      const double g_delta = scale * (z(ed.i, c) - z(ed.j, c));
      g_z(ed.i, c) += g_delta;
      g_z(ed.j, c) -= g_delta;
    }
  }
  return loss;
}

inline Vector flatten_rowmajor(const Matrix& m) {
  Vector out(m.size());
  Index t = 0;
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) out(t++) = m(r, c);
  }
  return out;
}

}  // namespace detail

/// Gradient container: same shape as the parameters it mirrors.
template <typename Params>
inline Params zero_like(const Params& params) {
  Params z = params;
  for_each_tensor(z, [](const std::string&, Matrix& t) { t.setZero(); });
  return z;
}

template <typename Params>
inline std::vector<Matrix*> tensor_list(Params& params) {
  std::vector<Matrix*> out;
  for_each_tensor(params, [&out](const std::string&, Matrix& t) { out.push_back(&t); });
  return out;
}

namespace detail {

// Kernel-MLP weight gradients for one edge set: per edge, the accumulated
// outer products sum_t g_a[t]_i h[t]_j^T flow once through the MLP backward.
inline void kernel_phase(const Mlp& kernel, const Matrix& attrs, const std::vector<Edge>& edges,
                         const std::vector<Matrix>& g_steps, const std::vector<Matrix>& h_src,
                         Index h_src_offset, Mlp& kernel_grads) {
  const Index T = static_cast<Index>(g_steps.size());
  if (T == 0 || edges.empty()) return;
  const Index d_h = g_steps[0].cols();
  Matrix g_k(d_h, d_h);
  MlpTrace trace;
  for (Index e = 0; e < static_cast<Index>(edges.size()); ++e) {
    const Edge& ed = edges[static_cast<std::size_t>(e)];
    g_k.setZero();
    for (Index t = 0; t < T; ++t) {
      g_k.noalias() += g_steps[static_cast<std::size_t>(t)].row(ed.i).transpose() *
                       h_src[static_cast<std::size_t>(t + h_src_offset)].row(ed.j);
    }
    mlp_forward_trace(kernel, attrs.row(e).transpose(), trace);
    mlp_backward(kernel, trace, flatten_rowmajor(g_k), kernel_grads);
  }
}

}  // namespace detail

/// KL loss and exact reverse-mode gradients of every parameter for one
/// sample graph. When `p_cached` is null the input affinities are computed
/// from `values` (they are constants of the instance either way).
inline std::pair<double, ModelParams> loss_and_gradients(const ModelParams& params,
                                                         const DomainGraph& graph,
                                                         const Matrix& values,
                                                         const ModelConfig& cfg,
                                                         const AffinityTable* p_cached = nullptr) {
  AffinityTable p_local;
  if (!p_cached) {
    p_local = affinities(values, graph, cfg.affinity_norm);
    p_cached = &p_local;
  }

  ForwardTrace trace;
  const Matrix z = forward(params, graph, values, cfg, &trace);

  Matrix g_z;
  const double loss = detail::kl_loss_and_embedding_grad(*p_cached, z, graph, g_z);

  ModelParams grads = zero_like(params);
  const Index T = cfg.T;
  const std::vector<Matrix>& h = trace.h;

  // Projection.
  grads.proj.w.noalias() = g_z.transpose() * h[static_cast<std::size_t>(T)];
  grads.proj.b.col(0) = g_z.colwise().sum().transpose();
  Matrix g_h = g_z * params.proj.w;

  // Message passing steps, newest first.
  const Index d_h = params.block.lift.w.rows();
  detail::EdgeKernels kernels(params.block.kernel, graph.edge_attrs, d_h);
  std::vector<Matrix> g_steps(static_cast<std::size_t>(T));
  Matrix scratch;
  for (Index t = T - 1; t >= 0; --t) {
    Matrix g_a = (h[static_cast<std::size_t>(t + 1)].array() > 0.0).select(g_h, 0.0);
    grads.block.self_weight.noalias() += g_a.transpose() * h[static_cast<std::size_t>(t)];
    g_h = g_a * params.block.self_weight;
    for (Index e = 0; e < graph.n_edges(); ++e) {
      const Edge& ed = graph.edges[static_cast<std::size_t>(e)];
      const Matrix& K = kernels.get(e, scratch);
      g_h.row(ed.j).noalias() += g_a.row(ed.i) * K;
    }
    g_steps[static_cast<std::size_t>(t)] = std::move(g_a);
  }

  // Lift.
  grads.block.lift.w.noalias() = g_h.transpose() * values;
  grads.block.lift.b.col(0) = g_h.colwise().sum().transpose();

  // Kernel MLP.
  detail::kernel_phase(params.block.kernel, graph.edge_attrs, graph.edges, g_steps, h, 0,
                       grads.block.kernel);

  return {loss, std::move(grads)};
}

/// Dual-graph loss: input affinities come from ground-truth values at the
/// query locations (self-supervised), the output affinities from the dual
/// forward pass over the target graph. Gradients cover both operator blocks,
/// the cross kernel and the projection.
inline std::pair<double, DualParams> dual_loss_and_gradients(const DualParams& params,
                                                             const DualGraph& dual,
                                                             const Matrix& true_query_values,
                                                             const ModelConfig& cfg,
                                                             const AffinityTable* p_cached = nullptr) {
  AffinityTable p_local;
  if (!p_cached) {
    p_local = affinities(true_query_values, dual.target_graph, cfg.affinity_norm);
    p_cached = &p_local;
  }

  DualTrace trace;
  const Matrix z = forward_dual(params, dual, cfg, &trace);

  Matrix g_z;
  const double loss = detail::kl_loss_and_embedding_grad(*p_cached, z, dual.target_graph, g_z);

  DualParams grads = zero_like(params);
  const Index T = cfg.T;
  const Index d_h = params.source.lift.w.rows();

  detail::EdgeKernels source_kernels(params.source.kernel, dual.source_graph.edge_attrs, d_h);
  detail::EdgeKernels target_kernels(params.target.kernel, dual.target_graph.edge_attrs, d_h);
  detail::EdgeKernels cross_kernels(params.cross_kernel, dual.cross_attrs, d_h);

  grads.proj.w.noalias() = g_z.transpose() * trace.hq[static_cast<std::size_t>(T)];
  grads.proj.b.col(0) = g_z.colwise().sum().transpose();
  Matrix g_hq = g_z * params.proj.w;

  Matrix g_hs = Matrix::Zero(dual.source_graph.n_nodes, d_h);
  std::vector<Matrix> g_steps_s(static_cast<std::size_t>(T));
  std::vector<Matrix> g_steps_q(static_cast<std::size_t>(T));
  std::vector<Matrix> g_steps_c(static_cast<std::size_t>(T));
  Matrix scratch;

  for (Index t = T - 1; t >= 0; --t) {
    // Cross aggregation: hq[t+1] = relu(hq_intra[t] + sum K_c hs[t+1]).
    Matrix g_b = (trace.hq[static_cast<std::size_t>(t + 1)].array() > 0.0).select(g_hq, 0.0);
    for (Index e = 0; e < static_cast<Index>(dual.cross_edges.size()); ++e) {
      const Edge& ed = dual.cross_edges[static_cast<std::size_t>(e)];
      const Matrix& K = cross_kernels.get(e, scratch);
      g_hs.row(ed.j).noalias() += g_b.row(ed.i) * K;
    }

    // Target intra step: hq_intra[t] = relu(W_t hq[t] + sum K_t hq[t]_j).
    Matrix g_aq = (trace.hq_intra[static_cast<std::size_t>(t)].array() > 0.0).select(g_b, 0.0);
    grads.target.self_weight.noalias() +=
        g_aq.transpose() * trace.hq[static_cast<std::size_t>(t)];
    g_hq = g_aq * params.target.self_weight;
    for (Index e = 0; e < dual.target_graph.n_edges(); ++e) {
      const Edge& ed = dual.target_graph.edges[static_cast<std::size_t>(e)];
      const Matrix& K = target_kernels.get(e, scratch);
      g_hq.row(ed.j).noalias() += g_aq.row(ed.i) * K;
    }

    // Source intra step: hs[t+1] = relu(W_s hs[t] + sum K_s hs[t]_j).
    Matrix g_as = (trace.hs[static_cast<std::size_t>(t + 1)].array() > 0.0).select(g_hs, 0.0);
    grads.source.self_weight.noalias() +=
        g_as.transpose() * trace.hs[static_cast<std::size_t>(t)];
    g_hs = g_as * params.source.self_weight;
    for (Index e = 0; e < dual.source_graph.n_edges(); ++e) {
      const Edge& ed = dual.source_graph.edges[static_cast<std::size_t>(e)];
      const Matrix& K = source_kernels.get(e, scratch);
      g_hs.row(ed.j).noalias() += g_as.row(ed.i) * K;
    }

    g_steps_c[static_cast<std::size_t>(t)] = std::move(g_b);
    g_steps_q[static_cast<std::size_t>(t)] = std::move(g_aq);
    g_steps_s[static_cast<std::size_t>(t)] = std::move(g_as);
  }

  grads.source.lift.w.noalias() = g_hs.transpose() * dual.source.values;
  grads.source.lift.b.col(0) = g_hs.colwise().sum().transpose();
  grads.target.lift.w.noalias() = g_hq.transpose() * dual.init_features;
  grads.target.lift.b.col(0) = g_hq.colwise().sum().transpose();

  detail::kernel_phase(params.source.kernel, dual.source_graph.edge_attrs,
                       dual.source_graph.edges, g_steps_s, trace.hs, 0, grads.source.kernel);
  detail::kernel_phase(params.target.kernel, dual.target_graph.edge_attrs,
                       dual.target_graph.edges, g_steps_q, trace.hq, 0, grads.target.kernel);
  // Cross messages at step t read the already-updated source state hs[t+1].
  detail::kernel_phase(params.cross_kernel, dual.cross_attrs, dual.cross_edges, g_steps_c,
                       trace.hs, 1, grads.cross_kernel);

  return {loss, std::move(grads)};
}

// ---------------------------------------------------------------------------
// Optimizer and training loops
// ---------------------------------------------------------------------------

struct TrainConfig {
  Index epochs = 25;
  double lr0 = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  Index lr_halve_every = 10;
};

inline void validate_config(const TrainConfig& c) {
  if (c.epochs < 1) throw ValidationError("train config: epochs must be >= 1");
  if (!(c.lr0 > 0.0)) throw ValidationError("train config: lr0 must be > 0");
}

template <typename Params>
struct TrainState {
  Params params;
  Params m;  // first moments
  Params v;  // second moments
  long step = 0;
  Index epoch = 0;
  double lr = 0.0;
  std::vector<double> loss_history;

  explicit TrainState(const Params& p)
      : params(p), m(zero_like(p)), v(zero_like(p)) {}
};

/// One decoupled-weight-decay Adam step with bias correction. Decay is
/// applied to the parameter before the moment update reads the gradient.
template <typename Params>
inline void adamw_step(TrainState<Params>& state, const Params& grads, double lr,
                       const TrainConfig& cfg) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  std::vector<Matrix*> theta = tensor_list(state.params);
  std::vector<Matrix*> m = tensor_list(state.m);
  std::vector<Matrix*> v = tensor_list(state.v);
  std::vector<Matrix*> g = tensor_list(const_cast<Params&>(grads));

  for (std::size_t t = 0; t < theta.size(); ++t) {
    Matrix& th = *theta[t];
    const Matrix& gr = *g[t];
    th *= (1.0 - lr * cfg.weight_decay);
    *m[t] = cfg.beta1 * (*m[t]) + (1.0 - cfg.beta1) * gr;
    *v[t] = cfg.beta2 * (*v[t]) + (1.0 - cfg.beta2) * gr.cwiseProduct(gr);
    const Matrix m_hat = *m[t] / bc1;
    const Matrix v_hat = *v[t] / bc2;
    th.array() -= lr * m_hat.array() / (v_hat.array().sqrt() + cfg.eps);
  }
}

inline double lr_at_epoch(const TrainConfig& cfg, Index epoch) {
  const Index halvings = cfg.lr_halve_every > 0 ? epoch / cfg.lr_halve_every : 0;
  return cfg.lr0 * std::pow(0.5, static_cast<double>(halvings));
}

struct TrainResult {
  ModelParams params;
  std::vector<double> epoch_mean_loss;
  std::vector<double> epoch_lr;
};

/// Full point-to-point training: one optimizer step per sample graph, samples
/// visited in a seeded shuffled order each epoch, learning rate halved every
/// `lr_halve_every` epochs. Fully reproducible from (inputs, seed).
inline TrainResult train(const std::vector<FunctionSample>& dataset, const ModelConfig& model_cfg,
                         const TrainConfig& train_cfg, std::uint64_t seed) {
  if (dataset.empty()) throw ValidationError("train: empty dataset");
  validate_config(model_cfg);
  validate_config(train_cfg);
  for (const FunctionSample& s : dataset) {
    if (s.value_dim() != model_cfg.d_f || s.domain_dim() != model_cfg.d_x) {
      throw ValidationError("train: sample '" + s.sample_id + "' dims (" +
                            std::to_string(s.domain_dim()) + "," + std::to_string(s.value_dim()) +
                            ") do not match config (" + std::to_string(model_cfg.d_x) + "," +
                            std::to_string(model_cfg.d_f) + ")");
    }
  }

  std::vector<DomainGraph> graphs;
  std::vector<AffinityTable> p_tables;
  graphs.reserve(dataset.size());
  p_tables.reserve(dataset.size());
  for (const FunctionSample& s : dataset) {
    graphs.push_back(build_knn_graph(s, model_cfg.k));
    p_tables.push_back(affinities(s.values, graphs.back(), model_cfg.affinity_norm));
  }

  TrainState<ModelParams> state(init_params(model_cfg, seed));
  Rng shuffle_rng = Rng(seed).child(1);

  TrainResult result;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (Index epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(train_cfg, epoch);
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      try {
        auto [loss, grads] = loss_and_gradients(state.params, graphs[idx], dataset[idx].values,
                                                model_cfg, &p_tables[idx]);
        adamw_step(state, grads, lr, train_cfg);
        loss_sum += loss;
      } catch (const NumericError& err) {
        throw NumericError("train: epoch " + std::to_string(epoch) + ", sample '" +
                           dataset[idx].sample_id + "': " + err.what());
      }
    }
    state.epoch = epoch + 1;
    state.lr = lr;
    const double mean_loss = loss_sum / static_cast<double>(dataset.size());
    state.loss_history.push_back(mean_loss);
    result.epoch_mean_loss.push_back(mean_loss);
    result.epoch_lr.push_back(lr);
  }
  result.params = std::move(state.params);
  return result;
}

struct DualTrainResult {
  DualParams params;
  std::vector<double> epoch_mean_loss;
  std::vector<double> epoch_lr;
};

/// Self-supervised dual-model fine-tuning: each sample is split once (seeded)
/// into source points and query points with known values; the loss compares
/// target-graph affinities of the predictions against those of the true
/// query values.
inline DualTrainResult train_dual(const std::vector<FunctionSample>& dataset,
                                  const ModelParams& base, const ModelConfig& model_cfg,
                                  const TrainConfig& train_cfg, std::uint64_t seed,
                                  double source_fraction = 0.5) {
  if (dataset.empty()) throw ValidationError("train_dual: empty dataset");
  validate_config(train_cfg);
  if (!(source_fraction > 0.0 && source_fraction < 1.0)) {
    throw ValidationError("train_dual: source_fraction must be in (0, 1)");
  }

  Rng split_rng = Rng(seed).child(2);
  std::vector<DualGraph> duals;
  std::vector<Matrix> query_values;
  std::vector<AffinityTable> p_tables;
  for (const FunctionSample& s : dataset) {
    validate_sample(s);
    const Index n = s.n_points();
    const Index n_src = std::max<Index>(
        model_cfg.k + 1, static_cast<Index>(std::floor(source_fraction * static_cast<double>(n))));
    if (n - n_src < model_cfg.k + 1) {
      throw ValidationError("train_dual: sample '" + s.sample_id +
                            "' too small for a source/query split");
    }
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    split_rng.shuffle(perm);

    FunctionSample src;
    src.sample_id = s.sample_id + ":src";
    src.coords.resize(n_src, s.domain_dim());
    src.values.resize(n_src, s.value_dim());
    Matrix q_coords(n - n_src, s.domain_dim());
    Matrix q_values(n - n_src, s.value_dim());
    for (Index r = 0; r < n_src; ++r) {
      src.coords.row(r) = s.coords.row(perm[static_cast<std::size_t>(r)]);
      src.values.row(r) = s.values.row(perm[static_cast<std::size_t>(r)]);
    }
    for (Index r = n_src; r < n; ++r) {
      q_coords.row(r - n_src) = s.coords.row(perm[static_cast<std::size_t>(r)]);
      q_values.row(r - n_src) = s.values.row(perm[static_cast<std::size_t>(r)]);
    }
    duals.push_back(build_dual_graph(src, q_coords, model_cfg.k, model_cfg.k_cross));
    p_tables.push_back(affinities(q_values, duals.back().target_graph, model_cfg.affinity_norm));
    query_values.push_back(std::move(q_values));
  }

  TrainState<DualParams> state(dual_from_point_model(base));
  Rng shuffle_rng = Rng(seed).child(3);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  DualTrainResult result;
  for (Index epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(train_cfg, epoch);
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      auto [loss, grads] = dual_loss_and_gradients(state.params, duals[idx], query_values[idx],
                                                   model_cfg, &p_tables[idx]);
      adamw_step(state, grads, lr, train_cfg);
      loss_sum += loss;
    }
    result.epoch_mean_loss.push_back(loss_sum / static_cast<double>(dataset.size()));
    result.epoch_lr.push_back(lr);
  }
  result.params = std::move(state.params);
  return result;
}

}  // namespace nofe

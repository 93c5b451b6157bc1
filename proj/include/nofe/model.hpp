// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "nofe/errors.hpp"
#include "nofe/graph.hpp"
#include "nofe/random.hpp"
#include "nofe/types.hpp"

namespace nofe {

enum class AffinityNorm { Row, RowExclTarget };

struct ModelConfig {
  Index d_f = 0;   // input feature dim
  Index d_x = 0;   // domain dim
  Index d_h = 64;  // hidden width
  Index kw = 16;   // kernel-MLP hidden width
  Index kd = 2;    // kernel-MLP hidden depth
  Index k = 5;     // neighbors per node
  Index k_cross = 5;
  Index T = 3;  // message-passing steps
  Index d_g = 3;  // embedding dim
  AffinityNorm affinity_norm = AffinityNorm::Row;
  std::uint64_t seed = 0;
};

inline void validate_config(const ModelConfig& c) {
  if (c.d_f < 1 || c.d_x < 1) throw ValidationError("config: d_f and d_x must be >= 1");
  if (c.d_g >= c.d_f) {
    throw ValidationError("config: d_g (" + std::to_string(c.d_g) +
                          ") must be smaller than d_f (" + std::to_string(c.d_f) + ")");
  }
  if (c.T < 1) throw ValidationError("config: T must be >= 1");
  if (c.d_h < 1 || c.kw < 1 || c.kd < 1 || c.k < 1 || c.k_cross < 1 || c.d_g < 1) {
    throw ValidationError("config: d_h, kw, kd, k, k_cross, d_g must be >= 1");
  }
}

/// y -> w*y + b. Bias is a column; empty bias means none.
struct Affine {
  Matrix w;
  Matrix b;

  bool has_bias() const { return b.size() > 0; }
};

/// Hidden layers use ReLU, the output layer is linear.
struct Mlp {
  std::vector<Affine> layers;

  Index in_dim() const { return layers.front().w.cols(); }
  Index out_dim() const { return layers.back().w.rows(); }
};

/// Lift + self-weight + edge-kernel generator: the per-graph half of the
/// operator. The point-to-point model owns one block; the dual model owns
/// one per graph plus a cross kernel.
struct OperatorBlock {
  Affine lift;         // d_h x d_f, with bias
  Matrix self_weight;  // d_h x d_h, no bias
  Mlp kernel;          // (2 d_x) -> kw^kd -> d_h*d_h
};

struct ModelParams {
  OperatorBlock block;
  Affine proj;  // d_g x d_h, with bias
};

struct DualParams {
  OperatorBlock source;
  OperatorBlock target;
  Mlp cross_kernel;
  Affine proj;
};

// ---------------------------------------------------------------------------
// Tensor enumeration. Everything that serializes, accumulates gradients or
// takes optimizer steps walks the parameters in this one fixed order.
// ---------------------------------------------------------------------------

template <typename Fn>
void for_each_tensor(Affine& a, const std::string& name, Fn&& fn) {
  fn(name + ".w", a.w);
  if (a.has_bias()) fn(name + ".b", a.b);
}

template <typename Fn>
void for_each_tensor(Mlp& m, const std::string& name, Fn&& fn) {
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    for_each_tensor(m.layers[l], name + ".l" + std::to_string(l), fn);
  }
}

template <typename Fn>
void for_each_tensor(OperatorBlock& b, const std::string& name, Fn&& fn) {
  for_each_tensor(b.lift, name + ".lift", fn);
  fn(name + ".self", b.self_weight);
  for_each_tensor(b.kernel, name + ".kernel", fn);
}

template <typename Fn>
void for_each_tensor(ModelParams& p, Fn&& fn) {
  for_each_tensor(p.block, "block", fn);
  for_each_tensor(p.proj, "proj", fn);
}

template <typename Fn>
void for_each_tensor(DualParams& p, Fn&& fn) {
  for_each_tensor(p.source, "source", fn);
  for_each_tensor(p.target, "target", fn);
  for_each_tensor(p.cross_kernel, "cross", fn);
  for_each_tensor(p.proj, "proj", fn);
}

template <typename Params, typename Fn>
void for_each_tensor_const(const Params& p, Fn&& fn) {
  for_each_tensor(const_cast<Params&>(p),
                  [&fn](const std::string& name, const Matrix& t) { fn(name, t); });
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

inline Matrix draw_uniform(Index rows, Index cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-scale, scale);
  }
  return m;
}

inline Affine init_affine(Index out, Index in, bool bias, Rng& rng) {
  Affine a;
  a.w = draw_uniform(out, in, std::sqrt(6.0 / static_cast<double>(in)), rng);
  if (bias) a.b = Matrix::Zero(out, 1);
  return a;
}

inline Mlp init_kernel_mlp(const ModelConfig& cfg, Rng& rng) {
  Mlp m;
  Index in = 2 * cfg.d_x;
  for (Index l = 0; l < cfg.kd; ++l) {
    m.layers.push_back(init_affine(cfg.kw, in, true, rng));
    in = cfg.kw;
  }
  m.layers.push_back(init_affine(cfg.d_h * cfg.d_h, in, true, rng));
  m.layers.back().w *= 1e-2;  // keep initial kernels near zero
  return m;
}

}  // namespace detail

/// Deterministic init: uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights in a
/// fixed draw order, zero biases, kernel output layer damped by 1e-2.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  Rng rng(seed);
  ModelParams p;
  p.block.lift = detail::init_affine(cfg.d_h, cfg.d_f, true, rng);
  p.block.self_weight =
      detail::draw_uniform(cfg.d_h, cfg.d_h, std::sqrt(6.0 / static_cast<double>(cfg.d_h)), rng);
  p.block.kernel = detail::init_kernel_mlp(cfg, rng);
  p.proj = detail::init_affine(cfg.d_g, cfg.d_h, true, rng);
  return p;
}

namespace detail {

inline Affine zero_affine(Index out, Index in, bool bias) {
  Affine a;
  a.w = Matrix::Zero(out, in);
  if (bias) a.b = Matrix::Zero(out, 1);
  return a;
}

inline OperatorBlock zero_block(const ModelConfig& cfg) {
  OperatorBlock b;
  b.lift = zero_affine(cfg.d_h, cfg.d_f, true);
  b.self_weight = Matrix::Zero(cfg.d_h, cfg.d_h);
  Index in = 2 * cfg.d_x;
  for (Index l = 0; l < cfg.kd; ++l) {
    b.kernel.layers.push_back(zero_affine(cfg.kw, in, true));
    in = cfg.kw;
  }
  b.kernel.layers.push_back(zero_affine(cfg.d_h * cfg.d_h, in, true));
  return b;
}

}  // namespace detail

/// All-zero parameters with the shapes the config implies.
inline ModelParams zero_params(const ModelConfig& cfg) {
  validate_config(cfg);
  ModelParams p;
  p.block = detail::zero_block(cfg);
  p.proj = detail::zero_affine(cfg.d_g, cfg.d_h, true);
  return p;
}

inline DualParams zero_dual_params(const ModelConfig& cfg) {
  validate_config(cfg);
  DualParams p;
  p.source = detail::zero_block(cfg);
  p.target = detail::zero_block(cfg);
  p.cross_kernel = p.source.kernel;
  p.proj = detail::zero_affine(cfg.d_g, cfg.d_h, true);
  return p;
}

/// Dual-model state seeded from a point-to-point model: both intra blocks and
/// the cross kernel start from the trained block, the projection is shared-in.
inline DualParams dual_from_point_model(const ModelParams& base) {
  DualParams d;
  d.source = base.block;
  d.target = base.block;
  d.cross_kernel = base.block.kernel;
  d.proj = base.proj;
  return d;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace detail {

inline std::atomic<int>& thread_count() {
  static std::atomic<int> n{1};
  return n;
}

template <typename Fn>
void parallel_for(Index n, Fn&& fn) {
  const int threads = thread_count().load();
  if (threads <= 1 || n < 256) {
    fn(Index{0}, n);
    return;
  }
  const Index chunk = (n + threads - 1) / threads;
  std::vector<std::thread> pool;
  for (Index b = 0; b < n; b += chunk) {
    const Index e = std::min(n, b + chunk);
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

inline void set_num_threads(int n) { detail::thread_count().store(n < 1 ? 1 : n); }
inline int num_threads() { return detail::thread_count().load(); }

namespace detail {

inline Matrix rows_affine(const Matrix& rows, const Affine& a) {
  Matrix out = rows * a.w.transpose();
  if (a.has_bias()) out.rowwise() += a.b.col(0).transpose();
  return out;
}

inline Vector mlp_forward(const Mlp& m, const Vector& x) {
  Vector h = x;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    h = (m.layers[l].w * h + m.layers[l].b.col(0)).eval();
    if (l + 1 < m.layers.size()) h = h.cwiseMax(0.0);
  }
  return h;
}

// Activations entering each layer; needed for the backward pass.
struct MlpTrace {
  std::vector<Vector> inputs;
};

inline Vector mlp_forward_trace(const Mlp& m, const Vector& x, MlpTrace& trace) {
  trace.inputs.clear();
  Vector h = x;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    trace.inputs.push_back(h);
    h = (m.layers[l].w * h + m.layers[l].b.col(0)).eval();
    if (l + 1 < m.layers.size()) h = h.cwiseMax(0.0);
  }
  return h;
}

// Accumulates weight/bias gradients into `grads` (an Mlp of matching shapes).
// ReLU subgradient at 0 is taken as 0.
inline void mlp_backward(const Mlp& m, const MlpTrace& trace, const Vector& g_out, Mlp& grads) {
  Vector g = g_out;
  for (std::size_t l = m.layers.size(); l-- > 0;) {
    const Vector& in = trace.inputs[l];
    grads.layers[l].w.noalias() += g * in.transpose();
    grads.layers[l].b.col(0) += g;
    if (l > 0) {
      Vector g_in = m.layers[l].w.transpose() * g;
      // The input to layer l is the ReLU output of layer l-1; its positive
      // entries are exactly where the ReLU passes gradient.
      for (Index r = 0; r < g_in.size(); ++r) {
        if (in(r) <= 0.0) g_in(r) = 0.0;
      }
      g = std::move(g_in);
    }
  }
}

constexpr Index kKernelCacheDoubles = 20'000'000;

inline void reshape_rowmajor(const Vector& flat, Index d_h, Matrix& out) {
  out = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      flat.data(), d_h, d_h);
}

// Per-edge kernel matrices, cached when they fit in a fixed memory budget and
// recomputed from the MLP otherwise. Either path yields identical values.
class EdgeKernels {
 public:
  EdgeKernels(const Mlp& mlp, const Matrix& attrs, Index d_h)
      : mlp_(mlp), attrs_(attrs), d_h_(d_h) {
    const Index n_edges = attrs.rows();
    if (n_edges * d_h * d_h <= kKernelCacheDoubles) {
      cache_.resize(static_cast<std::size_t>(n_edges));
      parallel_for(n_edges, [this](Index b, Index e) {
        for (Index t = b; t < e; ++t) {
          reshape_rowmajor(mlp_forward(mlp_, attrs_.row(t).transpose()), d_h_,
                           cache_[static_cast<std::size_t>(t)]);
        }
      });
      cached_ = true;
    }
  }

  bool cached() const { return cached_; }

  const Matrix& get(Index e, Matrix& scratch) const {
    if (cached_) return cache_[static_cast<std::size_t>(e)];
    reshape_rowmajor(mlp_forward(mlp_, attrs_.row(e).transpose()), d_h_, scratch);
    return scratch;
  }

 private:
  const Mlp& mlp_;
  const Matrix& attrs_;
  Index d_h_;
  std::vector<Matrix> cache_;
  bool cached_ = false;
};

// msgs.row(e) = (K_e * h_j(e))^T for every edge.
inline void edge_messages(const EdgeKernels& kernels, const std::vector<Edge>& edges,
                          const Matrix& h, Matrix& msgs) {
  parallel_for(static_cast<Index>(edges.size()), [&](Index b, Index e) {
    Matrix scratch;
    for (Index t = b; t < e; ++t) {
      const Matrix& K = kernels.get(t, scratch);
      msgs.row(t).noalias() = (K * h.row(edges[static_cast<std::size_t>(t)].j).transpose()).transpose();
    }
  });
}

inline void check_finite(const Matrix& h, Index step, const char* what) {
  if (h.allFinite()) return;
  for (Index r = 0; r < h.rows(); ++r) {
    if (!h.row(r).allFinite()) {
      throw NumericError(std::string(what) + ": non-finite state at node " + std::to_string(r) +
                         ", step " + std::to_string(step));
    }
  }
}

}  // namespace detail

/// Kernel matrix for one edge attribute vector: the MLP output of length
/// d_h^2 reshaped row-major.
inline Matrix kernel_matrix(const ModelParams& params, const Vector& edge_attr) {
  if (edge_attr.size() != params.block.kernel.in_dim()) {
    throw ValidationError("kernel_matrix: attribute length " + std::to_string(edge_attr.size()) +
                          " != expected " + std::to_string(params.block.kernel.in_dim()));
  }
  const Index d_h = params.block.lift.w.rows();
  Matrix out;
  detail::reshape_rowmajor(detail::mlp_forward(params.block.kernel, edge_attr), d_h, out);
  return out;
}

/// Hidden states of one forward pass; h[t] is the state after t message
/// passing steps (h[0] is the lift output).
struct ForwardTrace {
  std::vector<Matrix> h;
};

namespace detail {

inline void check_forward_shapes(const OperatorBlock& block, const Affine& proj,
                                 const DomainGraph& graph, const Matrix& values) {
  if (values.rows() != graph.n_nodes) {
    throw ValidationError("forward: values rows " + std::to_string(values.rows()) +
                          " != graph nodes " + std::to_string(graph.n_nodes));
  }
  if (values.cols() != block.lift.w.cols()) {
    throw ValidationError("forward: values dim " + std::to_string(values.cols()) +
                          " != lift input dim " + std::to_string(block.lift.w.cols()));
  }
  if (graph.edge_attrs.cols() != block.kernel.in_dim()) {
    throw ValidationError("forward: edge attr dim " + std::to_string(graph.edge_attrs.cols()) +
                          " != kernel input dim " + std::to_string(block.kernel.in_dim()));
  }
  if (proj.w.cols() != block.lift.w.rows()) {
    throw ValidationError("forward: projection input dim mismatch");
  }
}

// One message passing step: relu(W h_i + sum_j K_ij h_j), accumulated in
// sorted edge order.
inline Matrix mp_step(const OperatorBlock& block, const DomainGraph& graph,
                      const detail::EdgeKernels& kernels, const Matrix& h, Matrix& msgs) {
  detail::edge_messages(kernels, graph.edges, h, msgs);
  Matrix next = h * block.self_weight.transpose();
  for (Index e = 0; e < graph.n_edges(); ++e) {
    next.row(graph.edges[static_cast<std::size_t>(e)].i) += msgs.row(e);
  }
  return next.cwiseMax(0.0);
}

}  // namespace detail

/// Point-to-point operator evaluation (lift, T kernel message passing steps,
/// projection). Pass a trace to keep per-step hidden states.
inline Matrix forward(const ModelParams& params, const DomainGraph& graph, const Matrix& values,
                      const ModelConfig& cfg, ForwardTrace* trace = nullptr) {
  detail::check_forward_shapes(params.block, params.proj, graph, values);
  const Index d_h = params.block.lift.w.rows();

  detail::EdgeKernels kernels(params.block.kernel, graph.edge_attrs, d_h);
  Matrix msgs(graph.n_edges(), d_h);

  Matrix h = detail::rows_affine(values, params.block.lift);
  detail::check_finite(h, 0, "forward");
  if (trace) {
    trace->h.clear();
    trace->h.push_back(h);
  }
  for (Index t = 0; t < cfg.T; ++t) {
    h = detail::mp_step(params.block, graph, kernels, h, msgs);
    detail::check_finite(h, t + 1, "forward");
    if (trace) trace->h.push_back(h);
  }
  return detail::rows_affine(h, params.proj);
}

/// States of one dual forward pass. hq_intra[t] is the query state after its
/// intra-graph update at step t, before cross aggregation; hs/hq hold the
/// completed states per step.
struct DualTrace {
  std::vector<Matrix> hs;
  std::vector<Matrix> hq;
  std::vector<Matrix> hq_intra;
};

/// Dual-graph evaluation: source and query graphs step in lockstep, each
/// query state additively receives cross messages from the just-updated
/// source states, and only query states are projected.
inline Matrix forward_dual(const DualParams& params, const DualGraph& dual,
                           const ModelConfig& cfg, DualTrace* trace = nullptr) {
  detail::check_forward_shapes(params.source, params.proj, dual.source_graph,
                               dual.source.values);
  detail::check_forward_shapes(params.target, params.proj, dual.target_graph,
                               dual.init_features);
  if (dual.cross_attrs.cols() != params.cross_kernel.in_dim()) {
    throw ValidationError("forward_dual: cross attr dim mismatch");
  }
  const Index d_h = params.source.lift.w.rows();

  detail::EdgeKernels source_kernels(params.source.kernel, dual.source_graph.edge_attrs, d_h);
  detail::EdgeKernels target_kernels(params.target.kernel, dual.target_graph.edge_attrs, d_h);
  detail::EdgeKernels cross_kernels(params.cross_kernel, dual.cross_attrs, d_h);

  Matrix msgs_s(dual.source_graph.n_edges(), d_h);
  Matrix msgs_q(dual.target_graph.n_edges(), d_h);
  Matrix msgs_c(static_cast<Index>(dual.cross_edges.size()), d_h);

  Matrix hs = detail::rows_affine(dual.source.values, params.source.lift);
  Matrix hq = detail::rows_affine(dual.init_features, params.target.lift);
  detail::check_finite(hs, 0, "forward_dual(source)");
  detail::check_finite(hq, 0, "forward_dual(target)");
  if (trace) {
    trace->hs.assign(1, hs);
    trace->hq.assign(1, hq);
    trace->hq_intra.clear();
  }

  for (Index t = 0; t < cfg.T; ++t) {
    hs = detail::mp_step(params.source, dual.source_graph, source_kernels, hs, msgs_s);
    detail::check_finite(hs, t + 1, "forward_dual(source)");

    Matrix hq_intra = detail::mp_step(params.target, dual.target_graph, target_kernels, hq, msgs_q);

    detail::edge_messages(cross_kernels, dual.cross_edges, hs, msgs_c);
    hq = hq_intra;
    for (Index e = 0; e < static_cast<Index>(dual.cross_edges.size()); ++e) {
      hq.row(dual.cross_edges[static_cast<std::size_t>(e)].i) += msgs_c.row(e);
    }
    hq = hq.cwiseMax(0.0);
    detail::check_finite(hq, t + 1, "forward_dual(target)");

    if (trace) {
      trace->hs.push_back(hs);
      trace->hq_intra.push_back(std::move(hq_intra));
      trace->hq.push_back(hq);
    }
  }
  return detail::rows_affine(hq, params.proj);
}

}  // namespace nofe

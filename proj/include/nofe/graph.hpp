// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "nofe/errors.hpp"
#include "nofe/types.hpp"

namespace nofe {

/// Directed edge (i, j): node j is a neighbor of i, i.e. j's features flow
/// into i during aggregation.
struct Edge {
  Index i;
  Index j;

  friend bool operator==(const Edge&, const Edge&) = default;
};

/// kNN graph over domain coordinates. Edges are grouped by source node i in
/// ascending order and by j within each node, so reductions that walk the
/// edge list are deterministic. edge_attrs row e holds (x_i, x_i - x_j) for
/// edges[e].
struct DomainGraph {
  Index n_nodes = 0;
  Index k = 0;
  std::vector<Edge> edges;
  Matrix edge_attrs;
  std::vector<Index> node_offsets;  // size n_nodes + 1; out-edge span per node

  Index n_edges() const { return static_cast<Index>(edges.size()); }
};

enum class KnnMethod { Auto, BruteForce, Grid };

namespace detail {

constexpr Index kBruteForceLimit = 2000;

inline bool candidate_less(double d2_a, Index a, double d2_b, Index b) {
  if (d2_a != d2_b) return d2_a < d2_b;
  return a < b;
}

}  // namespace detail

// Exact nearest-neighbor queries over a fixed point set. Two interchangeable
// backends: brute force for small sets and a uniform cell grid above
// detail::kBruteForceLimit points. Both rank candidates by (squared distance,
// index) with distances evaluated by the same expression, so they return
// identical neighbor lists, ties included.
class NeighborIndex {
 public:
  explicit NeighborIndex(const Matrix& points, KnnMethod method = KnnMethod::Auto)
      : points_(points) {
    if (method == KnnMethod::Auto) {
      method = points.rows() <= detail::kBruteForceLimit ? KnnMethod::BruteForce
                                                         : KnnMethod::Grid;
    }
    method_ = method;
    if (method_ == KnnMethod::Grid) build_grid();
  }

  Index size() const { return points_.rows(); }

  /// k nearest points to `query`, ordered by (squared distance, index).
  /// `exclude` skips one point index (pass the query's own row for self-kNN).
  std::vector<Index> nearest(const Eigen::RowVectorXd& query, Index k,
                             Index exclude = -1) const {
    const Index n = points_.rows();
    const Index available = n - (exclude >= 0 ? 1 : 0);
    if (k < 1 || k > available) {
      throw ValidationError("k=" + std::to_string(k) + " out of range [1, " +
                            std::to_string(available) + "]");
    }
    return method_ == KnnMethod::BruteForce ? nearest_brute(query, k, exclude)
                                            : nearest_grid(query, k, exclude);
  }

 private:
  struct Candidate {
    double d2;
    Index idx;
  };

  double sqdist(const Eigen::RowVectorXd& query, Index j) const {
    double s = 0.0;
    for (Index d = 0; d < points_.cols(); ++d) {
      const double diff = query(d) - points_(j, d);
      s += diff * diff;
    }
    return s;
  }

  static void sort_candidates(std::vector<Candidate>& c) {
    std::sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) {
      return detail::candidate_less(a.d2, a.idx, b.d2, b.idx);
    });
  }

  std::vector<Index> nearest_brute(const Eigen::RowVectorXd& query, Index k,
                                   Index exclude) const {
    std::vector<Candidate> cand;
    cand.reserve(static_cast<std::size_t>(points_.rows()));
    for (Index j = 0; j < points_.rows(); ++j) {
      if (j == exclude) continue;
      cand.push_back({sqdist(query, j), j});
    }
    sort_candidates(cand);
    std::vector<Index> out(static_cast<std::size_t>(k));
    for (Index r = 0; r < k; ++r) out[static_cast<std::size_t>(r)] = cand[static_cast<std::size_t>(r)].idx;
    return out;
  }

  void build_grid() {
    const Index n = points_.rows();
    const Index d = points_.cols();
    lo_ = points_.colwise().minCoeff();
    Eigen::RowVectorXd hi = points_.colwise().maxCoeff();
    extent_ = hi - lo_;

    // Aim for a handful of points per cell.
    const double target_cells = std::max(1.0, static_cast<double>(n) / 4.0);
    Index live_dims = 0;
    for (Index m = 0; m < d; ++m) live_dims += extent_(m) > 0.0 ? 1 : 0;
    const Index per_dim =
        live_dims == 0
            ? 1
            : std::max<Index>(1, static_cast<Index>(std::floor(
                                     std::pow(target_cells, 1.0 / static_cast<double>(live_dims)))));

    cells_per_dim_.assign(static_cast<std::size_t>(d), 1);
    cell_edge_.assign(static_cast<std::size_t>(d), 0.0);
    min_edge_ = std::numeric_limits<double>::infinity();
    for (Index m = 0; m < d; ++m) {
      if (extent_(m) > 0.0) {
        cells_per_dim_[static_cast<std::size_t>(m)] = per_dim;
        cell_edge_[static_cast<std::size_t>(m)] = extent_(m) / static_cast<double>(per_dim);
        min_edge_ = std::min(min_edge_, cell_edge_[static_cast<std::size_t>(m)]);
      }
    }
    if (!std::isfinite(min_edge_)) min_edge_ = 0.0;  // all points identical in every dim

    total_cells_ = 1;
    for (Index m = 0; m < d; ++m) total_cells_ *= cells_per_dim_[static_cast<std::size_t>(m)];

    std::vector<Index> counts(static_cast<std::size_t>(total_cells_), 0);
    std::vector<Index> cell_of(static_cast<std::size_t>(n));
    for (Index p = 0; p < n; ++p) {
      const Index c = flat_cell(cell_coords(points_.row(p)));
      cell_of[static_cast<std::size_t>(p)] = c;
      ++counts[static_cast<std::size_t>(c)];
    }
    cell_starts_.assign(static_cast<std::size_t>(total_cells_) + 1, 0);
    for (Index c = 0; c < total_cells_; ++c) {
      cell_starts_[static_cast<std::size_t>(c) + 1] =
          cell_starts_[static_cast<std::size_t>(c)] + counts[static_cast<std::size_t>(c)];
    }
    cell_points_.resize(static_cast<std::size_t>(n));
    std::vector<Index> cursor(cell_starts_.begin(), cell_starts_.end() - 1);
    for (Index p = 0; p < n; ++p) {  // ascending p keeps per-cell lists sorted
      const Index c = cell_of[static_cast<std::size_t>(p)];
      cell_points_[static_cast<std::size_t>(cursor[static_cast<std::size_t>(c)]++)] = p;
    }
  }

  std::vector<Index> cell_coords(const Eigen::RowVectorXd& x) const {
    const Index d = points_.cols();
    std::vector<Index> c(static_cast<std::size_t>(d), 0);
    for (Index m = 0; m < d; ++m) {
      const double edge = cell_edge_[static_cast<std::size_t>(m)];
      if (edge <= 0.0) continue;
      const double rel = (x(m) - lo_(m)) / edge;
      Index idx = static_cast<Index>(std::floor(rel));
      idx = std::clamp<Index>(idx, 0, cells_per_dim_[static_cast<std::size_t>(m)] - 1);
      c[static_cast<std::size_t>(m)] = idx;
    }
    return c;
  }

  Index flat_cell(const std::vector<Index>& c) const {
    Index f = 0;
    for (std::size_t m = 0; m < c.size(); ++m) f = f * cells_per_dim_[m] + c[m];
    return f;
  }

  // Visit all cells at Chebyshev ring distance exactly `r` from `center`.
  template <typename Fn>
  void for_ring(const std::vector<Index>& center, Index r, Fn&& fn) const {
    const Index d = points_.cols();
    std::vector<Index> c(static_cast<std::size_t>(d), 0);
    visit_ring(center, r, 0, false, c, fn);
  }

  template <typename Fn>
  void visit_ring(const std::vector<Index>& center, Index r, Index dim, bool boundary_taken,
                  std::vector<Index>& c, Fn&& fn) const {
    const Index d = points_.cols();
    if (dim == d) {
      if (boundary_taken || r == 0) fn(flat_cell(c));
      return;
    }
    const Index m = cells_per_dim_[static_cast<std::size_t>(dim)];
    const Index cen = center[static_cast<std::size_t>(dim)];
    const Index lo = std::max<Index>(0, cen - r);
    const Index hi = std::min<Index>(m - 1, cen + r);
    for (Index v = lo; v <= hi; ++v) {
      const bool at_boundary = (v == cen - r) || (v == cen + r);
      // Remaining dims must put the cell on the ring boundary if none so far.
      if (!boundary_taken && !at_boundary && dim == d - 1 && r > 0) continue;
      c[static_cast<std::size_t>(dim)] = v;
      visit_ring(center, r, dim + 1, boundary_taken || at_boundary, c, fn);
    }
  }

  std::vector<Index> nearest_grid(const Eigen::RowVectorXd& query, Index k,
                                  Index exclude) const {
    const std::vector<Index> center = cell_coords(query);
    std::vector<Candidate> cand;

    Index max_ring = 0;
    for (std::size_t m = 0; m < cells_per_dim_.size(); ++m) {
      max_ring = std::max(max_ring, cells_per_dim_[m]);
    }

    for (Index r = 0;; ++r) {
      for_ring(center, r, [&](Index cell) {
        const Index b = cell_starts_[static_cast<std::size_t>(cell)];
        const Index e = cell_starts_[static_cast<std::size_t>(cell) + 1];
        for (Index t = b; t < e; ++t) {
          const Index p = cell_points_[static_cast<std::size_t>(t)];
          if (p == exclude) continue;
          cand.push_back({sqdist(query, p), p});
        }
      });
      if (static_cast<Index>(cand.size()) >= k) {
        // kth best so far vs. lower bound for anything in rings > r. The
        // (1 - 1e-9) slack forces one more ring near the boundary rather
        // than trusting the last ulp of the bound.
        std::nth_element(cand.begin(), cand.begin() + (k - 1), cand.end(),
                         [](const Candidate& a, const Candidate& b) {
                           return detail::candidate_less(a.d2, a.idx, b.d2, b.idx);
                         });
        const double d2_k = cand[static_cast<std::size_t>(k - 1)].d2;
        const double bound = static_cast<double>(r) * min_edge_;
        if (min_edge_ > 0.0 && d2_k < bound * bound * (1.0 - 1e-9)) break;
      }
      if (r >= max_ring) break;  // every cell has been scanned
    }

    sort_candidates(cand);
    std::vector<Index> out(static_cast<std::size_t>(k));
    for (Index r = 0; r < k; ++r) out[static_cast<std::size_t>(r)] = cand[static_cast<std::size_t>(r)].idx;
    return out;
  }

  Matrix points_;
  KnnMethod method_;

  // grid state
  Eigen::RowVectorXd lo_, extent_;
  std::vector<Index> cells_per_dim_;
  std::vector<double> cell_edge_;
  double min_edge_ = 0.0;
  Index total_cells_ = 0;
  std::vector<Index> cell_starts_;
  std::vector<Index> cell_points_;
};

/// Build the directed kNN graph of a sample: each node gets out-edges to its
/// k nearest distinct points (ties broken toward the smaller index), with
/// per-edge attributes (x_i, x_i - x_j).
inline DomainGraph build_knn_graph(const FunctionSample& sample, Index k,
                                   KnnMethod method = KnnMethod::Auto) {
  validate_sample(sample);
  const Index n = sample.n_points();
  if (k < 1 || k > n - 1) {
    throw ValidationError("build_knn_graph: k=" + std::to_string(k) +
                          " out of range [1, " + std::to_string(n - 1) + "]");
  }

  NeighborIndex index(sample.coords, method);
  DomainGraph g;
  g.n_nodes = n;
  g.k = k;
  g.edges.reserve(static_cast<std::size_t>(n * k));
  g.node_offsets.assign(static_cast<std::size_t>(n) + 1, 0);

  const Index d = sample.domain_dim();
  g.edge_attrs.resize(n * k, 2 * d);

  Index e = 0;
  for (Index i = 0; i < n; ++i) {
    std::vector<Index> nbrs = index.nearest(sample.coords.row(i), k, i);
    std::sort(nbrs.begin(), nbrs.end());  // edge order is by (i, j), not by distance
    g.node_offsets[static_cast<std::size_t>(i)] = e;
    for (Index j : nbrs) {
      g.edges.push_back({i, j});
      g.edge_attrs.block(e, 0, 1, d) = sample.coords.row(i);
      g.edge_attrs.block(e, d, 1, d) = sample.coords.row(i) - sample.coords.row(j);
      ++e;
    }
  }
  g.node_offsets[static_cast<std::size_t>(n)] = e;
  return g;
}

/// Nodes whose features can reach `node` within `hops` aggregation steps
/// (including the node itself). Returned sorted ascending.
inline std::vector<Index> receptive_field(const DomainGraph& graph, Index node, Index hops) {
  if (node < 0 || node >= graph.n_nodes) {
    throw ValidationError("receptive_field: node " + std::to_string(node) + " out of range");
  }
  if (hops < 0) throw ValidationError("receptive_field: hops must be >= 0");

  std::vector<char> seen(static_cast<std::size_t>(graph.n_nodes), 0);
  std::vector<Index> frontier{node};
  seen[static_cast<std::size_t>(node)] = 1;
  for (Index step = 0; step < hops && !frontier.empty(); ++step) {
    std::vector<Index> next;
    for (Index u : frontier) {
      const Index b = graph.node_offsets[static_cast<std::size_t>(u)];
      const Index e = graph.node_offsets[static_cast<std::size_t>(u) + 1];
      for (Index t = b; t < e; ++t) {
        const Index v = graph.edges[static_cast<std::size_t>(t)].j;
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = 1;
          next.push_back(v);
        }
      }
    }
    frontier.swap(next);
  }
  std::vector<Index> out;
  for (Index v = 0; v < graph.n_nodes; ++v) {
    if (seen[static_cast<std::size_t>(v)]) out.push_back(v);
  }
  return out;
}

namespace detail {

constexpr double kIdwEps = 1e-12;
constexpr double kCoincidenceTol = 1e-12;  // on the distance, not its square

// Edge spans per group; requires the list grouped by ascending i.
inline std::vector<Index> group_offsets(const std::vector<Edge>& edges, Index n_groups) {
  std::vector<Index> offsets(static_cast<std::size_t>(n_groups) + 1, 0);
  Index prev = -1;
  for (const Edge& e : edges) {
    if (e.i < prev || e.i >= n_groups) {
      throw ValidationError("edge list is not grouped by ascending source node");
    }
    prev = e.i;
    ++offsets[static_cast<std::size_t>(e.i) + 1];
  }
  for (Index g = 0; g < n_groups; ++g) {
    offsets[static_cast<std::size_t>(g) + 1] += offsets[static_cast<std::size_t>(g)];
  }
  return offsets;
}

}  // namespace detail

/// Inverse-distance-weighted feature interpolation along cross edges
/// (query -> source). Weight 1/(dist^2 + eps); a query landing exactly on a
/// source point copies that source's values bit-for-bit.
inline Matrix idw_init(const FunctionSample& source, const Matrix& query_coords,
                       const std::vector<Edge>& cross_edges) {
  const Index n_q = query_coords.rows();
  const Index d_f = source.value_dim();
  Matrix out = Matrix::Zero(n_q, d_f);

  std::vector<Index> offsets = detail::group_offsets(cross_edges, n_q);
  for (Index q = 0; q < n_q; ++q) {
    const Index b = offsets[static_cast<std::size_t>(q)];
    const Index e = offsets[static_cast<std::size_t>(q) + 1];
    if (b == e) {
      throw ValidationError("idw_init: query node " + std::to_string(q) +
                            " has no cross neighbors");
    }
    Index coincident = -1;
    for (Index t = b; t < e; ++t) {
      const Index s = cross_edges[static_cast<std::size_t>(t)].j;
      const double d2 = squared_distance(query_coords, q, source.coords, s);
      if (d2 < detail::kCoincidenceTol * detail::kCoincidenceTol) {
        coincident = s;
        break;
      }
    }
    if (coincident >= 0) {
      out.row(q) = source.values.row(coincident);
      continue;
    }
    double wsum = 0.0;
    for (Index t = b; t < e; ++t) {
      const Index s = cross_edges[static_cast<std::size_t>(t)].j;
      const double d2 = squared_distance(query_coords, q, source.coords, s);
      const double w = 1.0 / (d2 + detail::kIdwEps);
      out.row(q) += w * source.values.row(s);
      wsum += w;
    }
    out.row(q) /= wsum;
  }
  return out;
}

/// Source graph + query graph + directed source->query cross edges, with
/// IDW-initialized query features. The source sample is canonicalized to
/// lexicographic coordinate order on entry, which makes everything computed
/// from the dual graph invariant to the caller's source row ordering.
struct DualGraph {
  FunctionSample source;  // canonical order
  DomainGraph source_graph;
  Matrix query_coords;
  DomainGraph target_graph;
  std::vector<Edge> cross_edges;  // (query q, source s), sorted by (q, s)
  Matrix cross_attrs;             // (x_q, x_q - x_s)
  std::vector<Index> cross_offsets;
  Matrix init_features;  // N_q x d_f
  Index k_cross = 0;
};

inline FunctionSample canonical_order(const FunctionSample& sample) {
  const Index n = sample.n_points();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const Matrix& x = sample.coords;
  std::sort(order.begin(), order.end(), [&x](Index a, Index b) {
    for (Index d = 0; d < x.cols(); ++d) {
      if (x(a, d) != x(b, d)) return x(a, d) < x(b, d);
    }
    return a < b;
  });
  FunctionSample out;
  out.sample_id = sample.sample_id;
  out.coords.resize(n, sample.coords.cols());
  out.values.resize(n, sample.values.cols());
  for (Index r = 0; r < n; ++r) {
    out.coords.row(r) = sample.coords.row(order[static_cast<std::size_t>(r)]);
    out.values.row(r) = sample.values.row(order[static_cast<std::size_t>(r)]);
  }
  return out;
}

inline DualGraph build_dual_graph(const FunctionSample& source_in, const Matrix& query_coords,
                                  Index k, Index k_cross, KnnMethod method = KnnMethod::Auto) {
  validate_sample(source_in);
  if (!query_coords.allFinite()) {
    throw ValidationError("build_dual_graph: non-finite query coordinates");
  }
  if (query_coords.cols() != source_in.domain_dim()) {
    throw ValidationError("build_dual_graph: query dim " + std::to_string(query_coords.cols()) +
                          " != source dim " + std::to_string(source_in.domain_dim()));
  }
  const Index n_s = source_in.n_points();
  const Index n_q = query_coords.rows();
  if (k_cross < 1 || k_cross > n_s) {
    throw ValidationError("build_dual_graph: k_cross=" + std::to_string(k_cross) +
                          " out of range [1, " + std::to_string(n_s) + "]");
  }

  DualGraph dual;
  dual.k_cross = k_cross;
  dual.source = canonical_order(source_in);
  dual.source_graph = build_knn_graph(dual.source, k, method);
  dual.query_coords = query_coords;

  FunctionSample query_sample;
  query_sample.coords = query_coords;
  query_sample.values = Matrix(n_q, 0);
  query_sample.sample_id = source_in.sample_id + ":query";
  dual.target_graph = build_knn_graph(query_sample, k, method);

  NeighborIndex source_index(dual.source.coords, method);
  const Index d = source_in.domain_dim();
  dual.cross_edges.reserve(static_cast<std::size_t>(n_q * k_cross));
  dual.cross_attrs.resize(n_q * k_cross, 2 * d);
  Index e = 0;
  for (Index q = 0; q < n_q; ++q) {
    std::vector<Index> nbrs = source_index.nearest(query_coords.row(q), k_cross);
    std::sort(nbrs.begin(), nbrs.end());
    for (Index s : nbrs) {
      dual.cross_edges.push_back({q, s});
      dual.cross_attrs.block(e, 0, 1, d) = query_coords.row(q);
      dual.cross_attrs.block(e, d, 1, d) = query_coords.row(q) - dual.source.coords.row(s);
      ++e;
    }
  }
  dual.cross_offsets = detail::group_offsets(dual.cross_edges, n_q);
  dual.init_features = idw_init(dual.source, query_coords, dual.cross_edges);
  return dual;
}

}  // namespace nofe

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nofe/errors.hpp"
#include "nofe/metrics.hpp"
#include "nofe/types.hpp"

namespace nofe {

/// Maps a point's embedding given only one patch of the sample.
using SubsetEmbedder = std::function<Matrix(const FunctionSample&)>;

/// Quadrant of the coordinate bounding box: bit 0 = right half, bit 1 = top
/// half (2-D domains).
inline std::vector<int> quadrant_assignment(const Matrix& coords) {
  if (coords.cols() != 2) {
    throw ValidationError("quadrant_assignment: only 2-D domains are supported");
  }
  const Eigen::RowVectorXd lo = coords.colwise().minCoeff();
  const Eigen::RowVectorXd hi = coords.colwise().maxCoeff();
  const double mx = 0.5 * (lo(0) + hi(0));
  const double my = 0.5 * (lo(1) + hi(1));
  std::vector<int> assign(static_cast<std::size_t>(coords.rows()));
  for (Index p = 0; p < coords.rows(); ++p) {
    assign[static_cast<std::size_t>(p)] =
        (coords(p, 0) > mx ? 1 : 0) + (coords(p, 1) > my ? 2 : 0);
  }
  return assign;
}

/// Embed each group independently and reassemble the rows in the original
/// point order. Group membership order is preserved inside each subset.
inline Matrix embed_subsets(const FunctionSample& sample, const std::vector<int>& assign,
                            int n_groups, const SubsetEmbedder& embed) {
  const Index n = sample.n_points();
  Matrix out;
  for (int g = 0; g < n_groups; ++g) {
    std::vector<Index> rows;
    for (Index p = 0; p < n; ++p) {
      if (assign[static_cast<std::size_t>(p)] == g) rows.push_back(p);
    }
    if (rows.size() < 2) {
      throw ValidationError("embed_subsets: group " + std::to_string(g) + " has fewer than 2 points");
    }
    FunctionSample sub;
    sub.sample_id = sample.sample_id + ":g" + std::to_string(g);
    sub.coords.resize(static_cast<Index>(rows.size()), sample.domain_dim());
    sub.values.resize(static_cast<Index>(rows.size()), sample.value_dim());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      sub.coords.row(static_cast<Index>(r)) = sample.coords.row(rows[r]);
      sub.values.row(static_cast<Index>(r)) = sample.values.row(rows[r]);
    }
    const Matrix z = embed(sub);
    if (out.size() == 0) out.resize(n, z.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.row(rows[r]) = z.row(static_cast<Index>(r));
    }
  }
  return out;
}

struct QuadrantStitching {
  double se_region = 0.0;
  double se_local = 0.0;
  Index dropped_terms = 0;
};

/// Patch-stitching errors for the four-quadrant experiment: each of the four
/// neighboring quadrant pairs contributes one symmetrized error per mode,
/// averaged into the report.
inline QuadrantStitching quadrant_stitching_error(const Matrix& coords, const Matrix& embeddings,
                                                  const std::vector<int>& assign,
                                                  double border_width) {
  const Eigen::RowVectorXd lo = coords.colwise().minCoeff();
  const Eigen::RowVectorXd hi = coords.colwise().maxCoeff();
  const double mx = 0.5 * (lo(0) + hi(0));
  const double my = 0.5 * (lo(1) + hi(1));

  // (group a, group b, axis, boundary)
  struct Pair {
    int a, b;
    Index axis;
    double threshold;
  };
  const Pair pairs[4] = {{0, 1, 0, mx}, {2, 3, 0, mx}, {0, 2, 1, my}, {1, 3, 1, my}};

  QuadrantStitching result;
  for (const Pair& pr : pairs) {
    std::vector<Index> rows;
    for (Index p = 0; p < coords.rows(); ++p) {
      const int g = assign[static_cast<std::size_t>(p)];
      if (g == pr.a || g == pr.b) rows.push_back(p);
    }
    Matrix sub_coords(static_cast<Index>(rows.size()), coords.cols());
    Matrix sub_z(static_cast<Index>(rows.size()), embeddings.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      sub_coords.row(static_cast<Index>(r)) = coords.row(rows[r]);
      sub_z.row(static_cast<Index>(r)) = embeddings.row(rows[r]);
    }
    const PatchSplit split = make_axis_split(sub_coords, pr.axis, pr.threshold, border_width);
    const StitchResult region = patch_stitching_error(split, sub_coords, sub_z, StitchMode::Region);
    const StitchResult local = patch_stitching_error(split, sub_coords, sub_z, StitchMode::Local);
    result.se_region += region.value / 4.0;
    result.se_local += local.value / 4.0;
    result.dropped_terms += region.dropped_terms + local.dropped_terms;
  }
  return result;
}

/// Two overlapping patches along one axis: rows of each patch in original
/// point order, plus the positions of the shared overlap points within each
/// patch (aligned lists).
struct OverlapSplit {
  std::vector<Index> rows_a;
  std::vector<Index> rows_b;
  std::vector<Index> overlap_in_a;
  std::vector<Index> overlap_in_b;
};

inline OverlapSplit make_overlap_split(const Matrix& coords, Index axis, double lo, double hi) {
  if (!(lo < hi)) throw ValidationError("make_overlap_split: need lo < hi");
  OverlapSplit split;
  std::vector<Index> pos_in_a(static_cast<std::size_t>(coords.rows()), -1);
  std::vector<Index> pos_in_b(static_cast<std::size_t>(coords.rows()), -1);
  for (Index p = 0; p < coords.rows(); ++p) {
    const double c = coords(p, axis);
    if (c <= hi) {
      pos_in_a[static_cast<std::size_t>(p)] = static_cast<Index>(split.rows_a.size());
      split.rows_a.push_back(p);
    }
    if (c >= lo) {
      pos_in_b[static_cast<std::size_t>(p)] = static_cast<Index>(split.rows_b.size());
      split.rows_b.push_back(p);
    }
  }
  for (Index p = 0; p < coords.rows(); ++p) {
    if (pos_in_a[static_cast<std::size_t>(p)] >= 0 && pos_in_b[static_cast<std::size_t>(p)] >= 0) {
      split.overlap_in_a.push_back(pos_in_a[static_cast<std::size_t>(p)]);
      split.overlap_in_b.push_back(pos_in_b[static_cast<std::size_t>(p)]);
    }
  }
  if (split.overlap_in_a.size() < 2) {
    throw ValidationError("make_overlap_split: overlap has fewer than 2 points");
  }
  return split;
}

/// Gluing error with full-patch standardization: each patch embedding is
/// standardized per dimension over all of its rows, then the mean squared
/// difference is taken over the overlap rows. Dimensions degenerate in either
/// patch are dropped from both.
inline double glue_mse_full_patch(const Matrix& z_patch_a, const Matrix& z_patch_b,
                                  const OverlapSplit& split) {
  if (z_patch_a.rows() != static_cast<Index>(split.rows_a.size()) ||
      z_patch_b.rows() != static_cast<Index>(split.rows_b.size())) {
    throw ValidationError("glue_mse_full_patch: patch embedding rows do not match split");
  }
  auto [sa, keep_a] = standardize_columns(z_patch_a);
  auto [sb, keep_b] = standardize_columns(z_patch_b);
  std::vector<Index> cols;
  for (Index c = 0; c < z_patch_a.cols(); ++c) {
    if (keep_a[static_cast<std::size_t>(c)] && keep_b[static_cast<std::size_t>(c)]) {
      cols.push_back(c);
    }
  }
  if (cols.empty()) throw ValidationError("glue_mse_full_patch: every dimension is degenerate");
  double sum = 0.0;
  for (std::size_t t = 0; t < split.overlap_in_a.size(); ++t) {
    for (Index c : cols) {
      const double diff = sa(split.overlap_in_a[t], c) - sb(split.overlap_in_b[t], c);
      sum += diff * diff;
    }
  }
  return sum / static_cast<double>(split.overlap_in_a.size() * cols.size());
}

}  // namespace nofe

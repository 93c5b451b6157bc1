// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "nofe/baselines.hpp"
#include "nofe/errors.hpp"
#include "nofe/graph.hpp"
#include "nofe/types.hpp"

#include <json.hpp>

namespace nofe {

namespace detail {

inline double pair_distance(const Matrix& m, Index i, Index j) {
  return std::sqrt(squared_distance(m, i, m, j));
}

inline double stress_over_pairs(const Matrix& values, const Matrix& embeddings,
                                const std::vector<std::pair<Index, Index>>& pairs,
                                const char* what) {
  double num = 0.0;
  double den = 0.0;
  for (const auto& [i, j] : pairs) {
    const double dy = pair_distance(values, i, j);
    const double dz = pair_distance(embeddings, i, j);
    num += (dy - dz) * (dy - dz);
    den += dy * dy;
  }
  if (den <= 0.0) {
    throw ValidationError(std::string(what) + ": all value distances are zero");
  }
  return std::sqrt(num / den);
}

}  // namespace detail

/// Kruskal Stress-1 over all unordered point pairs.
inline double stress1(const Matrix& values, const Matrix& embeddings) {
  const Index n = values.rows();
  if (n < 2 || embeddings.rows() != n) {
    throw ValidationError("stress1: need matching N >= 2");
  }
  std::vector<std::pair<Index, Index>> pairs;
  pairs.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
  }
  return detail::stress_over_pairs(values, embeddings, pairs, "stress1");
}

/// Stress restricted to graph edges, with directed duplicates reduced to
/// unordered pairs.
inline double stress_local(const DomainGraph& graph, const Matrix& values,
                           const Matrix& embeddings) {
  if (values.rows() != graph.n_nodes || embeddings.rows() != graph.n_nodes) {
    throw ValidationError("stress_local: rows do not match graph");
  }
  std::set<std::pair<Index, Index>> dedup;
  for (const Edge& e : graph.edges) {
    dedup.emplace(std::min(e.i, e.j), std::max(e.i, e.j));
  }
  std::vector<std::pair<Index, Index>> pairs(dedup.begin(), dedup.end());
  return detail::stress_over_pairs(values, embeddings, pairs, "stress_local");
}

struct LipschitzResult {
  std::vector<double> ratios;  // kept edges, in graph edge order
  Index skipped = 0;           // edges with identical values on both ends
};

/// Per-edge ratio ||z_i - z_j|| / ||y_i - y_j|| (the domain distance cancels
/// between the two pairwise Lipschitz quotients).
inline LipschitzResult lipschitz_ratios(const DomainGraph& graph, const Matrix& values,
                                        const Matrix& embeddings) {
  if (values.rows() != graph.n_nodes || embeddings.rows() != graph.n_nodes) {
    throw ValidationError("lipschitz_ratios: rows do not match graph");
  }
  LipschitzResult result;
  result.ratios.reserve(graph.edges.size());
  for (const Edge& e : graph.edges) {
    const double dy = detail::pair_distance(values, e.i, e.j);
    if (dy == 0.0) {
      ++result.skipped;
      continue;
    }
    result.ratios.push_back(detail::pair_distance(embeddings, e.i, e.j) / dy);
  }
  return result;
}

/// Fixed-width histogram of ratios: 60 bins of width 0.1 over [0, 6) plus an
/// overflow bin.
inline std::vector<Index> lipschitz_histogram(const std::vector<double>& ratios) {
  std::vector<Index> bins(61, 0);
  for (double r : ratios) {
    const Index b = r >= 6.0 ? 60 : static_cast<Index>(r / 0.1);
    ++bins[static_cast<std::size_t>(std::min<Index>(b, 60))];
  }
  return bins;
}

// ---------------------------------------------------------------------------
// Patch stitching
// ---------------------------------------------------------------------------

/// Assignment of points to two patches split by an axis-aligned boundary,
/// plus the border bands on each side.
struct PatchSplit {
  std::vector<bool> in_a;
  std::vector<Index> border_a;  // A-points within border_width of the boundary
  std::vector<Index> border_b;
  double border_width = 0.0;
};

inline PatchSplit make_axis_split(const Matrix& coords, Index axis, double threshold,
                                  double border_width) {
  if (axis < 0 || axis >= coords.cols()) {
    throw ValidationError("make_axis_split: axis out of range");
  }
  if (!(border_width > 0.0)) {
    throw ValidationError("make_axis_split: border_width must be > 0");
  }
  PatchSplit split;
  split.border_width = border_width;
  split.in_a.resize(static_cast<std::size_t>(coords.rows()));
  for (Index p = 0; p < coords.rows(); ++p) {
    const double c = coords(p, axis);
    const bool a = c <= threshold;
    split.in_a[static_cast<std::size_t>(p)] = a;
    if (a && threshold - c <= border_width) split.border_a.push_back(p);
    if (!a && c - threshold <= border_width) split.border_b.push_back(p);
  }
  return split;
}

enum class StitchMode { Region, Local };

struct StitchResult {
  double value = 0.0;
  Index dropped_terms = 0;  // terms lost to near-zero denominators
};

namespace detail {

inline Index nearest_in_set(const Matrix& coords, Index from, const std::vector<Index>& set,
                            bool exclude_self) {
  Index best = -1;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (Index cand : set) {
    if (exclude_self && cand == from) continue;
    const double d2 = squared_distance(coords, from, coords, cand);
    if (d2 < best_d2 || (d2 == best_d2 && cand < best)) {
      best_d2 = d2;
      best = cand;
    }
  }
  return best;
}

inline std::pair<double, Index> stitch_direction(const std::vector<Index>& from,
                                                 const std::vector<Index>& to,
                                                 const Matrix& coords, const Matrix& z,
                                                 StitchMode mode) {
  double sum = 0.0;
  Index kept = 0;
  Index dropped = 0;
  for (Index a : from) {
    const Index b = nearest_in_set(coords, a, to, false);
    const double cross = std::sqrt(squared_distance(z, a, z, b));
    double denom = 0.0;
    if (mode == StitchMode::Region) {
      Index count = 0;
      for (Index other : from) {
        if (other == a) continue;
        denom += std::sqrt(squared_distance(z, a, z, other));
        ++count;
      }
      denom /= static_cast<double>(count);
    } else {
      const Index nn = nearest_in_set(coords, a, from, true);
      denom = std::sqrt(squared_distance(z, a, z, nn));
    }
    if (denom < 1e-12) {
      ++dropped;
      continue;
    }
    sum += cross / denom;
    ++kept;
  }
  if (kept == 0) {
    throw ValidationError("patch_stitching_error: every term had a degenerate denominator");
  }
  return {sum / static_cast<double>(kept), dropped};
}

}  // namespace detail

/// Normalized embedding distance across the patch boundary, averaged over
/// border points and symmetrized over the two directions. Region mode
/// normalizes by the mean embedding distance to the other border points of
/// the same side; Local mode by the embedding distance to the spatially
/// nearest same-side border point.
inline StitchResult patch_stitching_error(const PatchSplit& split, const Matrix& coords,
                                          const Matrix& embeddings, StitchMode mode) {
  if (coords.rows() != embeddings.rows() ||
      coords.rows() != static_cast<Index>(split.in_a.size())) {
    throw ValidationError("patch_stitching_error: shape mismatch");
  }
  if (split.border_a.empty() || split.border_b.empty()) {
    throw ValidationError("patch_stitching_error: empty border set");
  }
  if (split.border_a.size() < 2 || split.border_b.size() < 2) {
    throw ValidationError("patch_stitching_error: need at least 2 points per border set");
  }
  auto [ab, dropped_ab] =
      detail::stitch_direction(split.border_a, split.border_b, coords, embeddings, mode);
  auto [ba, dropped_ba] =
      detail::stitch_direction(split.border_b, split.border_a, coords, embeddings, mode);
  return {0.5 * (ab + ba), dropped_ab + dropped_ba};
}

// ---------------------------------------------------------------------------
// Gluing
// ---------------------------------------------------------------------------

inline double mean_squared_difference(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError("mean_squared_difference: shape mismatch");
  }
  return (a - b).array().square().sum() / static_cast<double>(a.size());
}

/// Column-wise standardization to mean 0 and (population) standard deviation
/// 1. Columns with std below 1e-12 are reported degenerate.
inline std::pair<Matrix, std::vector<bool>> standardize_columns(const Matrix& m) {
  Matrix out = m;
  std::vector<bool> keep(static_cast<std::size_t>(m.cols()), true);
  for (Index c = 0; c < m.cols(); ++c) {
    const double mean = m.col(c).mean();
    const double var = (m.col(c).array() - mean).square().mean();
    const double sd = std::sqrt(var);
    if (sd < 1e-12) {
      keep[static_cast<std::size_t>(c)] = false;
      continue;
    }
    out.col(c) = (m.col(c).array() - mean) / sd;
  }
  return {std::move(out), std::move(keep)};
}

/// Mean squared disagreement of two embeddings of the same overlap points,
/// after standardizing each set per dimension. Dimensions degenerate in
/// either set are dropped from both.
inline double gluing_mse(const Matrix& z_overlap_a, const Matrix& z_overlap_b) {
  if (z_overlap_a.rows() != z_overlap_b.rows() || z_overlap_a.cols() != z_overlap_b.cols()) {
    throw ValidationError("gluing_mse: shape mismatch");
  }
  if (z_overlap_a.rows() < 2) throw ValidationError("gluing_mse: need at least 2 overlap rows");

  auto [sa, keep_a] = standardize_columns(z_overlap_a);
  auto [sb, keep_b] = standardize_columns(z_overlap_b);
  std::vector<Index> cols;
  for (Index c = 0; c < z_overlap_a.cols(); ++c) {
    if (keep_a[static_cast<std::size_t>(c)] && keep_b[static_cast<std::size_t>(c)]) {
      cols.push_back(c);
    }
  }
  if (cols.empty()) {
    throw ValidationError("gluing_mse: every dimension is degenerate");
  }
  double sum = 0.0;
  for (Index c : cols) sum += (sa.col(c) - sb.col(c)).array().square().sum();
  return sum / static_cast<double>(z_overlap_a.rows() * static_cast<Index>(cols.size()));
}

// ---------------------------------------------------------------------------
// Grayscale correlation
// ---------------------------------------------------------------------------

namespace detail {

inline double pearson(const Vector& x, const Vector& y) {
  const double n = static_cast<double>(x.size());
  const double mx = x.mean();
  const double my = y.mean();
  const double cov = ((x.array() - mx) * (y.array() - my)).sum() / (n - 1.0);
  const double vx = (x.array() - mx).square().sum() / (n - 1.0);
  const double vy = (y.array() - my).square().sum() / (n - 1.0);
  if (vx <= 0.0 || vy <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return cov / std::sqrt(vx * vy);
}

}  // namespace detail

/// |Pearson correlation| between the first principal score of the embeddings
/// and each input channel. Zero-variance channels come back as NaN markers.
inline std::vector<double> grayscale_correlation(const Matrix& embeddings, const Matrix& values) {
  if (embeddings.rows() != values.rows() || embeddings.rows() < 3) {
    throw ValidationError("grayscale_correlation: need matching N >= 3");
  }
  PcaModel reducer;
  try {
    reducer = pca_fit(embeddings, 1);
  } catch (const ValidationError&) {
    throw ValidationError("grayscale_correlation: degenerate embeddings (no variance)");
  }
  const Vector score = pca_transform(reducer, embeddings).col(0);
  std::vector<double> corr(static_cast<std::size_t>(values.cols()));
  for (Index c = 0; c < values.cols(); ++c) {
    const double r = detail::pearson(score, values.col(c));
    corr[static_cast<std::size_t>(c)] = std::isnan(r) ? r : std::abs(r);
  }
  return corr;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct MetricReport {
  static constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();

  double stress1 = kUnset;
  double stress_local = kUnset;
  std::vector<double> lipschitz_ratios;
  Index lipschitz_skipped = 0;
  double se_region = kUnset;
  double se_local = kUnset;
  double gluing_mse = kUnset;
  std::vector<double> grayscale_corr;
};

inline nlohmann::json report_to_json(const MetricReport& r) {
  nlohmann::json j;
  auto put = [&j](const char* key, double v) {
    if (!std::isnan(v)) j[key] = v;
  };
  put("stress1", r.stress1);
  put("stress_local", r.stress_local);
  put("se_region", r.se_region);
  put("se_local", r.se_local);
  put("gluing_mse", r.gluing_mse);
  if (!r.lipschitz_ratios.empty()) {
    std::vector<double> sorted = r.lipschitz_ratios;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median =
        n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    double mean = 0.0;
    for (double v : sorted) mean += v;
    mean /= static_cast<double>(n);
    j["lipschitz_mean"] = mean;
    j["lipschitz_median"] = median;
    j["lipschitz_count"] = n;
    j["lipschitz_skipped"] = r.lipschitz_skipped;
    j["lipschitz_histogram"] = lipschitz_histogram(r.lipschitz_ratios);
  }
  if (!r.grayscale_corr.empty()) j["grayscale_corr"] = r.grayscale_corr;
  return j;
}

inline std::string report_to_text(const MetricReport& r) {
  const nlohmann::json j = report_to_json(r);
  std::string out;
  for (const auto& [key, value] : j.items()) {
    out += key;
    out += ' ';
    if (value.is_array()) {
      for (std::size_t i = 0; i < value.size(); ++i) {
        if (i) out += ',';
        out += value[i].is_null() ? "nan" : value[i].dump();
      }
    } else {
      out += value.dump();
    }
    out += '\n';
  }
  return out;
}

}  // namespace nofe

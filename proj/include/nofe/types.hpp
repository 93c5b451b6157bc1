// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "nofe/errors.hpp"

namespace nofe {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// One sampled realization of a function f over a continuous domain:
/// coordinates (N x d_x) paired row-by-row with function values (N x d_f).
struct FunctionSample {
  Matrix coords;
  Matrix values;
  std::string sample_id;

  Index n_points() const { return coords.rows(); }
  Index domain_dim() const { return coords.cols(); }
  Index value_dim() const { return values.cols(); }
};

inline void validate_sample(const FunctionSample& sample) {
  const Index n = sample.coords.rows();
  if (n < 2) {
    throw ValidationError("sample '" + sample.sample_id + "': needs at least 2 points, has " +
                          std::to_string(n));
  }
  if (sample.values.rows() != n) {
    throw ValidationError("sample '" + sample.sample_id + "': coords rows (" +
                          std::to_string(n) + ") != values rows (" +
                          std::to_string(sample.values.rows()) + ")");
  }
  if (!sample.coords.allFinite() || !sample.values.allFinite()) {
    throw ValidationError("sample '" + sample.sample_id + "': non-finite entries");
  }
  // Duplicate-row detection via lexicographic sort of row indices.
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const Matrix& x = sample.coords;
  auto row_less = [&x](Index a, Index b) {
    for (Index d = 0; d < x.cols(); ++d) {
      if (x(a, d) != x(b, d)) return x(a, d) < x(b, d);
    }
    return false;
  };
  std::sort(order.begin(), order.end(), row_less);
  for (std::size_t i = 1; i < order.size(); ++i) {
    const Index a = order[i - 1];
    const Index b = order[i];
    if (x.row(a) == x.row(b)) {
      throw ValidationError("sample '" + sample.sample_id + "': duplicate coordinates at rows " +
                            std::to_string(std::min(a, b)) + " and " +
                            std::to_string(std::max(a, b)));
    }
  }
}

inline double squared_distance(const Matrix& a, Index i, const Matrix& b, Index j) {
  double s = 0.0;
  for (Index d = 0; d < a.cols(); ++d) {
    const double diff = a(i, d) - b(j, d);
    s += diff * diff;
  }
  return s;
}

}  // namespace nofe

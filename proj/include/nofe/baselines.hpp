// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Eigenvalues>
#include <string>

#include "nofe/errors.hpp"
#include "nofe/types.hpp"

namespace nofe {

struct PcaModel {
  Vector mean;         // d_f
  Matrix components;   // d_g x d_f, orthonormal rows in descending eigenvalue order
  Vector eigenvalues;  // d_g, non-negative and non-increasing
};

/// Exact PCA of the sample covariance (divisor N-1). Components are
/// sign-fixed so the largest-magnitude entry of each row is positive, which
/// makes repeated fits bit-identical.
inline PcaModel pca_fit(const Matrix& values, Index d_g) {
  const Index n = values.rows();
  const Index d_f = values.cols();
  if (n < 2) throw ValidationError("pca_fit: need at least 2 rows");
  if (d_g < 1 || d_g > std::min(n - 1, d_f)) {
    throw ValidationError("pca_fit: d_g=" + std::to_string(d_g) + " out of range [1, " +
                          std::to_string(std::min(n - 1, d_f)) + "]");
  }

  PcaModel model;
  model.mean = values.colwise().mean().transpose();
  Matrix centered = values.rowwise() - model.mean.transpose();
  Matrix cov = (centered.transpose() * centered) / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw NumericError("pca_fit: eigendecomposition failed");
  }
  const Vector& evals = solver.eigenvalues();  // ascending
  const double lambda_max = evals(d_f - 1);
  Index rank = 0;
  for (Index i = 0; i < d_f; ++i) {
    if (evals(i) > std::max(lambda_max, 0.0) * 1e-12 && evals(i) > 0.0) ++rank;
  }
  if (rank < d_g) {
    throw ValidationError("pca_fit: data rank " + std::to_string(rank) +
                          " is below requested d_g=" + std::to_string(d_g));
  }

  model.eigenvalues.resize(d_g);
  model.components.resize(d_g, d_f);
  for (Index c = 0; c < d_g; ++c) {
    const Index src = d_f - 1 - c;  // descending order
    model.eigenvalues(c) = std::max(evals(src), 0.0);
    Vector v = solver.eigenvectors().col(src);
    Index arg_max = 0;
    for (Index r = 1; r < d_f; ++r) {
      if (std::abs(v(r)) > std::abs(v(arg_max))) arg_max = r;
    }
    if (v(arg_max) < 0.0) v = -v;
    model.components.row(c) = v.transpose();
  }
  return model;
}

inline Matrix pca_transform(const PcaModel& model, const Matrix& values) {
  if (values.cols() != model.mean.size()) {
    throw ValidationError("pca_transform: values dim " + std::to_string(values.cols()) +
                          " != model dim " + std::to_string(model.mean.size()));
  }
  return (values.rowwise() - model.mean.transpose()) * model.components.transpose();
}

}  // namespace nofe

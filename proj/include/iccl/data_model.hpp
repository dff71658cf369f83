// SPDX-License-Identifier: Apache-2.0
//
// Statistical objects of the data model: the input covariance with its
// cached eigendecomposition, per-task moments of the label-weighted input
// x*y, task sequences, and the preconditioner Gamma induced by pretraining.

#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "iccl/errors.hpp"

namespace iccl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Input covariance Lambda, SPD, with eigenpairs Lambda = sum_i lambda_i v_i v_i^T.
// Immutable after construction; safe to share across threads.
class Covariance {
 public:
  // Accepts a symmetric matrix (asymmetry up to 1e-8 relative is tolerated
  // and symmetrized away). All eigenvalues must exceed 1e-12.
  static Covariance from_matrix(const Matrix& input) {
    if (input.rows() != input.cols() || input.rows() < 1) {
      throw DimensionMismatchError("covariance matrix must be square and non-empty");
    }
    const double scale = std::max(1.0, input.cwiseAbs().maxCoeff());
    const double asym = (input - input.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-8 * scale) {
      throw NotSymmetricError("covariance asymmetry exceeds 1e-8 relative");
    }
    Matrix sym = 0.5 * (input + input.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
    if (solver.info() != Eigen::Success) {
      throw NotPositiveDefiniteError("eigendecomposition failed");
    }
    if (solver.eigenvalues().minCoeff() <= 1e-12) {
      throw NotPositiveDefiniteError("covariance has an eigenvalue <= 1e-12");
    }
    return Covariance(std::move(sym), solver.eigenvalues(), solver.eigenvectors());
  }

  static Covariance identity(Eigen::Index dim) {
    return from_matrix(Matrix::Identity(dim, dim));
  }

  Eigen::Index dim() const { return matrix_.rows(); }
  const Matrix& matrix() const { return matrix_; }
  const Vector& eigenvalues() const { return eigenvalues_; }
  const Matrix& eigenvectors() const { return eigenvectors_; }
  double trace() const { return trace_; }

  // V * diag(sqrt(lambda)); maps standard normals to N(0, Lambda).
  const Matrix& sqrt_factor() const { return sqrt_factor_; }

 private:
  Covariance(Matrix matrix, Vector eigenvalues, Matrix eigenvectors)
      : matrix_(std::move(matrix)),
        eigenvalues_(std::move(eigenvalues)),
        eigenvectors_(std::move(eigenvectors)),
        trace_(matrix_.trace()),
        sqrt_factor_(eigenvectors_ *
                     eigenvalues_.cwiseSqrt().asDiagonal()) {}

  Matrix matrix_;
  Vector eigenvalues_;
  Matrix eigenvectors_;
  double trace_;
  Matrix sqrt_factor_;
};

// One regression task: weight w, mean mu = E[x y] = Lambda w, and
// second moment Sigma = Var(x y).
struct TaskSpec {
  Vector weight;
  Vector mean;
  Matrix second_moment;
};

// Moments of x*y for y = w^T x, x ~ N(0, Lambda):
//   mu    = Lambda w
//   Sigma = Lambda w w^T Lambda + (w^T Lambda w) Lambda
// The Sigma closed form is gated behind a Monte Carlo oracle in the tests.
inline TaskSpec task_moments(const Vector& weight, const Covariance& cov) {
  if (weight.size() != cov.dim()) {
    throw DimensionMismatchError("task weight dimension does not match covariance");
  }
  Vector mean = cov.matrix() * weight;
  Matrix second_moment =
      mean * mean.transpose() + weight.dot(mean) * cov.matrix();
  return TaskSpec{weight, std::move(mean), std::move(second_moment)};
}

// T tasks with shared covariance, M in-context examples per task, and
// pretraining prompt length N.
struct TaskSequence {
  std::vector<TaskSpec> tasks;
  long long context_len = 1;  // M
  long long train_len = 1;    // N
  Covariance covariance;

  int num_tasks() const { return static_cast<int>(tasks.size()); }
};

inline TaskSequence make_task_sequence(const std::vector<Vector>& weights,
                                       Covariance cov, long long context_len,
                                       long long train_len) {
  if (weights.empty()) {
    throw InvalidConfigError("task sequence needs at least one task");
  }
  if (context_len < 1 || train_len < 1) {
    throw InvalidConfigError("context_len and train_len must be >= 1");
  }
  std::vector<TaskSpec> tasks;
  tasks.reserve(weights.size());
  for (const Vector& w : weights) {
    tasks.push_back(task_moments(w, cov));
  }
  return TaskSequence{std::move(tasks), context_len, train_len, std::move(cov)};
}

// Gamma = (1 + 1/N) Lambda + (tr(Lambda)/N) I. Shares the eigenbasis of
// Lambda; its eigenvalue on v_i is d_i = lambda_i + (lambda_i + tau)/N.
class GammaMatrix {
 public:
  static GammaMatrix build(const Covariance& cov, long long train_len) {
    if (train_len < 1) {
      throw InvalidConfigError("train_len must be >= 1");
    }
    const double n = static_cast<double>(train_len);
    const double tau = cov.trace();
    Matrix matrix = (1.0 + 1.0 / n) * cov.matrix() +
                    (tau / n) * Matrix::Identity(cov.dim(), cov.dim());
    Vector eigen_diag(cov.dim());
    for (Eigen::Index i = 0; i < cov.dim(); ++i) {
      const double lambda = cov.eigenvalues()[i];
      eigen_diag[i] = lambda + (lambda + tau) / n;
    }
    Matrix inverse = cov.eigenvectors() *
                     eigen_diag.cwiseInverse().asDiagonal() *
                     cov.eigenvectors().transpose();
    return GammaMatrix(std::move(matrix), std::move(inverse),
                       std::move(eigen_diag), cov, train_len);
  }

  const Matrix& matrix() const { return matrix_; }
  const Matrix& inverse() const { return inverse_; }
  const Vector& eigen_diag() const { return eigen_diag_; }
  const Covariance& covariance() const { return covariance_; }
  long long train_len() const { return train_len_; }

  double operator_norm() const { return eigen_diag_.maxCoeff(); }

  // a = tr(Gamma^{-2}); normalizes the analytic parameter limit.
  double trace_inverse_squared() const {
    return eigen_diag_.cwiseInverse().squaredNorm();
  }

 private:
  GammaMatrix(Matrix matrix, Matrix inverse, Vector eigen_diag, Covariance cov,
              long long train_len)
      : matrix_(std::move(matrix)),
        inverse_(std::move(inverse)),
        eigen_diag_(std::move(eigen_diag)),
        covariance_(std::move(cov)),
        train_len_(train_len) {}

  Matrix matrix_;
  Matrix inverse_;
  Vector eigen_diag_;
  Covariance covariance_;
  long long train_len_;
};

inline Covariance build_covariance(const Matrix& matrix) {
  return Covariance::from_matrix(matrix);
}

inline GammaMatrix build_gamma(const Covariance& cov, long long train_len) {
  return GammaMatrix::build(cov, train_len);
}

}  // namespace iccl

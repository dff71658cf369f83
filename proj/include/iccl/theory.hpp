// SPDX-License-Identifier: Apache-2.0
//
// Closed-form error theory for masked linear attention over sequential
// tasks: generalization and after-sequence error decompositions, the
// interference (forgetting) error with its five-way split, task-averaged
// forms, and the stationary pretraining length.
//
// All trace expressions are evaluated in the shared eigenbasis of Lambda
// and Gamma (diagonal arithmetic), never by explicit matrix inversion.

#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "iccl/data_model.hpp"
#include "iccl/errors.hpp"

namespace iccl {

struct GeneralizationBreakdown {
  double irreducible = 0.0;
  double variance = 0.0;
  double bias = 0.0;
  double total = 0.0;
};

struct ForgettingBreakdown {
  double total = 0.0;
  double intra_past = 0.0;
  double intra_future = 0.0;
  double cross_past = 0.0;
  double cross_future = 0.0;
  double cross_mixed = 0.0;
};

// Mask-induced weights. beta_t = 1/(t(M+1)) and alpha = M/(t(M+1)) govern
// the prediction right after task t; future_coeff (the paper-facing d) and
// c_t govern the final-query difference, with c_t = future_coeff - beta_t.
struct CoefficientSet {
  double beta_t = 0.0;
  double alpha = 0.0;
  double c_t = 0.0;
  double future_coeff = 0.0;
  Vector alpha_i_of_t;  // size T: c_t for i <= t, future_coeff beyond
  Vector avg_sq;        // averaged squared coefficients per task
  Matrix avg_cross;     // averaged cross coefficients (diagonal = avg_sq)
};

namespace theory_detail {

inline void check_task_index(int t, int num_tasks) {
  if (t < 1 || t > num_tasks) {
    throw IndexOutOfRangeError("task index must lie in 1..T");
  }
}

// c_t = -((T-t)M + (T+1-t)) / (t(M+1)(TM+T+1)), the main-text form.
// Numerator and both denominator factors are exact integers.
inline double interference_coeff(int num_tasks, long long m, int t) {
  const long long numer =
      static_cast<long long>(num_tasks - t) * m + (num_tasks + 1 - t);
  const double den1 = static_cast<double>(static_cast<long long>(t) * (m + 1));
  const double den2 =
      static_cast<double>(static_cast<long long>(num_tasks) * m + num_tasks + 1);
  return -static_cast<double>(numer) / (den1 * den2);
}

inline double final_norm_coeff(int num_tasks, long long m) {
  return 1.0 / static_cast<double>(static_cast<long long>(num_tasks) * m +
                                   num_tasks + 1);
}

// Per-coordinate contribution of Theorem-style bias terms:
// (1/lambda) * ((lambda(c s - m) - m (lambda+tau)/N) / (lambda + (lambda+tau)/N))^2.
// N is real-valued here so stationary points can be substituted directly.
inline double bias_coordinate(double lambda, double tau, double coeff, double s,
                              double m, double n) {
  const double ratio = (lambda + tau) / n;
  const double numer = lambda * (coeff * s - m) - m * ratio;
  const double frac = numer / (lambda + ratio);
  return frac * frac / lambda;
}

// tr(A Gamma^{-2} Lambda) = sum_k (lambda_k / d_k^2) v_k^T A v_k.
inline double weighted_trace(const Matrix& a, const GammaMatrix& gamma) {
  const Covariance& cov = gamma.covariance();
  double total = 0.0;
  for (Eigen::Index k = 0; k < cov.dim(); ++k) {
    const double dk = gamma.eigen_diag()[k];
    const Vector vk = cov.eigenvectors().col(k);
    total += cov.eigenvalues()[k] / (dk * dk) * vk.dot(a * vk);
  }
  return total;
}

// Gram matrix h with h_{ij} = tr(mu_i mu_j^T Gamma^{-2} Lambda).
inline Matrix mean_interaction(const TaskSequence& seq, const GammaMatrix& gamma) {
  const Covariance& cov = gamma.covariance();
  const int t_count = seq.num_tasks();
  Matrix projections(cov.dim(), t_count);  // row k: sqrt(w_k) v_k^T mu_i
  for (int i = 0; i < t_count; ++i) {
    projections.col(i) = cov.eigenvectors().transpose() * seq.tasks[i].mean;
  }
  for (Eigen::Index k = 0; k < cov.dim(); ++k) {
    const double dk = gamma.eigen_diag()[k];
    projections.row(k) *= std::sqrt(cov.eigenvalues()[k]) / dk;
  }
  return projections.transpose() * projections;
}

// A_i = tr[(M Sigma_i + M^2 mu_i mu_i^T) Gamma^{-2} Lambda].
inline std::vector<double> intra_task_traces(const TaskSequence& seq,
                                             const GammaMatrix& gamma,
                                             const Matrix& h) {
  const double m = static_cast<double>(seq.context_len);
  std::vector<double> a(static_cast<std::size_t>(seq.num_tasks()));
  for (int i = 0; i < seq.num_tasks(); ++i) {
    a[static_cast<std::size_t>(i)] =
        m * weighted_trace(seq.tasks[static_cast<std::size_t>(i)].second_moment,
                           gamma) +
        m * m * h(i, i);
  }
  return a;
}

}  // namespace theory_detail

inline CoefficientSet coefficients(int num_tasks, long long context_len, int t) {
  theory_detail::check_task_index(t, num_tasks);
  CoefficientSet out;
  const double tm1 =
      static_cast<double>(static_cast<long long>(t) * (context_len + 1));
  out.beta_t = 1.0 / tm1;
  out.alpha = static_cast<double>(context_len) / tm1;
  out.c_t = theory_detail::interference_coeff(num_tasks, context_len, t);
  out.future_coeff = theory_detail::final_norm_coeff(num_tasks, context_len);

  out.alpha_i_of_t = Vector(num_tasks);
  for (int i = 1; i <= num_tasks; ++i) {
    out.alpha_i_of_t[i - 1] = (i <= t) ? out.c_t : out.future_coeff;
  }

  std::vector<double> c(static_cast<std::size_t>(num_tasks) + 1);
  for (int s = 1; s <= num_tasks; ++s) {
    c[static_cast<std::size_t>(s)] =
        theory_detail::interference_coeff(num_tasks, context_len, s);
  }
  const double d2 = out.future_coeff * out.future_coeff;
  out.avg_sq = Vector(num_tasks);
  for (int i = 1; i <= num_tasks; ++i) {
    double sum = static_cast<double>(i - 1) * d2;
    for (int s = i; s <= num_tasks; ++s) {
      sum += c[static_cast<std::size_t>(s)] * c[static_cast<std::size_t>(s)];
    }
    out.avg_sq[i - 1] = sum / static_cast<double>(num_tasks);
  }
  out.avg_cross = Matrix(num_tasks, num_tasks);
  for (int i = 1; i <= num_tasks; ++i) {
    out.avg_cross(i - 1, i - 1) = out.avg_sq[i - 1];
    for (int j = i + 1; j <= num_tasks; ++j) {
      double sum = static_cast<double>(i - 1) * d2;
      for (int s = i; s < j; ++s) {
        sum += c[static_cast<std::size_t>(s)] * out.future_coeff;
      }
      for (int s = j; s <= num_tasks; ++s) {
        sum += c[static_cast<std::size_t>(s)] * c[static_cast<std::size_t>(s)];
      }
      const double value = sum / static_cast<double>(num_tasks);
      out.avg_cross(i - 1, j - 1) = value;
      out.avg_cross(j - 1, i - 1) = value;
    }
  }
  return out;
}

// Expected squared error of the task-t prediction made right after task t's
// block: irreducible + variance + bias. Irreducible is 0 under the
// noiseless linear generator.
inline GeneralizationBreakdown generalization_error(const TaskSequence& seq,
                                                    int t,
                                                    const GammaMatrix& gamma) {
  theory_detail::check_task_index(t, seq.num_tasks());
  const Covariance& cov = gamma.covariance();
  const long long m = seq.context_len;
  const double tm1 = static_cast<double>(static_cast<long long>(t) * (m + 1));

  GeneralizationBreakdown out;
  double variance = 0.0;
  for (int s = 0; s < t; ++s) {
    variance += theory_detail::weighted_trace(
        seq.tasks[static_cast<std::size_t>(s)].second_moment, gamma);
  }
  out.variance = static_cast<double>(m) / (tm1 * tm1) * variance;

  Vector prefix_mean = Vector::Zero(cov.dim());
  for (int s = 0; s < t; ++s) {
    prefix_mean += seq.tasks[static_cast<std::size_t>(s)].mean;
  }
  const double alpha = static_cast<double>(m) / tm1;
  const double n = static_cast<double>(seq.train_len);
  double bias = 0.0;
  for (Eigen::Index k = 0; k < cov.dim(); ++k) {
    const Vector vk = cov.eigenvectors().col(k);
    bias += theory_detail::bias_coordinate(
        cov.eigenvalues()[k], cov.trace(), alpha, vk.dot(prefix_mean),
        vk.dot(seq.tasks[static_cast<std::size_t>(t) - 1].mean), n);
  }
  out.bias = bias;
  out.irreducible = 0.0;
  out.total = out.irreducible + out.variance + out.bias;
  return out;
}

// Interference error E[(hat Y_{t,q} - hat y_{t,q})^2] from the final-query
// reweighting of task statistics.
inline double forgetting_error(const TaskSequence& seq, int t,
                               const GammaMatrix& gamma) {
  theory_detail::check_task_index(t, seq.num_tasks());
  const int t_count = seq.num_tasks();
  const double m = static_cast<double>(seq.context_len);
  const Matrix h = theory_detail::mean_interaction(seq, gamma);
  const std::vector<double> a = theory_detail::intra_task_traces(seq, gamma, h);
  const double ct = theory_detail::interference_coeff(t_count, seq.context_len, t);
  const double fd = theory_detail::final_norm_coeff(t_count, seq.context_len);

  double total = 0.0;
  for (int i = 1; i <= t_count; ++i) {
    const double ai = (i <= t) ? ct : fd;
    total += ai * ai * a[static_cast<std::size_t>(i) - 1];
  }
  for (int i = 1; i <= t_count; ++i) {
    for (int j = 1; j <= t_count; ++j) {
      if (i == j) continue;
      const double ai = (i <= t) ? ct : fd;
      const double aj = (j <= t) ? ct : fd;
      total += m * m * ai * aj * h(i - 1, j - 1);
    }
  }
  return total;
}

// Five-way split of forgetting_error by task position relative to t.
inline ForgettingBreakdown forgetting_decomposition(const TaskSequence& seq,
                                                    int t,
                                                    const GammaMatrix& gamma) {
  theory_detail::check_task_index(t, seq.num_tasks());
  const int t_count = seq.num_tasks();
  const double m = static_cast<double>(seq.context_len);
  const Matrix h = theory_detail::mean_interaction(seq, gamma);
  const double ct = theory_detail::interference_coeff(t_count, seq.context_len, t);
  const double fd = theory_detail::final_norm_coeff(t_count, seq.context_len);

  ForgettingBreakdown out;
  for (int i = 1; i <= t_count; ++i) {
    const double var_trace = theory_detail::weighted_trace(
        seq.tasks[static_cast<std::size_t>(i) - 1].second_moment, gamma);
    const double intra = m * var_trace + m * m * h(i - 1, i - 1);
    if (i <= t) {
      out.intra_past += ct * ct * intra;
    } else {
      out.intra_future += fd * fd * intra;
    }
  }
  for (int i = 1; i <= t_count; ++i) {
    for (int j = 1; j <= t_count; ++j) {
      if (i == j) continue;
      const double hij = m * m * h(i - 1, j - 1);
      if (i <= t && j <= t) {
        out.cross_past += ct * ct * hij;
      } else if (i > t && j > t) {
        out.cross_future += fd * fd * hij;
      } else {
        out.cross_mixed += ct * fd * hij;
      }
    }
  }
  out.total = out.intra_past + out.intra_future + out.cross_past +
              out.cross_future + out.cross_mixed;
  return out;
}

// Task-averaged interference (the standard continual-learning forgetting
// metric): sum_i avg_sq_i A_i + sum_{i != j} avg_cross_ij B_ij.
inline double average_interference(const TaskSequence& seq,
                                   const GammaMatrix& gamma) {
  const int t_count = seq.num_tasks();
  const double m = static_cast<double>(seq.context_len);
  const Matrix h = theory_detail::mean_interaction(seq, gamma);
  const std::vector<double> a = theory_detail::intra_task_traces(seq, gamma, h);
  const CoefficientSet coeff = coefficients(t_count, seq.context_len, 1);

  double total = 0.0;
  for (int i = 0; i < t_count; ++i) {
    total += coeff.avg_sq[i] * a[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < t_count; ++i) {
    for (int j = 0; j < t_count; ++j) {
      if (i == j) continue;
      total += coeff.avg_cross(i, j) * m * m * h(i, j);
    }
  }
  return total;
}

// Prediction error for task t measured at the final query, after all T
// tasks: the generalization structure with beta = M/(TM+T+1) and sums
// running over every task.
inline GeneralizationBreakdown error_after_T(const TaskSequence& seq, int t,
                                             const GammaMatrix& gamma) {
  theory_detail::check_task_index(t, seq.num_tasks());
  const Covariance& cov = gamma.covariance();
  const int t_count = seq.num_tasks();
  const long long m = seq.context_len;
  const double norm = static_cast<double>(
      static_cast<long long>(t_count) * m + t_count + 1);

  GeneralizationBreakdown out;
  double variance = 0.0;
  Vector mean_sum = Vector::Zero(cov.dim());
  for (int s = 0; s < t_count; ++s) {
    variance += theory_detail::weighted_trace(
        seq.tasks[static_cast<std::size_t>(s)].second_moment, gamma);
    mean_sum += seq.tasks[static_cast<std::size_t>(s)].mean;
  }
  out.variance = static_cast<double>(m) / (norm * norm) * variance;

  const double beta = static_cast<double>(m) / norm;
  const double n = static_cast<double>(seq.train_len);
  double bias = 0.0;
  for (Eigen::Index k = 0; k < cov.dim(); ++k) {
    const Vector vk = cov.eigenvectors().col(k);
    bias += theory_detail::bias_coordinate(
        cov.eigenvalues()[k], cov.trace(), beta, vk.dot(mean_sum),
        vk.dot(seq.tasks[static_cast<std::size_t>(t) - 1].mean), n);
  }
  out.bias = bias;
  out.irreducible = 0.0;
  out.total = out.irreducible + out.variance + out.bias;
  return out;
}

// Average of error_after_T over t, in the closed per-coordinate form
// (1/lambda_i)[(mbar_i - lambda_i beta s_i / d_i)^2 + within-task variance].
inline double average_error_after_T(const TaskSequence& seq,
                                    const GammaMatrix& gamma) {
  const Covariance& cov = gamma.covariance();
  const int t_count = seq.num_tasks();
  const long long m = seq.context_len;
  const double norm = static_cast<double>(
      static_cast<long long>(t_count) * m + t_count + 1);
  const double beta = static_cast<double>(m) / norm;

  double variance = 0.0;
  Vector mean_sum = Vector::Zero(cov.dim());
  for (int s = 0; s < t_count; ++s) {
    variance += theory_detail::weighted_trace(
        seq.tasks[static_cast<std::size_t>(s)].second_moment, gamma);
    mean_sum += seq.tasks[static_cast<std::size_t>(s)].mean;
  }
  variance *= static_cast<double>(m) / (norm * norm);

  double bias = 0.0;
  for (Eigen::Index k = 0; k < cov.dim(); ++k) {
    const Vector vk = cov.eigenvectors().col(k);
    const double lambda = cov.eigenvalues()[k];
    const double dk = gamma.eigen_diag()[k];
    const double s_k = vk.dot(mean_sum);
    double mbar = 0.0;
    for (int s = 0; s < t_count; ++s) {
      mbar += vk.dot(seq.tasks[static_cast<std::size_t>(s)].mean);
    }
    mbar /= static_cast<double>(t_count);
    double within = 0.0;
    for (int s = 0; s < t_count; ++s) {
      const double diff = vk.dot(seq.tasks[static_cast<std::size_t>(s)].mean) - mbar;
      within += diff * diff;
    }
    within /= static_cast<double>(t_count);
    const double centered = mbar - lambda * beta * s_k / dk;
    bias += (centered * centered + within) / lambda;
  }
  return variance + bias;
}

// N at which the coordinate-i bias of the task-t error vanishes:
// N_i^* = m_i (lambda_i + tr(Lambda)) / (lambda_i (alpha s_i - m_i)).
// Returns nullopt when the denominator is zero or the root is not a
// positive training length.
inline std::optional<double> stationary_train_len(const TaskSequence& seq, int t,
                                                  int coordinate) {
  theory_detail::check_task_index(t, seq.num_tasks());
  const Covariance& cov = seq.covariance;
  if (coordinate < 1 || coordinate > cov.dim()) {
    throw IndexOutOfRangeError("coordinate must lie in 1..d");
  }
  const long long m = seq.context_len;
  const double alpha =
      static_cast<double>(m) /
      static_cast<double>(static_cast<long long>(t) * (m + 1));
  const Vector vk = cov.eigenvectors().col(coordinate - 1);
  Vector prefix_mean = Vector::Zero(cov.dim());
  for (int s = 0; s < t; ++s) {
    prefix_mean += seq.tasks[static_cast<std::size_t>(s)].mean;
  }
  const double s_i = vk.dot(prefix_mean);
  const double m_i = vk.dot(seq.tasks[static_cast<std::size_t>(t) - 1].mean);
  const double lambda = cov.eigenvalues()[coordinate - 1];
  const double denom = lambda * (alpha * s_i - m_i);
  if (denom == 0.0) {
    return std::nullopt;
  }
  const double n_star = m_i * (lambda + cov.trace()) / denom;
  if (!std::isfinite(n_star) || n_star <= 0.0) {
    return std::nullopt;
  }
  return n_star;
}

// Exposed so the stationary point can be substituted back into the exact
// per-coordinate bias expression in tests and reports.
inline double bias_coordinate(double lambda, double tau, double coeff, double s,
                              double m, double n) {
  return theory_detail::bias_coordinate(lambda, tau, coeff, s, m, n);
}

}  // namespace iccl

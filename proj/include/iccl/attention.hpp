// SPDX-License-Identifier: Apache-2.0
//
// One-layer linear self-attention, with and without the causal mask, plus
// the closed-form shortcuts for the readout at each query column.

#pragma once

#include <algorithm>
#include <vector>

#include <Eigen/Dense>

#include "iccl/data_model.hpp"
#include "iccl/errors.hpp"
#include "iccl/prompt.hpp"

namespace iccl {

struct AttentionParams {
  Matrix W;
  Matrix V;
  double rho = 1.0;
};

// f_LSA(P) = P + W P (P^T V P) / rho
inline Matrix lsa_forward(const PromptMatrix& prompt, const AttentionParams& params) {
  if (params.rho <= 0.0) {
    throw InvalidConfigError("lsa_forward requires rho > 0");
  }
  const Matrix& p = prompt.data;
  return p + (params.W * p) * (p.transpose() * params.V * p) / params.rho;
}

// f_MSA(P) = P + W P mask(P^T V P), where column j of mask(A) keeps rows
// 1..j scaled by 1/j (1-based) and zeroes the rest.
inline Matrix msa_forward(const PromptMatrix& prompt, const AttentionParams& params) {
  const Matrix& p = prompt.data;
  Matrix scores = p.transpose() * params.V * p;
  const Eigen::Index k = scores.cols();
  for (Eigen::Index j = 0; j < k; ++j) {
    scores.col(j).head(j + 1) /= static_cast<double>(j + 1);
    scores.col(j).tail(k - j - 1).setZero();
  }
  return p + (params.W * p) * scores;
}

namespace detail {

// Sums a set of vectors with per-component ascending reordering, so the
// result is invariant under any permutation of the addends.
inline Vector permutation_invariant_sum(const std::vector<Vector>& vectors) {
  if (vectors.empty()) {
    return Vector();
  }
  const Eigen::Index d = vectors.front().size();
  Vector total(d);
  std::vector<double> component(vectors.size());
  for (Eigen::Index k = 0; k < d; ++k) {
    for (std::size_t s = 0; s < vectors.size(); ++s) {
      component[s] = vectors[s][k];
    }
    std::sort(component.begin(), component.end());
    double acc = 0.0;
    for (double v : component) {
      acc += v;
    }
    total[k] = acc;
  }
  return total;
}

}  // namespace detail

// Unmasked prediction: x_q^T Gamma^{-1} (1/M) sum_s S_s. Blind to task
// order, hence identical for every queried task.
inline double closed_form_lsa_predict(const TaskSamples& samples,
                                      const GammaMatrix& gamma,
                                      const Vector& query, long long context_len) {
  const Vector total = detail::permutation_invariant_sum(samples.label_sums);
  if (total.size() == 0) {
    return 0.0;
  }
  return query.dot(gamma.inverse() * total) / static_cast<double>(context_len);
}

// Masked prediction after task t: x_{t,q}^T Gamma^{-1} (beta_t sum_{s<=t} S_s)
// with beta_t = 1/(t(M+1)). Touches only tasks 1..t.
inline double closed_form_msa_predict(const TaskSamples& samples,
                                      const GammaMatrix& gamma, int t,
                                      long long context_len) {
  if (t < 1 || t > static_cast<int>(samples.label_sums.size())) {
    throw IndexOutOfRangeError("task index must lie in 1..T");
  }
  Vector prefix = Vector::Zero(samples.label_sums.front().size());
  for (int s = 0; s < t; ++s) {
    prefix += samples.label_sums[static_cast<std::size_t>(s)];
  }
  const double beta_t =
      1.0 / static_cast<double>(static_cast<long long>(t) * (context_len + 1));
  return beta_t * samples.queries[static_cast<std::size_t>(t) - 1].dot(
                      gamma.inverse() * prefix);
}

// Final-query prediction after all T tasks:
// x_q^T Gamma^{-1} (1/(T(M+1)+1)) sum_{s=1}^T S_s.
inline double closed_form_final_predict(const TaskSamples& samples,
                                        const GammaMatrix& gamma,
                                        long long context_len, int num_tasks,
                                        const Vector& query) {
  Vector total = Vector::Zero(query.size());
  for (int s = 0; s < num_tasks; ++s) {
    total += samples.label_sums[static_cast<std::size_t>(s)];
  }
  const double norm = 1.0 / static_cast<double>(
                                static_cast<long long>(num_tasks) * (context_len + 1) + 1);
  return norm * query.dot(gamma.inverse() * total);
}

}  // namespace iccl

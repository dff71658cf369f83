// SPDX-License-Identifier: Apache-2.0
//
// Multi-task prompt construction. A prompt stacks inputs over labels,
// task-major: M example columns then one query column per task, then a
// final query column used for the forgetting comparison.

#pragma once

#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "iccl/data_model.hpp"
#include "iccl/errors.hpp"

namespace iccl {

// Raw per-task draws plus the per-task label-weighted input sums
// S_s = sum_i x_{s,i} y_{s,i}, the sufficient statistic of each block.
struct TaskSamples {
  std::vector<std::vector<Vector>> inputs;  // [T][M] example inputs
  std::vector<Vector> queries;              // [T] query inputs
  std::vector<Vector> label_sums;           // [T] S_s
};

inline TaskSamples make_task_samples(const TaskSequence& seq,
                                     std::vector<std::vector<Vector>> inputs,
                                     std::vector<Vector> queries) {
  const int t_count = seq.num_tasks();
  const auto m = static_cast<std::size_t>(seq.context_len);
  if (inputs.size() != static_cast<std::size_t>(t_count) ||
      queries.size() != static_cast<std::size_t>(t_count)) {
    throw DimensionMismatchError("sample lists must have one entry per task");
  }
  std::vector<Vector> label_sums;
  label_sums.reserve(inputs.size());
  for (int s = 0; s < t_count; ++s) {
    if (inputs[s].size() != m) {
      throw DimensionMismatchError("each task needs exactly M example inputs");
    }
    const Vector& w = seq.tasks[s].weight;
    Vector sum = Vector::Zero(seq.covariance.dim());
    for (const Vector& x : inputs[s]) {
      if (x.size() != seq.covariance.dim() ||
          queries[s].size() != seq.covariance.dim()) {
        throw DimensionMismatchError("sample dimension does not match covariance");
      }
      sum += x * w.dot(x);
    }
    label_sums.push_back(std::move(sum));
  }
  return TaskSamples{std::move(inputs), std::move(queries), std::move(label_sums)};
}

// The (d+1) x (T(M+1)+1) embedding. query_columns holds 1-based indices
// t(M+1) for each task plus T(M+1)+1 for the final query, matching the
// mask arithmetic (which divides by the 1-based column index).
struct PromptMatrix {
  Matrix data;
  std::vector<Eigen::Index> query_columns;  // 1-based
  int final_query_task = 1;                 // tau, 1-based

  Eigen::Index columns() const { return data.cols(); }
  // 0-based column of task t's query (t in 1..T), or of the final query
  // for t = T+1.
  Eigen::Index query_col0(int t) const {
    return query_columns.at(static_cast<std::size_t>(t) - 1) - 1;
  }
};

// Lays out P = (P_1 ... P_T final_query). Query columns carry label 0; the
// final query duplicates task tau's in-block query input, so both
// predictions for task tau are evaluated at the same point.
inline PromptMatrix build_prompt(const TaskSequence& seq,
                                 const TaskSamples& samples, int final_task) {
  const int t_count = seq.num_tasks();
  const long long m = seq.context_len;
  if (final_task < 1 || final_task > t_count) {
    throw IndexOutOfRangeError("final_task must lie in 1..T");
  }
  if (samples.inputs.size() != static_cast<std::size_t>(t_count)) {
    throw DimensionMismatchError("samples do not match task sequence");
  }
  const Eigen::Index d = seq.covariance.dim();
  const Eigen::Index cols = static_cast<Eigen::Index>(t_count) * (m + 1) + 1;
  Matrix data(d + 1, cols);
  std::vector<Eigen::Index> query_columns;
  query_columns.reserve(static_cast<std::size_t>(t_count) + 1);

  Eigen::Index col = 0;
  for (int s = 0; s < t_count; ++s) {
    const Vector& w = seq.tasks[s].weight;
    for (long long i = 0; i < m; ++i) {
      const Vector& x = samples.inputs[s][static_cast<std::size_t>(i)];
      data.col(col).head(d) = x;
      data(d, col) = w.dot(x);
      ++col;
    }
    data.col(col).head(d) = samples.queries[s];
    data(d, col) = 0.0;
    ++col;
    query_columns.push_back(col);  // 1-based
  }
  data.col(col).head(d) = samples.queries[static_cast<std::size_t>(final_task) - 1];
  data(d, col) = 0.0;
  query_columns.push_back(col + 1);

  return PromptMatrix{std::move(data), std::move(query_columns), final_task};
}

}  // namespace iccl

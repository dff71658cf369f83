// SPDX-License-Identifier: Apache-2.0
//
// Seeded Monte Carlo estimation of the generalization, forgetting, and
// after-sequence errors, with confidence intervals against the closed
// forms. Per-trial streams are keyed by (seed, estimator, task, trial),
// so results are bit-identical regardless of execution order or threads.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "iccl/attention.hpp"
#include "iccl/data_model.hpp"
#include "iccl/errors.hpp"
#include "iccl/parallel.hpp"
#include "iccl/prompt.hpp"
#include "iccl/rng.hpp"
#include "iccl/theory.hpp"

namespace iccl {

enum class TargetKind { generalization, forgetting, after_t, all };

struct TrialConfig {
  TaskSequence seq;
  long long trials = 0;
  std::uint64_t seed = 0;
  TargetKind target = TargetKind::all;
  int task_index = 1;  // t for the targeted kinds; ignored for `all`
};

struct EstimateWithCI {
  double mean = 0.0;
  double std_error = 0.0;
  long long trials = 0;
  double theory_value = 0.0;
  double z_score = 0.0;
};

namespace sim_detail {

// Stream-derivation words per estimator, so estimators sharing a seed do
// not share draws.
inline constexpr std::uint64_t kind_word(TargetKind kind) {
  switch (kind) {
    case TargetKind::generalization: return 0x67656eULL;
    case TargetKind::forgetting: return 0x666f72ULL;
    case TargetKind::after_t: return 0x616674ULL;
    default: return 0x616c6cULL;
  }
}

inline void check_config(const TrialConfig& cfg, int t) {
  if (cfg.trials < 100) {
    throw InvalidConfigError("trials must be >= 100 for usable CI math");
  }
  if (t < 1 || t > cfg.seq.num_tasks()) {
    throw InvalidConfigError("target task index must lie in 1..T");
  }
}

inline EstimateWithCI summarize(const std::vector<double>& values,
                                double theory_value) {
  double sum = 0.0;
  for (double v : values) {
    sum += v;
  }
  const double n = static_cast<double>(values.size());
  const double mean = sum / n;
  double sq = 0.0;
  for (double v : values) {
    const double diff = v - mean;
    sq += diff * diff;
  }
  const double sd = std::sqrt(sq / (n - 1.0));
  const double std_error = sd / std::sqrt(n);

  EstimateWithCI out;
  out.mean = mean;
  out.std_error = std_error;
  out.trials = static_cast<long long>(values.size());
  out.theory_value = theory_value;
  if (std_error > 0.0) {
    out.z_score = (mean - theory_value) / std_error;
  } else if (mean == theory_value) {
    out.z_score = 0.0;
  } else {
    out.z_score = std::copysign(std::numeric_limits<double>::infinity(),
                                mean - theory_value);
  }
  return out;
}

}  // namespace sim_detail

// Fresh draws for one trial: x_{s,i} and x_{s,q} ~ N(0, Lambda) for every
// task, plus the per-task label sums.
inline TaskSamples draw_trial_samples(const TaskSequence& seq,
                                      const rng::Stream& trial_stream) {
  const int t_count = seq.num_tasks();
  const long long m = seq.context_len;
  const Matrix& factor = seq.covariance.sqrt_factor();
  const Eigen::Index d = seq.covariance.dim();

  std::vector<std::vector<Vector>> inputs(static_cast<std::size_t>(t_count));
  std::vector<Vector> queries(static_cast<std::size_t>(t_count));
  for (int s = 0; s < t_count; ++s) {
    auto& task_inputs = inputs[static_cast<std::size_t>(s)];
    task_inputs.reserve(static_cast<std::size_t>(m));
    const std::uint64_t base = static_cast<std::uint64_t>(s) * (static_cast<std::uint64_t>(m) + 2);
    for (long long i = 0; i < m; ++i) {
      task_inputs.push_back(
          factor * rng::normal_vector(
                       trial_stream.derive(base + static_cast<std::uint64_t>(i)), d));
    }
    queries[static_cast<std::size_t>(s)] =
        factor * rng::normal_vector(
                     trial_stream.derive(base + static_cast<std::uint64_t>(m)), d);
  }
  return make_task_samples(seq, std::move(inputs), std::move(queries));
}

inline TaskSamples draw_trial_samples(const TaskSequence& seq, std::uint64_t seed,
                                      long long trial,
                                      TargetKind kind = TargetKind::generalization,
                                      int t = 1) {
  const rng::Stream stream = rng::make_stream(seed)
                                 .derive(sim_detail::kind_word(kind))
                                 .derive(static_cast<std::uint64_t>(t))
                                 .derive(static_cast<std::uint64_t>(trial));
  return draw_trial_samples(seq, stream);
}

// E[(hat y_{t,q} - y_{t,q})^2] vs generalization_error.
inline EstimateWithCI run_generalization_mc(const TrialConfig& cfg, int t,
                                            int threads = 1) {
  sim_detail::check_config(cfg, t);
  const GammaMatrix gamma = build_gamma(cfg.seq.covariance, cfg.seq.train_len);
  const double theory = generalization_error(cfg.seq, t, gamma).total;
  const Vector& w = cfg.seq.tasks[static_cast<std::size_t>(t) - 1].weight;

  std::vector<double> values(static_cast<std::size_t>(cfg.trials));
  parallel_for(values.size(), threads, [&](std::size_t trial) {
    const TaskSamples samples = draw_trial_samples(
        cfg.seq, cfg.seed, static_cast<long long>(trial),
        TargetKind::generalization, t);
    const double predicted =
        closed_form_msa_predict(samples, gamma, t, cfg.seq.context_len);
    const double truth = w.dot(samples.queries[static_cast<std::size_t>(t) - 1]);
    const double err = predicted - truth;
    values[trial] = err * err;
  });
  return sim_detail::summarize(values, theory);
}

// E[(hat Y_{t,q} - hat y_{t,q})^2] vs forgetting_error; both predictions
// per trial come from the same realization and the same query point.
inline EstimateWithCI run_forgetting_mc(const TrialConfig& cfg, int t,
                                        int threads = 1) {
  sim_detail::check_config(cfg, t);
  const GammaMatrix gamma = build_gamma(cfg.seq.covariance, cfg.seq.train_len);
  const double theory = forgetting_error(cfg.seq, t, gamma);

  std::vector<double> values(static_cast<std::size_t>(cfg.trials));
  parallel_for(values.size(), threads, [&](std::size_t trial) {
    const TaskSamples samples = draw_trial_samples(
        cfg.seq, cfg.seed, static_cast<long long>(trial), TargetKind::forgetting, t);
    const double after_task =
        closed_form_msa_predict(samples, gamma, t, cfg.seq.context_len);
    const double final_pred = closed_form_final_predict(
        samples, gamma, cfg.seq.context_len, cfg.seq.num_tasks(),
        samples.queries[static_cast<std::size_t>(t) - 1]);
    const double diff = final_pred - after_task;
    values[trial] = diff * diff;
  });
  return sim_detail::summarize(values, theory);
}

// E[(hat Y_{t,q} - y_{t,q})^2] vs error_after_T.
inline EstimateWithCI run_after_t_mc(const TrialConfig& cfg, int t,
                                     int threads = 1) {
  sim_detail::check_config(cfg, t);
  const GammaMatrix gamma = build_gamma(cfg.seq.covariance, cfg.seq.train_len);
  const double theory = error_after_T(cfg.seq, t, gamma).total;
  const Vector& w = cfg.seq.tasks[static_cast<std::size_t>(t) - 1].weight;

  std::vector<double> values(static_cast<std::size_t>(cfg.trials));
  parallel_for(values.size(), threads, [&](std::size_t trial) {
    const TaskSamples samples = draw_trial_samples(
        cfg.seq, cfg.seed, static_cast<long long>(trial), TargetKind::after_t, t);
    const double final_pred = closed_form_final_predict(
        samples, gamma, cfg.seq.context_len, cfg.seq.num_tasks(),
        samples.queries[static_cast<std::size_t>(t) - 1]);
    const double truth = w.dot(samples.queries[static_cast<std::size_t>(t) - 1]);
    const double err = final_pred - truth;
    values[trial] = err * err;
  });
  return sim_detail::summarize(values, theory);
}

struct GridCell {
  std::size_t config_index = 0;
  TargetKind kind = TargetKind::generalization;
  int task_index = 1;
  EstimateWithCI estimate;
};

// Expands each config (target `all` fans out to every estimator at every
// task index) and evaluates the cells. Cell results depend only on the
// cell's own (seed, estimator, task), never on grid order.
inline std::vector<GridCell> compare_grid(const std::vector<TrialConfig>& grid,
                                          int threads = 1) {
  if (grid.empty()) {
    throw InvalidConfigError("grid must be non-empty");
  }
  std::vector<GridCell> cells;
  for (std::size_t c = 0; c < grid.size(); ++c) {
    const TrialConfig& cfg = grid[c];
    auto add = [&](TargetKind kind, int t) {
      cells.push_back(GridCell{c, kind, t, EstimateWithCI{}});
    };
    if (cfg.target == TargetKind::all) {
      for (int t = 1; t <= cfg.seq.num_tasks(); ++t) {
        add(TargetKind::generalization, t);
        add(TargetKind::forgetting, t);
        add(TargetKind::after_t, t);
      }
    } else {
      add(cfg.target, cfg.task_index);
    }
  }
  for (GridCell& cell : cells) {
    const TrialConfig& cfg = grid[cell.config_index];
    switch (cell.kind) {
      case TargetKind::generalization:
        cell.estimate = run_generalization_mc(cfg, cell.task_index, threads);
        break;
      case TargetKind::forgetting:
        cell.estimate = run_forgetting_mc(cfg, cell.task_index, threads);
        break;
      default:
        cell.estimate = run_after_t_mc(cfg, cell.task_index, threads);
        break;
    }
  }
  return cells;
}

}  // namespace iccl

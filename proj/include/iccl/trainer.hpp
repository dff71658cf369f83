// SPDX-License-Identifier: Apache-2.0
//
// Gradient-descent verification of the pretraining fixed point: trains a
// one-layer linear self-attention on the in-context regression loss from
// the prescribed block initialization and measures the gap to the analytic
// limit (W*, V*).

#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "iccl/attention.hpp"
#include "iccl/data_model.hpp"
#include "iccl/errors.hpp"
#include "iccl/parallel.hpp"
#include "iccl/rng.hpp"

namespace iccl {

struct InitSpec {
  double sigma = 0.1;
  Matrix theta;  // d x d, with ||theta theta^T||_F = 1 and theta * Lambda != 0
};

struct TrainConfig {
  Covariance cov;
  long long train_len = 1;   // N, prompt length during pretraining
  long long batch = 1;       // B, prompts per loss evaluation
  double step_size = 0.5;    // initial learning rate (also the cap)
  long long max_steps = 10000;
  double tol = 1e-2;         // Frobenius gap target against (W*, V*)
  std::uint64_t seed = 0;
};

struct ConvergenceReport {
  long long steps_taken = 0;
  double final_loss = 0.0;
  double gap_W = 0.0;
  double gap_V = 0.0;
  bool converged = false;
  // Largest magnitude seen outside the initialized blocks (readout scalar
  // of W, input block of V) over the whole run.
  double max_offblock_W = 0.0;
  double max_offblock_V = 0.0;
};

struct TrainStep {
  long long step = 0;
  double loss = 0.0;
  double gap_W = 0.0;
  double gap_V = 0.0;
};

// W(0) = sigma * (bottom-right one), V(0) = sigma * (theta theta^T top-left).
inline AttentionParams init_params(const InitSpec& spec, const Covariance& cov,
                                   const GammaMatrix& gamma) {
  const Eigen::Index d = cov.dim();
  if (spec.sigma <= 0.0) {
    throw InvalidInitError("sigma must be positive");
  }
  if (spec.theta.rows() != d || spec.theta.cols() != d) {
    throw InvalidInitError("theta must be d x d");
  }
  const Matrix outer = spec.theta * spec.theta.transpose();
  if (std::abs(outer.norm() - 1.0) > 1e-10) {
    throw InvalidInitError("||theta theta^T||_F must equal 1");
  }
  if ((spec.theta * cov.matrix()).cwiseAbs().maxCoeff() <= 1e-12) {
    throw InvalidInitError("theta * Lambda must be nonzero");
  }
  if (spec.sigma * spec.sigma * gamma.operator_norm() *
          std::sqrt(static_cast<double>(d)) >= 2.0) {
    throw InvalidInitError("sigma^2 ||Gamma||_op sqrt(d) must be < 2");
  }
  AttentionParams params;
  params.W = Matrix::Zero(d + 1, d + 1);
  params.W(d, d) = spec.sigma;
  params.V = Matrix::Zero(d + 1, d + 1);
  params.V.topLeftCorner(d, d) = spec.sigma * outer;
  params.rho = static_cast<double>(gamma.train_len());
  return params;
}

// Gradient-flow limit: W* = a^{1/4} (bottom-right one),
// V* = a^{-1/4} (Gamma^{-1} top-left), a = tr(Gamma^{-2}).
inline AttentionParams limit_params(const GammaMatrix& gamma, double rho = 1.0) {
  const Eigen::Index d = gamma.covariance().dim();
  const double a = gamma.trace_inverse_squared();
  const double root = std::pow(a, 0.25);
  AttentionParams params;
  params.W = Matrix::Zero(d + 1, d + 1);
  params.W(d, d) = root;
  params.V = Matrix::Zero(d + 1, d + 1);
  params.V.topLeftCorner(d, d) = gamma.inverse() / root;
  params.rho = rho;
  return params;
}

namespace train_detail {

// Sufficient statistics of one pretraining prompt for the query readout:
// a = P P^T / rho, the query token, and the query label.
struct PromptStats {
  Matrix a;
  Vector p_q;
  double y = 0.0;
};

inline PromptStats draw_prompt(const Covariance& cov, long long train_len,
                               const rng::Stream& stream) {
  const Eigen::Index d = cov.dim();
  const Vector w = rng::normal_vector(stream.derive(0), d);
  Matrix outer = Matrix::Zero(d + 1, d + 1);
  Vector token(d + 1);
  for (long long i = 1; i <= train_len; ++i) {
    const Vector x =
        cov.sqrt_factor() *
        rng::normal_vector(stream.derive(static_cast<std::uint64_t>(i)), d);
    token.head(d) = x;
    token[d] = w.dot(x);
    outer += token * token.transpose();
  }
  const Vector x_q =
      cov.sqrt_factor() *
      rng::normal_vector(stream.derive(static_cast<std::uint64_t>(train_len) + 1), d);
  Vector p_q(d + 1);
  p_q.head(d) = x_q;
  p_q[d] = 0.0;
  outer += p_q * p_q.transpose();
  return PromptStats{outer / static_cast<double>(train_len), std::move(p_q),
                     w.dot(x_q)};
}

inline std::vector<PromptStats> draw_batch(const Covariance& cov,
                                           long long train_len, long long batch,
                                           const rng::Stream& stream,
                                           int threads) {
  std::vector<PromptStats> stats(static_cast<std::size_t>(batch));
  parallel_for(stats.size(), threads, [&](std::size_t i) {
    stats[i] = draw_prompt(cov, train_len,
                           stream.derive(static_cast<std::uint64_t>(i)));
  });
  return stats;
}

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad_W;
  Matrix grad_V;
};

// loss = (1/2B) sum (y_hat - y)^2 with y_hat = e^T W a V p_q, and its exact
// gradients. Reduction runs over fixed-size blocks summed in index order,
// so the result is independent of the thread count.
inline LossAndGrad evaluate_batch(const AttentionParams& params,
                                  const std::vector<PromptStats>& stats,
                                  int threads) {
  const Eigen::Index d1 = params.W.rows();
  const Eigen::Index d = d1 - 1;
  constexpr std::size_t kBlock = 1024;
  const std::size_t blocks = (stats.size() + kBlock - 1) / kBlock;
  std::vector<LossAndGrad> partial(blocks);

  const Vector w_row = params.W.row(d).transpose();
  parallel_for(blocks, threads, [&](std::size_t b) {
    LossAndGrad acc;
    acc.grad_W = Matrix::Zero(d1, d1);
    acc.grad_V = Matrix::Zero(d1, d1);
    const std::size_t begin = b * kBlock;
    const std::size_t end = std::min(begin + kBlock, stats.size());
    for (std::size_t i = begin; i < end; ++i) {
      const PromptStats& prompt = stats[i];
      const Vector avq = prompt.a * (params.V * prompt.p_q);
      const double y_hat = w_row.dot(avq);
      const double r = y_hat - prompt.y;
      acc.loss += 0.5 * r * r;
      acc.grad_W.row(d) += r * avq.transpose();
      acc.grad_V += (r * (prompt.a * w_row)) * prompt.p_q.transpose();
    }
    partial[b] = std::move(acc);
  });

  LossAndGrad total;
  total.grad_W = Matrix::Zero(d1, d1);
  total.grad_V = Matrix::Zero(d1, d1);
  for (const LossAndGrad& p : partial) {
    total.loss += p.loss;
    total.grad_W += p.grad_W;
    total.grad_V += p.grad_V;
  }
  const double inv_b = 1.0 / static_cast<double>(stats.size());
  total.loss *= inv_b;
  total.grad_W *= inv_b;
  total.grad_V *= inv_b;
  return total;
}

inline double offblock_w(const Matrix& w) {
  const Eigen::Index d = w.rows() - 1;
  Matrix masked = w;
  masked(d, d) = 0.0;
  return masked.cwiseAbs().maxCoeff();
}

inline double offblock_v(const Matrix& v) {
  const Eigen::Index d = v.rows() - 1;
  Matrix masked = v;
  masked.topLeftCorner(d, d).setZero();
  return masked.cwiseAbs().maxCoeff();
}

}  // namespace train_detail

// Samples B fresh single-task prompts from the stream and returns the batch
// loss with exact analytic gradients (bilinear differentiation of the
// readout, no finite differences).
inline std::pair<double, std::pair<Matrix, Matrix>> batch_loss_and_gradient(
    const AttentionParams& params, const TrainConfig& cfg,
    const rng::Stream& stream, int threads = 1) {
  if (cfg.batch < 1) {
    throw InvalidConfigError("batch must be >= 1");
  }
  const auto stats =
      train_detail::draw_batch(cfg.cov, cfg.train_len, cfg.batch, stream, threads);
  auto result = train_detail::evaluate_batch(params, stats, threads);
  return {result.loss, {std::move(result.grad_W), std::move(result.grad_V)}};
}

// Full-batch gradient descent on one frozen batch, with step-size halving
// on loss increase (capped at the initial step size). Reports Frobenius
// gaps against limit_params.
inline ConvergenceReport train_to_convergence(const InitSpec& spec,
                                              const TrainConfig& cfg,
                                              int threads = 1,
                                              std::vector<TrainStep>* trace = nullptr) {
  if (cfg.step_size <= 0.0 || cfg.tol <= 0.0) {
    throw InvalidConfigError("step_size and tol must be positive");
  }
  const GammaMatrix gamma = build_gamma(cfg.cov, cfg.train_len);
  AttentionParams params = init_params(spec, cfg.cov, gamma);
  const AttentionParams target = limit_params(gamma);

  const rng::Stream batch_stream = rng::make_stream(cfg.seed).derive(0x747261696eULL);
  const auto stats = train_detail::draw_batch(cfg.cov, cfg.train_len, cfg.batch,
                                              batch_stream, threads);

  auto current = train_detail::evaluate_batch(params, stats, threads);
  const double initial_loss = current.loss;

  ConvergenceReport report;
  report.max_offblock_W = train_detail::offblock_w(params.W);
  report.max_offblock_V = train_detail::offblock_v(params.V);

  auto gaps = [&](const AttentionParams& p) {
    return std::pair<double, double>{(p.W - target.W).norm(),
                                     (p.V - target.V).norm()};
  };
  auto [gap_w, gap_v] = gaps(params);

  double eta = cfg.step_size;
  long long step = 0;
  while (step < cfg.max_steps && !(gap_w <= cfg.tol && gap_v <= cfg.tol)) {
    ++step;
    AttentionParams candidate = params;
    candidate.W -= eta * current.grad_W;
    candidate.V -= eta * current.grad_V;
    const auto next = train_detail::evaluate_batch(candidate, stats, threads);
    if (next.loss > current.loss) {
      eta *= 0.5;
      if (eta < 1e-18 * cfg.step_size) {
        break;  // step size exhausted; gaps below decide convergence
      }
      continue;
    }
    params = std::move(candidate);
    current = next;
    eta = std::min(2.0 * eta, cfg.step_size);

    if (current.loss > 1e6 * initial_loss) {
      throw DivergedError("training loss exceeded 1e6 x initial loss");
    }
    std::tie(gap_w, gap_v) = gaps(params);
    report.max_offblock_W =
        std::max(report.max_offblock_W, train_detail::offblock_w(params.W));
    report.max_offblock_V =
        std::max(report.max_offblock_V, train_detail::offblock_v(params.V));
    if (trace != nullptr) {
      trace->push_back(TrainStep{step, current.loss, gap_w, gap_v});
    }
  }

  report.steps_taken = step;
  report.final_loss = current.loss;
  report.gap_W = gap_w;
  report.gap_V = gap_v;
  report.converged = gap_w <= cfg.tol && gap_v <= cfg.tol;
  return report;
}

}  // namespace iccl
